"""Toy VAE for scene/occlusion codes and the identity encoder.

The VAE maps (H, W, 3) images in [0, 1] to (H/4, W/4, 4) latents.  Latents
exposed by :meth:`Vae.encode` are the posterior means multiplied by a learned
``latent_scale`` (set after pretraining so the training latents have unit
standard deviation); :meth:`Vae.decode` undoes the scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc

log = logging.getLogger(__name__)

FACTOR = 4
LATENT_CHANNELS = 4


class ProtocolError(RuntimeError):
    pass


class VaeDivergence(FloatingPointError):
    pass


class _Block(tc.Module):
    def __init__(self, c_in, c_out, rng, stride=1):
        super().__init__()
        self.conv = tc.Conv2d(c_in, c_out, rng, stride=stride)
        self.norm = tc.GroupNorm(c_out)

    def build(self, x):
        return self.norm(self.conv(x)).silu()


class VaeEncoder(tc.Module):
    def __init__(self, rng, width=32, latent=LATENT_CHANNELS):
        super().__init__()
        self.stem = tc.Conv2d(3, width, rng)
        self.b1 = _Block(width, width + 16, rng, stride=2)
        self.b2 = _Block(width + 16, width + 16, rng)
        self.b3 = _Block(width + 16, 2 * width, rng, stride=2)
        self.b4 = _Block(2 * width, 2 * width, rng)
        self.head = tc.Conv2d(2 * width, 2 * latent, rng, kernel=1, gain=0.5)

    def build(self, x):
        h = self.stem(x).silu()
        h = self.b4(self.b3(self.b2(self.b1(h))))
        return self.head(h)


class VaeDecoder(tc.Module):
    def __init__(self, rng, width=32, latent=LATENT_CHANNELS):
        super().__init__()
        self.stem = tc.Conv2d(latent, 2 * width, rng)
        self.b1 = _Block(2 * width, 2 * width, rng)
        self.b2 = _Block(2 * width, width + 16, rng)
        self.b3 = _Block(width + 16, width + 16, rng)
        self.b4 = _Block(width + 16, width, rng)
        self.head = tc.Conv2d(width, 3, rng, gain=0.5)

    def build(self, z):
        h = self.b1(self.stem(z).silu())
        h = self.b3(self.b2(tc.upsample2x(h)))
        h = self.b4(tc.upsample2x(h))
        return self.head(h)


class Vae(tc.Module):
    """Encoder/decoder pair plus the latent scale and a frozen flag."""

    def __init__(self, seed: int = 0, width: int = 32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.width = width
        self.factor = FACTOR
        self.latent_channels = LATENT_CHANNELS
        self.encoder = VaeEncoder(rng, width)
        self.decoder = VaeDecoder(rng, width)
        self.latent_scale = 1.0
        self.frozen = False
        self._graphs = {}

    # ---------------------------------------------------------- inference

    def _graph(self, kind, shape):
        key = (kind, shape)
        if key not in self._graphs:
            g = tc.Graph(f"vae_{kind}")
            x = g.input("x", shape)
            if kind == "encode":
                self.encoder(x).slice(-1, 0, self.latent_channels)
            else:
                self.decoder(x)
            self._graphs[key] = g
        return self._graphs[key]

    def _run(self, kind, arr, chunk):
        outs = []
        for i in range(0, arr.shape[0], chunk):
            part = np.ascontiguousarray(arr[i:i + chunk], dtype=np.float32)
            outs.append(self._graph(kind, part.shape).forward({"x": part}, keep=False))
        return np.concatenate(outs)

    def encode(self, images, chunk: int = 16) -> np.ndarray:
        """Scaled posterior-mean latents of (N, H, W, 3) images in [0, 1]."""
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
        if images.shape[1] % self.factor or images.shape[2] % self.factor:
            raise ValueError(f"image extents {images.shape[1:3]} not divisible by {self.factor}")
        return self._run("encode", images, chunk) * np.float32(self.latent_scale)

    def decode(self, latents, chunk: int = 16) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float32) / np.float32(self.latent_scale)
        return self._run("decode", latents, chunk)

    # ------------------------------------------------------- persistence

    def freeze(self) -> "Vae":
        self.frozen = True
        for _, t in self.named_parameters():
            t.requires_grad = False
        return self

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        h.update(repr(float(self.latent_scale)).encode())
        return h.hexdigest()

    def save(self, path) -> None:
        state = {f"vae.{k}": v for k, v in self.state_dict().items()}
        state["meta.latent_scale"] = np.array([self.latent_scale], dtype=np.float32)
        state["meta.frozen"] = np.array([1.0 if self.frozen else 0.0], dtype=np.float32)
        state["meta.width"] = np.array([self.width], dtype=np.float32)
        tc.save_checkpoint(path, state)

    @classmethod
    def load(cls, path) -> "Vae":
        state = tc.load_checkpoint(path)
        vae = cls(width=int(state["meta.width"][0]))
        vae.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("vae.")})
        vae.latent_scale = float(state["meta.latent_scale"][0])
        if state["meta.frozen"][0] > 0:
            vae.freeze()
        return vae


@dataclass
class VaeConfig:
    steps: int = 3000
    batch: int = 16
    crop: int = 64
    lr: float = 2e-3
    lr_final: float = 1e-4
    kl_weight: float = 1e-6
    seed: int = 0
    width: int = 32
    log_every: int = 100


def _crops(images, rng, batch, crop):
    n, h, w = images.shape[:3]
    idx = rng.integers(0, n, batch)
    ys = rng.integers(0, h - crop + 1, batch) if h > crop else np.zeros(batch, int)
    xs = rng.integers(0, w - crop + 1, batch) if w > crop else np.zeros(batch, int)
    out = np.stack([images[i, y:y + crop, x:x + crop] for i, y, x in zip(idx, ys, xs)])
    flip = rng.random(batch) < 0.5
    out[flip] = out[flip, :, ::-1]
    return out.astype(np.float32) / (255.0 if images.dtype == np.uint8 else 1.0)


def pretrain_vae(images: np.ndarray, cfg: VaeConfig | None = None, progress=None, scale_images=None) -> Vae:
    """Fit the VAE on (N, H, W, 3) images (uint8 or [0, 1] floats) and freeze it.

    ``scale_images`` are the images whose latents should come out with unit
    variance (default: the training images); see :func:`fit_latent_scale`.

    Loss: mean squared reconstruction error plus ``kl_weight`` times the
    per-element Gaussian KL.  Raises :class:`VaeDivergence` with the step
    number if the loss stops being finite.
    """
    cfg = cfg or VaeConfig()
    rng = np.random.default_rng(cfg.seed)
    vae = Vae(cfg.seed, cfg.width)
    crop = min(cfg.crop, images.shape[1], images.shape[2])
    g = tc.Graph("vae_train")
    x = g.input("x", (cfg.batch, crop, crop, 3))
    noise = g.input("noise", (cfg.batch, crop // FACTOR, crop // FACTOR, LATENT_CHANNELS))
    stats = vae.encoder(x)
    mu = stats.slice(-1, 0, LATENT_CHANNELS)
    logvar = stats.slice(-1, LATENT_CHANNELS, 2 * LATENT_CHANNELS)
    z = mu + (logvar * 0.5).exp() * noise
    rec = vae.decoder(z)
    mse = (rec - x).square().mean()
    kl = ((mu.square() + logvar.exp() - logvar) * 0.5 - 0.5).mean()
    loss = mse + kl * cfg.kl_weight
    params = vae.parameters()
    opt = tc.Adam(params, lr=cfg.lr, clip_norm=1.0)
    for step in range(cfg.steps):
        frac = step / max(cfg.steps - 1, 1)
        opt.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + math.cos(math.pi * frac))
        batch = _crops(images, rng, cfg.batch, crop)
        eps = rng.standard_normal(noise.shape).astype(np.float32)
        g.forward({"x": batch, "noise": eps})
        value = float(g.value(loss))
        if not math.isfinite(value):
            raise VaeDivergence(f"VAE loss became non-finite at step {step}")
        g.backward(loss)
        opt.step()
        if progress is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            progress(step, value, float(g.value(mse)))
    fit_latent_scale(vae, images if scale_images is None else scale_images, cfg.seed)
    return vae.freeze()


def fit_latent_scale(vae: Vae, images, seed: int = 0, count: int = 64) -> float:
    """Set ``latent_scale`` so latents of ``images`` have unit standard deviation.

    Measured on up to ``count`` images drawn with a generator of its own, so
    the result depends only on the weights, the images and ``seed``.
    """
    images = np.asarray(images)
    pick = np.sort(np.random.default_rng([seed, 1]).permutation(images.shape[0])[:count])
    sample = images[pick].astype(np.float32) / (255.0 if images.dtype == np.uint8 else 1.0)
    vae.latent_scale = 1.0
    lat = vae.encode(sample)
    # float32 so the value survives a checkpoint round trip unchanged
    vae.latent_scale = float(np.float32(1.0 / max(lat.std(), 1e-6)))
    return vae.latent_scale


# ----------------------------------------------------- scene/occlusion codes

@dataclass
class SceneOcclusionCode:
    scene: np.ndarray  # (T, h, w, 4)
    occlusion: np.ndarray  # (T, h, w, 4)

    @property
    def combined(self) -> np.ndarray:
        """C_so: channel concatenation, scene block first."""
        return np.concatenate([self.scene, self.occlusion], axis=-1)


def _as_float(frames):
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames.astype(np.float32) / 255.0
    return frames.astype(np.float32)


def encode_scene_occlusion(recovered_scene, occlusion, vae: Vae) -> SceneOcclusionCode:
    if not vae.frozen:
        raise ProtocolError("encode_scene_occlusion needs a frozen VAE")
    s = _as_float(recovered_scene)
    o = _as_float(occlusion)
    if s.shape != o.shape:
        raise ValueError(f"scene {s.shape} and occlusion {o.shape} components differ in shape")
    both = vae.encode(np.concatenate([s, o]))
    return SceneOcclusionCode(both[: len(s)], both[len(s):])


# ------------------------------------------------------------ identity code

CANONICAL_SIZE = 64


def _coords(size):
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    return np.stack([xx, yy], axis=-1).astype(np.float32)


def identity_input(canonical) -> np.ndarray:
    """(B, 64, 64, 4) RGBA -> premultiplied RGB, alpha and x/y coordinate channels."""
    c = np.asarray(canonical, dtype=np.float32)
    if c.ndim == 3:
        c = c[None]
    rgb = c[..., :3] * c[..., 3:4]
    coords = np.broadcast_to(_coords(c.shape[1]), c.shape[:3] + (2,))
    return np.concatenate([rgb, c[..., 3:4], coords], axis=-1)


class IdentityEncoder(tc.Module):
    """Canonical image -> global vector and local maps at 1/4 and 1/8 resolution.

    ``build`` returns ``(global (B, G), [local_16 (B, L1, C1), local_8 (B, L2, C2)])``
    with the local maps flattened to token sequences.
    """

    def __init__(self, rng, global_dim: int = 32, widths=(32, 48, 64)):
        super().__init__()
        w0, w1, w2 = widths
        self.local_dims = (w1, w2)
        self.global_dim = global_dim
        self.stem = tc.Conv2d(6, w0, rng)
        self.d1 = _Block(w0, w0, rng, stride=2)
        self.d2 = _Block(w0, w1, rng, stride=2)
        self.d3 = _Block(w1, w2, rng, stride=2)
        self.head = tc.Linear(w2, global_dim, rng)

    def build(self, x):
        b = x.shape[0]
        h = self.d1(self.stem(x).silu())
        l1 = self.d2(h)
        l2 = self.d3(l1)
        glob = self.head(l2.mean(axes=(1, 2)))
        tokens = [l1.reshape((b, -1, l1.shape[-1])), l2.reshape((b, -1, l2.shape[-1]))]
        return glob, tokens


@dataclass
class IdentityCode:
    global_vec: np.ndarray  # (G,)
    local: list  # [(L1, C1), (L2, C2)]


def encode_identity(canonical, encoder: IdentityEncoder) -> IdentityCode:
    c = np.asarray(canonical)
    if c.shape[-1] != 4:
        raise ValueError("canonical image must be RGBA")
    if not np.any(c[..., 3] > 0):
        raise ValueError("canonical image is fully transparent: no identity evidence")
    x = identity_input(c)
    g = tc.Graph("identity")
    node = g.input("x", x.shape)
    glob, tokens = encoder(node)
    g.forward({"x": x})
    return IdentityCode(g.value(glob)[0], [g.value(t)[0] for t in tokens])
