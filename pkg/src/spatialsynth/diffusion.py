"""Conditional latent video denoiser, noise schedule, loss and sampler.

Wiring of one denoiser evaluation::

    concat(C_so, x_t) -> 3x3x3 fusion conv -> + C_mo
      -> U-Net over (frames, h, w): residual blocks modulated by the time
         embedding plus the identity global vector, temporal convs after each
         block, cross-attention to the identity local maps at the two
         lowest resolutions
      -> predicted noise

C_mo comes from the pose encoder applied to the rasterized motion maps and
C_id from the identity encoder applied to the canonical image; both encoders
are trained with the denoiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .latentenc import IdentityEncoder, identity_input
from .motioncode import PoseEncoder


class ScheduleError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


# ----------------------------------------------------------------- schedule

@dataclass
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise ScheduleError("betas must lie in (0, 1)")
        self.betas = b
        self.alphas = 1.0 - b
        self.alpha_bar = np.cumprod(self.alphas)
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.alpha_bar_prev = prev
        self.posterior_var = b * (1.0 - prev) / (1.0 - self.alpha_bar)

    @classmethod
    def linear(cls, steps: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, steps))

    @property
    def num_steps(self) -> int:
        return self.betas.size

    def check_t(self, t):
        t = np.asarray(t)
        if not np.issubdtype(t.dtype, np.integer) or np.any(t < 0) or np.any(t >= self.num_steps):
            raise ScheduleError(f"timestep {t.tolist()} outside [0, {self.num_steps})")
        return t

    def describe(self) -> np.ndarray:
        return np.array([self.num_steps, self.betas[0], self.betas[-1]], dtype=np.float64)


def q_sample(x0, t, eps, schedule: NoiseSchedule | None = None, alpha_bar=None):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` is a step index (scalar or per-sample along axis 0).  Passing
    ``alpha_bar`` directly bypasses the schedule lookup.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    if alpha_bar is None:
        t = schedule.check_t(t)
        alpha_bar = schedule.alpha_bar[t]
    ab = np.asarray(alpha_bar, dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def noise_loss(eps_hat, eps) -> float:
    """Monte-Carlo noise-prediction loss: squared error summed per sample,
    averaged over the batch axis."""
    d = np.asarray(eps_hat, dtype=np.float64) - np.asarray(eps, dtype=np.float64)
    return float(np.mean(np.sum(d.reshape(d.shape[0], -1) ** 2, axis=1)))


def timestep_features(t, dim: int = 64) -> np.ndarray:
    """Sinusoidal embedding of integer steps, (B,) -> (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


# ----------------------------------------------------------------- network

@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    so_channels: int = 8
    code_dim: int = 8
    widths: tuple = (32, 48, 64)
    global_dim: int = 32
    temb_dim: int = 64
    cond_dim: int = 64
    frames: int = 8
    latent_size: int = 32
    canonical_size: int = 64
    seed: int = 0
    sigma_data: float = 1.0  # rms of the clean latents around the prior mean, sets the preconditioning
    scene_prior: bool = False  # use the scene block of C_so as the prior mean of the clean latent

    @property
    def motion_size(self) -> int:
        return self.latent_size * 4

    def descriptor(self) -> np.ndarray:
        return np.array([self.latent_channels, self.so_channels, self.code_dim, *self.widths, self.global_dim,
                         self.temb_dim, self.cond_dim, self.frames, self.latent_size, self.canonical_size,
                         self.sigma_data, float(self.scene_prior)], dtype=np.float64)

    @classmethod
    def from_descriptor(cls, d) -> "DenoiserConfig":
        sigma = float(d[12]) if len(d) > 12 else 1.0
        prior = len(d) > 13 and float(d[13]) > 0.5
        d = [int(round(float(x))) for x in d[:12]]
        return cls(d[0], d[1], d[2], tuple(d[3:6]), d[6], d[7], d[8], d[9], d[10], d[11], sigma_data=sigma,
                   scene_prior=prior)


def preconditioning(alpha_bar, sigma_data: float = 1.0):
    """Output scalings ``(c_skip, c_out)`` with ``eps_hat = c_skip y + c_out F``.

    ``y = x_t - sqrt(alpha_bar) mu`` is the noisy latent minus the scaled
    prior mean ``mu`` (zero without a prior).  ``c_skip y`` is the best linear
    estimate of the noise from ``y`` when the clean latent deviates from
    ``mu`` with rms ``sigma_data``, and ``c_out`` the std of what it leaves
    over, so the network output F has a unit-variance target at every step.
    The implied clean-latent estimate stays bounded as alpha_bar -> 0.
    """
    ab = np.asarray(alpha_bar, dtype=np.float64)
    var = ab * sigma_data ** 2 + (1.0 - ab)
    return np.sqrt(1.0 - ab) / var, np.sqrt(ab) * sigma_data / np.sqrt(var)


def step_feeds(t, alpha_bar, cfg: DenoiserConfig) -> dict:
    """Per-sample timestep inputs of the denoiser graph."""
    t = np.atleast_1d(t)
    ab = np.broadcast_to(alpha_bar, t.shape)
    c_skip, c_out = preconditioning(ab, cfg.sigma_data)
    col = (t.shape[0], 1, 1, 1, 1)
    return {"temb": timestep_features(t, cfg.temb_dim), "c_skip": c_skip.reshape(col), "c_out": c_out.reshape(col),
            "mu_scale": np.sqrt(ab).reshape(col)}


def _frames_op(fn, x):
    """Apply a per-frame 4-D op to a (B, T, H, W, C) node."""
    b, t = x.shape[:2]
    y = fn(x.reshape((b * t,) + x.shape[2:]))
    return y.reshape((b, t) + y.shape[1:])


class ResBlock(tc.Module):
    def __init__(self, c_in, c_out, cond_dim, rng):
        super().__init__()
        self.norm1 = tc.GroupNorm(c_in)
        self.conv1 = tc.Conv2d(c_in, c_out, rng)
        self.norm2 = tc.GroupNorm(c_out)
        self.mod = tc.Modulation(cond_dim, c_out, rng)
        self.conv2 = tc.Conv2d(c_out, c_out, rng, gain=0.3)
        self.skip = tc.Conv2d(c_in, c_out, rng, kernel=1) if c_in != c_out else None

    def build(self, x, cond):
        h = _frames_op(lambda v: self.conv1(self.norm1(v).silu()), x)
        h = self.mod(_frames_op(self.norm2, h), cond).silu()
        h = _frames_op(self.conv2, h)
        return h + (_frames_op(self.skip, x) if self.skip is not None else x)


class AttnBlock(tc.Module):
    def __init__(self, dim, ctx_dim, rng):
        super().__init__()
        self.attn = tc.CrossAttention(dim, ctx_dim, rng)

    def build(self, x, ctx):
        b = x.shape[0]
        tokens = x.reshape((b, -1, x.shape[-1]))
        return x + self.attn(tokens, ctx).reshape(x.shape)


class Denoiser(tc.Module):
    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w0, w1, w2 = cfg.widths
        cd = cfg.cond_dim
        self.pose_encoder = PoseEncoder(cfg.code_dim, w0, rng)
        self.identity = IdentityEncoder(rng, cfg.global_dim, cfg.widths)
        self.t1 = tc.Linear(cfg.temb_dim, 2 * cd, rng)
        self.t2 = tc.Linear(2 * cd, cd, rng)
        self.id_proj = tc.Linear(cfg.global_dim, cd, rng)
        self.fusion = tc.Conv3d(cfg.so_channels + cfg.latent_channels, w0, rng)
        self.r0 = ResBlock(w0, w0, cd, rng)
        self.tm0 = tc.TemporalConv(w0, rng)
        self.down0 = tc.Conv2d(w0, w1, rng, stride=2)
        self.r1 = ResBlock(w1, w1, cd, rng)
        self.a1 = AttnBlock(w1, w1, rng)
        self.tm1 = tc.TemporalConv(w1, rng)
        self.down1 = tc.Conv2d(w1, w2, rng, stride=2)
        self.r2 = ResBlock(w2, w2, cd, rng)
        self.a2 = AttnBlock(w2, w2, rng)
        self.tm2 = tc.TemporalConv(w2, rng)
        self.r2b = ResBlock(w2, w2, cd, rng)
        self.u1 = ResBlock(w2 + w1, w1, cd, rng)
        self.ua1 = AttnBlock(w1, w1, rng)
        self.utm1 = tc.TemporalConv(w1, rng)
        self.u0 = ResBlock(w1 + w0, w0, cd, rng)
        self.utm0 = tc.TemporalConv(w0, rng)
        self.out_norm = tc.GroupNorm(w0)
        self.out = tc.Conv2d(w0, cfg.latent_channels, rng, gain=0.1)
        self._graphs = {}

    def declare_inputs(self, g: tc.Graph, batch: int):
        c = self.cfg
        lat = (batch, c.frames, c.latent_size, c.latent_size)
        return {
            "x_t": g.input("x_t", lat + (c.latent_channels,)),
            "c_so": g.input("c_so", lat + (c.so_channels,)),
            "motion": g.input("motion", (batch, c.frames, c.motion_size, c.motion_size, c.code_dim)),
            "canonical": g.input("canonical", (batch, c.canonical_size, c.canonical_size, 6)),
            "temb": g.input("temb", (batch, c.temb_dim)),
            "c_skip": g.input("c_skip", (batch, 1, 1, 1, 1)),
            "c_out": g.input("c_out", (batch, 1, 1, 1, 1)),
            "mu_scale": g.input("mu_scale", (batch, 1, 1, 1, 1)),
        }

    def build(self, x_t, c_so, motion, canonical, temb, c_skip, c_out, mu_scale):
        c_mo = self.pose_encoder(motion)
        id_global, id_local = self.identity(canonical)
        cond = (self.t2(self.t1(temb).silu()) + self.id_proj(id_global)).silu()
        h = self.fusion(tc.concat([c_so, x_t], axis=-1)) + c_mo
        h = self.tm0(self.r0(h, cond))
        s0 = h
        h = _frames_op(self.down0, h)
        h = self.tm1(self.a1(self.r1(h, cond), id_local[0]))
        s1 = h
        h = _frames_op(self.down1, h)
        h = self.tm2(self.a2(self.r2(h, cond), id_local[1]))
        h = self.r2b(h, cond)
        h = _frames_op(tc.upsample2x, h)
        h = self.utm1(self.ua1(self.u1(tc.concat([h, s1], axis=-1), cond), id_local[0]))
        h = _frames_op(tc.upsample2x, h)
        h = self.utm0(self.u0(tc.concat([h, s0], axis=-1), cond))
        f = _frames_op(lambda v: self.out(self.out_norm(v).silu()), h)
        y = x_t - c_so.slice(-1, 0, self.cfg.latent_channels) * mu_scale if self.cfg.scene_prior else x_t
        return y * c_skip + f * c_out

    def graph(self, batch: int, dtype=np.float32):
        key = (batch, np.dtype(dtype).str)
        if key not in self._graphs:
            g = tc.Graph("denoiser", dtype=dtype)
            self.build(**self.declare_inputs(g, batch))
            self._graphs[key] = g
        return self._graphs[key]


# ------------------------------------------------------------------ bundle

@dataclass
class LatentBundle:
    """Conditioning for one clip.

    ``canonical`` is the RGBA canonical image the identity code is computed
    from, ``motion`` the (T, H, W, D) rasterized motion maps the motion code
    is computed from, and ``c_so`` the (T, h, w, 8) scene/occlusion code.
    """

    canonical: np.ndarray
    motion: np.ndarray
    c_so: np.ndarray
    clip_id: str = ""

    def check(self, cfg: DenoiserConfig) -> None:
        n, s = cfg.frames, cfg.latent_size
        want = {
            "C_so": (self.c_so.shape, (n, s, s, cfg.so_channels)),
            "C_mo": (self.motion.shape, (n, cfg.motion_size, cfg.motion_size, cfg.code_dim)),
            "C_id": (self.canonical.shape, (cfg.canonical_size, cfg.canonical_size, 4)),
        }
        for name, (got, exp) in want.items():
            if tuple(got) != exp:
                raise ValueError(f"bundle code {name} has shape {tuple(got)}, denoiser expects {exp}")


def _stack_inputs(bundles: list[LatentBundle], cfg: DenoiserConfig):
    for b in bundles:
        b.check(cfg)
    return {
        "c_so": np.stack([b.c_so for b in bundles]).astype(np.float32),
        "motion": np.stack([b.motion for b in bundles]).astype(np.float32),
        "canonical": identity_input(np.stack([b.canonical for b in bundles])),
    }


def denoise(x_t, t, bundles, model: Denoiser, schedule: NoiseSchedule | None = None,
            dtype=np.float32) -> np.ndarray:
    """Predicted noise for a batch of latents ``x_t`` (B, T, h, w, C) at step ``t``
    of ``schedule`` (default: the linear training schedule)."""
    if isinstance(bundles, LatentBundle):
        bundles = [bundles]
    x_t = np.asarray(x_t)
    if x_t.ndim == 4:
        x_t = x_t[None]
    cfg = model.cfg
    exp = (len(bundles), cfg.frames, cfg.latent_size, cfg.latent_size, cfg.latent_channels)
    if x_t.shape != exp:
        raise ValueError(f"latent x_t has shape {x_t.shape}, expected {exp}")
    schedule = schedule or NoiseSchedule.linear()
    t = schedule.check_t(np.broadcast_to(t, (len(bundles),)))
    feeds = _stack_inputs(bundles, cfg)
    feeds["x_t"] = x_t
    feeds.update(step_feeds(t, schedule.alpha_bar[t], cfg))
    return model.graph(len(bundles), dtype).forward(feeds, keep=False)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 4
    lr: float = 1e-3
    lr_final: float = 5e-5
    warmup: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    schedule_steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    ema: float = 0.0  # decay of the weight average kept alongside training; 0 disables

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.schedule_steps, self.beta_start, self.beta_end)


class Trainer:
    """Owns the training graph, the optimizer and the sampling streams."""

    def __init__(self, model: Denoiser, cfg: TrainConfig, schedule: NoiseSchedule | None = None):
        self.model = model
        self.cfg = cfg
        self.schedule = schedule or cfg.schedule()
        self.rng = np.random.default_rng(cfg.seed)
        g = tc.Graph("denoiser_train")
        inputs = model.declare_inputs(g, cfg.batch)
        eps_hat = model.build(**inputs)
        self.eps = g.input("eps", eps_hat.shape)
        self.loss = (eps_hat - self.eps).square().mean()
        self.per_sample = math.prod(eps_hat.shape[1:])
        self.graph = g
        self.opt = tc.Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
        self.ema = {k: t.data.astype(np.float64) for k, t in self.opt.params.items()} if cfg.ema > 0 else None

    def ema_state(self) -> dict:
        """Averaged weights (the live weights when averaging is off)."""
        if self.ema is None:
            return self.model.state_dict()
        return {k: v.astype(self.opt.params[k].dtype) for k, v in self.ema.items()}

    def lr_at(self, step: int) -> float:
        c = self.cfg
        if step < c.warmup:
            return c.lr * (step + 1) / c.warmup
        frac = (step - c.warmup) / max(c.steps - c.warmup, 1)
        return c.lr_final + 0.5 * (c.lr - c.lr_final) * (1 + math.cos(math.pi * min(frac, 1.0)))

    def training_step(self, x0, bundles: list[LatentBundle], t=None, eps=None) -> float:
        """One Adam update on a batch; returns the noise-prediction loss
        (summed over elements, averaged over the batch)."""
        b = self.cfg.batch
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape[0] != b or len(bundles) != b:
            raise ValueError(f"batch of {x0.shape[0]} latents / {len(bundles)} bundles, trainer expects {b}")
        if t is None:
            t = self.rng.integers(0, self.schedule.num_steps, b)
        if eps is None:
            eps = self.rng.standard_normal(x0.shape)
        x_t = q_sample(x0, t, eps, self.schedule)
        feeds = _stack_inputs(bundles, self.model.cfg)
        feeds.update(x_t=x_t, eps=eps, **step_feeds(t, self.schedule.alpha_bar[t], self.model.cfg))
        self.graph.forward(feeds)
        value = float(self.graph.value(self.loss)) * self.per_sample
        if not math.isfinite(value):
            ids = [bd.clip_id for bd in bundles]
            raise TrainingDivergence(f"non-finite loss at step {self.opt.step_count}: t={list(map(int, t))}, clips={ids}")
        self.graph.backward(self.loss)
        self.opt.lr = self.lr_at(self.opt.step_count)
        self.opt.step()
        if self.ema is not None:
            d = self.cfg.ema
            for k, t in self.opt.params.items():
                self.ema[k] *= d
                self.ema[k] += (1.0 - d) * t.data
        return value


# ---------------------------------------------------------------- sampling

def sample_latents(bundles, model: Denoiser, schedule: NoiseSchedule, seed: int,
                   clip_x0: float | None = 10.0, noise=None) -> np.ndarray:
    """Ancestral reverse process from pure noise; returns (B, T, h, w, C) latents.

    The predicted clean latent is clamped to ``[-clip_x0, clip_x0]`` before
    forming the posterior mean (``None`` disables the clamp).
    """
    if isinstance(bundles, LatentBundle):
        bundles = [bundles]
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    shape = (len(bundles), cfg.frames, cfg.latent_size, cfg.latent_size, cfg.latent_channels)
    x = rng.standard_normal(shape) if noise is None else np.asarray(noise, dtype=np.float64)
    feeds = _stack_inputs(bundles, cfg)
    g = model.graph(len(bundles))
    s = schedule
    for t in range(s.num_steps - 1, -1, -1):
        feeds["x_t"] = x
        feeds.update(step_feeds(np.full(len(bundles), t), s.alpha_bar[t], cfg))
        eps = g.forward(feeds, keep=False).astype(np.float64)
        ab = s.alpha_bar[t]
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if clip_x0 is not None:
            x0 = np.clip(x0, -clip_x0, clip_x0)
        c0 = math.sqrt(s.alpha_bar_prev[t]) * s.betas[t] / (1.0 - ab)
        ct = math.sqrt(s.alphas[t]) * (1.0 - s.alpha_bar_prev[t]) / (1.0 - ab)
        mean = c0 * x0 + ct * x
        z = rng.standard_normal(shape)
        x = mean + (math.sqrt(s.posterior_var[t]) * z if t > 0 else 0.0)
    return x


def sample(bundles, model: Denoiser, schedule: NoiseSchedule, seed: int, vae=None, **kw):
    """Sample latents and, when ``vae`` is given, decode them to frames
    (B, T, H, W, 3) clipped to [0, 1]."""
    if model_schedule(model) is not None and not np.allclose(model_schedule(model), schedule.describe()):
        raise ScheduleError(f"denoiser was trained with schedule {model_schedule(model).tolist()}, "
                            f"got {schedule.describe().tolist()}")
    lat = sample_latents(bundles, model, schedule, seed, **kw)
    if vae is None:
        return lat
    b, t = lat.shape[:2]
    frames = vae.decode(lat.reshape((b * t,) + lat.shape[2:]))
    return np.clip(frames, 0.0, 1.0).reshape((b, t) + frames.shape[1:])


def model_schedule(model: Denoiser):
    return getattr(model, "trained_schedule", None)


# ------------------------------------------------------------- checkpoint

def save_state(path, model: Denoiser, schedule: NoiseSchedule, trainer: Trainer | None = None) -> None:
    """Write the weights (averaged ones when the trainer keeps an average)."""
    weights = trainer.ema_state() if trainer is not None else model.state_dict()
    state = {f"model.{k}": v for k, v in weights.items()}
    state["meta.arch"] = model.cfg.descriptor()
    state["meta.schedule"] = schedule.describe()
    if trainer is not None:
        state["meta.step"] = np.array([trainer.opt.step_count], dtype=np.float64)
    tc.save_checkpoint(path, state)


def load_state(path) -> tuple[Denoiser, NoiseSchedule]:
    state = tc.load_checkpoint(path)
    cfg = DenoiserConfig.from_descriptor(state["meta.arch"])
    model = Denoiser(cfg)
    model.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
    steps, b0, b1 = state["meta.schedule"]
    schedule = NoiseSchedule.linear(int(round(float(steps))), float(b0), float(b1))
    model.trained_schedule = schedule.describe()
    return model, schedule
