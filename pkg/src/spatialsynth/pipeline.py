"""Stage orchestration over a run directory.

Layout under the run directory (one subdirectory per stage)::

    data/      scenegen corpus and manifest.txt            (gen-data)
    decomp/    layer masklets, occlusion layer, recovered scene  (decompose)
    motion/    motion maps and canonical images             (render-motion)
    vae/       frozen VAE checkpoint and its report         (pretrain-vae)
    codes/     frame latents and scene/occlusion codes      (encode)
    model/     denoiser checkpoint and training log         (train)
    samples/   synthesized frames for held-out clips        (synthesize)
    eval/      report.txt and report.json                   (evaluate)
    swap/      recombined clips                             (swap)

Each stage writes ``provenance.json`` (seed, config fingerprint) and holds
``.lock`` while running.  Wall-clock numbers only go to ``timing.txt``.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bodymodel as bm
from . import decompose as dc
from . import diffusion as df
from . import scenegen as sg
from . import tensorcore as tc
from .config import JobConfig
from .latentenc import Vae, VaeConfig, encode_scene_occlusion, pretrain_vae
from .media import load_frames, save_frames
from .metrics import masked_ssim, mean_abs_in, psnr, ssim
from .motioncode import VertexCodes, load_motion_map, load_planar, render_motion, save_motion_map, save_planar

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


def derive_seed(master: int, name: str) -> int:
    """Independent stream seed for a named consumer of the master seed."""
    return int(np.random.SeedSequence([master, zlib.crc32(name.encode())]).generate_state(1)[0])


@contextmanager
def stage_dir(path, cfg: JobConfig, stage: str):
    """Create and exclusively hold a stage output directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(f"{path} is locked by another command (remove {lock} if stale)") from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    start = time.perf_counter()
    try:
        yield path
        prov = {"stage": stage, "seed": cfg.seed, "config_fingerprint": cfg.fingerprint(),
                "config_source": Path(cfg.source).name}
        (path / "provenance.json").write_text(json.dumps(prov, indent=1, sort_keys=True) + "\n")
        (path / "timing.txt").write_text(f"{stage} {time.perf_counter() - start:.3f} s\n")
    finally:
        lock.unlink(missing_ok=True)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, *zip(*items)))


def _manifest(run):
    path = Path(run) / "data" / "manifest.txt"
    if not path.is_file():
        raise PipelineError(f"no corpus at {path.parent}; run gen-data first")
    return sg.read_manifest(path)


def _split(run, split: str) -> list[str]:
    return [e.name for e in _manifest(run)[1] if e.split == split]


def _require(path, stage: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"missing {path}; run {stage} first")
    return path


# ---------------------------------------------------------------- gen-data

def gen_data(cfg: JobConfig, run) -> list[sg.ManifestEntry]:
    if cfg["data.width"] != cfg["data.height"] or cfg["data.width"] % 4:
        raise PipelineError("frames must be square with extents divisible by 4")
    with stage_dir(Path(run) / "data", cfg, "gen-data") as out:
        return sg.generate_corpus(cfg["data.count"], out, cfg.seed, cfg["data.width"], cfg["data.height"],
                                  cfg["data.frames"], cfg["data.holdout"])


# --------------------------------------------------------------- decompose

def decompose_one(clip_dir, out_dir) -> dict:
    res = dc.decompose_clip(dc.FileProvider().load(clip_dir))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    human, occl, scene = res.layers.masklets()
    dc.save_masklet(out / "human.bin", human)
    dc.save_masklet(out / "occlusion.bin", occl)
    dc.save_masklet(out / "scene.bin", scene)
    save_frames(out / "occlusion_layer", res.components[1])
    save_frames(out / "recovered", res.recovered)
    return {"tracks": len(res.layers.tracks), "roles": {str(k): v for k, v in sorted(res.layers.roles.items())}}


def decompose(cfg: JobConfig, run, names=None) -> None:
    run = Path(run)
    names = names or [e.name for e in _manifest(run)[1]]
    with stage_dir(run / "decomp", cfg, "decompose") as out:
        items = [(run / "data" / n, out / n) for n in names]
        stats = _map(decompose_one, items, cfg.workers)
        lines = [f"{n} tracks={s['tracks']} roles={json.dumps(s['roles'], sort_keys=True)}" for n, s in zip(names, stats)]
        (out / "summary.txt").write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------ render-motion

def clip_rig(clip_dir) -> bm.BodyRig:
    spec = sg.read_meta(clip_dir)["spec"]
    return bm.default_rig().with_shape(spec["shape_scale"])


def vertex_codes(cfg: JobConfig) -> VertexCodes:
    return VertexCodes.random(bm.default_rig().num_vertices, cfg["motion.code_dim"], cfg["motion.code_seed"])


def human_inputs_one(clip_dir, decomp_dir, out_dir, codes: VertexCodes) -> None:
    """Motion maps from the clip's fitted poses/cameras, and the canonical
    appearance image transferred from the visible character pixels."""
    clip_dir, out = Path(clip_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rig = clip_rig(clip_dir)
    poses = bm.load_poses(clip_dir / "poses.txt")
    cams = bm.load_cameras(clip_dir / "cameras.txt")
    save_motion_map(out / "motion.bin", render_motion(rig, poses, cams, codes))
    frames = load_frames(clip_dir / "frames").astype(np.float64) / 255.0
    human = dc.load_masklet(Path(decomp_dir) / "human.bin").mask
    canon = bm.canonicalize_clip(rig, poses, frames, cams, human)
    save_frames(out, canon[None], prefix="canonical")


def render_motion_stage(cfg: JobConfig, run, names=None) -> None:
    run = Path(run)
    names = names or [e.name for e in _manifest(run)[1]]
    codes = vertex_codes(cfg)
    with stage_dir(run / "motion", cfg, "render-motion") as out:
        items = [(run / "data" / n, _require(run / "decomp" / n, "decompose"), out / n, codes) for n in names]
        _map(human_inputs_one, items, cfg.workers)


# ------------------------------------------------------------- pretrain-vae

def _vae_images(run, names):
    imgs = []
    for n in names:
        imgs.append(load_frames(run / "data" / n / "frames"))
        imgs.append(load_frames(run / "decomp" / n / "recovered"))
        imgs.append(load_frames(run / "decomp" / n / "occlusion_layer"))
    return np.concatenate(imgs)


def vae_report(vae: Vae, held: np.ndarray) -> dict:
    x = held.astype(np.float32) / 255.0
    rec = np.clip(vae.decode(vae.encode(x)), 0.0, 1.0)
    zero = vae.decode(vae.encode(np.zeros((1,) + x.shape[1:], np.float32)))
    return {"heldout_psnr": psnr(rec, x), "zero_mean_abs": float(np.mean(np.abs(zero))),
            "latent_scale": vae.latent_scale, "checksum": vae.checksum()}


def pretrain_vae_stage(cfg: JobConfig, run) -> dict:
    run = Path(run)
    train = _split(run, "train")
    held = _split(run, "heldout")
    images = _vae_images(run, train)
    # the diffusion targets are clip frames; layer images (mostly black
    # occluder layers) would skew the latent scale
    frames = np.concatenate([load_frames(run / "data" / n / "frames") for n in train])
    vcfg = VaeConfig(cfg["vae.steps"], cfg["vae.batch"], cfg["vae.crop"], cfg["vae.lr"], cfg["vae.lr_final"],
                     cfg["vae.kl_weight"], derive_seed(cfg.seed, "vae"), cfg["vae.width"])
    with stage_dir(run / "vae", cfg, "pretrain-vae") as out:
        lines = []

        def progress(step, loss, mse):
            lines.append(f"{step} {loss:.6e} {mse:.6e}")
            log.info("vae step %d loss %.5f", step, loss)

        vae = pretrain_vae(images, vcfg, progress, scale_images=frames)
        vae.save(out / "vae.ckpt")
        (out / "train_log.txt").write_text("step loss mse\n" + "\n".join(lines) + "\n")
        rep = vae_report(vae, np.concatenate([load_frames(run / "data" / n / "frames") for n in held]))
        rep["min_psnr"] = cfg["vae.min_psnr"]
        rep["max_zero_error"] = cfg["vae.max_zero_error"]
        rep["passed"] = rep["heldout_psnr"] >= cfg["vae.min_psnr"] and rep["zero_mean_abs"] < cfg["vae.max_zero_error"]
        (out / "report.json").write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
        if not rep["passed"]:
            log.warning("VAE below its quality thresholds: %s", rep)
        return rep


def load_vae(run) -> Vae:
    return Vae.load(_require(Path(run) / "vae" / "vae.ckpt", "pretrain-vae"))


# ------------------------------------------------------------------ encode

def encode_one(clip_dir, decomp_dir, out_dir, vae: Vae) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = load_frames(Path(clip_dir) / "frames").astype(np.float32) / 255.0
    save_planar(out / "latents.bin", vae.encode(frames), kind="latent")
    so = encode_scene_occlusion(load_frames(Path(decomp_dir) / "recovered"),
                                load_frames(Path(decomp_dir) / "occlusion_layer"), vae)
    save_planar(out / "c_so.bin", so.combined, kind="c_so")


def encode_stage(cfg: JobConfig, run, names=None, vae: Vae | None = None) -> None:
    run = Path(run)
    names = names or [e.name for e in _manifest(run)[1]]
    vae = vae or load_vae(run)
    with stage_dir(run / "codes", cfg, "encode") as out:
        items = [(run / "data" / n, _require(run / "decomp" / n, "decompose"), out / n, vae) for n in names]
        _map(encode_one, items, cfg.workers)


def load_bundle(run, name: str) -> df.LatentBundle:
    run = Path(run)
    canon = load_frames(_require(run / "motion" / name, "render-motion"), prefix="canonical")[0]
    motion = load_motion_map(run / "motion" / name / "motion.bin").features
    kind, c_so, _ = load_planar(_require(run / "codes" / name / "c_so.bin", "encode"))
    return df.LatentBundle(canon.astype(np.float32) / 255.0, motion, c_so, name)


def load_latents(run, name: str) -> np.ndarray:
    return load_planar(_require(Path(run) / "codes" / name / "latents.bin", "encode"))[1]


# ------------------------------------------------------------------- train

def denoiser_config(cfg: JobConfig, sigma_data: float = 1.0) -> df.DenoiserConfig:
    return df.DenoiserConfig(code_dim=cfg["motion.code_dim"], frames=cfg["data.frames"],
                             latent_size=cfg["data.width"] // 4, seed=derive_seed(cfg.seed, "denoiser"),
                             sigma_data=sigma_data, scene_prior=cfg["train.scene_prior"])


def latent_rms(latents, means=None) -> float:
    """Root mean square of clip latents (minus ``means`` when given), rounded
    to float32 since it is stored in checkpoints."""
    means = means if means is not None else [0.0] * len(latents)
    sq = sum(float(np.sum(np.square(x - m, dtype=np.float64))) for x, m in zip(latents, means))
    return float(np.float32(math.sqrt(sq / sum(x.size for x in latents))))


def train_config(cfg: JobConfig) -> df.TrainConfig:
    return df.TrainConfig(cfg["train.steps"], cfg["train.batch"], cfg["train.lr"], cfg["train.lr_final"],
                          cfg["train.warmup"], cfg["train.clip_norm"], derive_seed(cfg.seed, "train"),
                          cfg["schedule.steps"], cfg["schedule.beta_start"], cfg["schedule.beta_end"],
                          cfg["train.ema"])


def _save_train_state(path, trainer: df.Trainer):
    state = {f"w.{k}": t.data for k, t in trainer.opt.params.items()}
    state.update({f"m.{k}": v for k, v in trainer.opt.m.items()})
    state.update({f"v.{k}": v for k, v in trainer.opt.v.items()})
    if trainer.ema is not None:
        state.update({f"e.{k}": v for k, v in trainer.ema.items()})
    state["step"] = np.array([trainer.opt.step_count], dtype=np.float64)
    tc.save_checkpoint(path, state)


def _load_train_state(path, trainer: df.Trainer) -> int:
    state = tc.load_checkpoint(path)
    for k, t in trainer.opt.params.items():
        t.data = state[f"w.{k}"].astype(t.dtype)
        trainer.opt.m[k] = state[f"m.{k}"].astype(np.float64)
        trainer.opt.v[k] = state[f"v.{k}"].astype(np.float64)
        if trainer.ema is not None:
            trainer.ema[k] = state[f"e.{k}"].astype(np.float64)
    trainer.opt.step_count = int(state["step"][0])
    return trainer.opt.step_count


def train_stage(cfg: JobConfig, run, progress=None) -> Path:
    """Train the denoiser on the corpus' training split.

    Batches, timesteps and noise for step ``k`` come from a generator seeded
    by ``(train seed, k)``, so an interrupted run resumes from
    ``train_state.ckpt`` onto the same trajectory.
    """
    run = Path(run)
    names = _split(run, "train")
    vae = load_vae(run)
    bundles = [load_bundle(run, n) for n in names]
    x0 = [load_latents(run, n) for n in names]
    scene = [bd.c_so[..., : x.shape[-1]] for bd, x in zip(bundles, x0)] if cfg["train.scene_prior"] else None
    model = df.Denoiser(denoiser_config(cfg, latent_rms(x0, scene)))
    tcfg = train_config(cfg)
    trainer = df.Trainer(model, tcfg)
    checksum = vae.checksum()
    with stage_dir(run / "model", cfg, "train") as out:
        state_path = out / "train_state.ckpt"
        log_path = out / "train_log.txt"
        start = 0
        lines = ["step loss lr"]
        if state_path.is_file():
            start = _load_train_state(state_path, trainer)
            lines = log_path.read_text().splitlines()[: start // cfg["train.log_every"] + 2]
            lines = [ln for ln in lines if ln.startswith("step") or int(ln.split()[0]) < start]
            log.info("resuming training at step %d", start)
        window = []
        for step in range(start, tcfg.steps):
            rng = np.random.default_rng([tcfg.seed, step])
            pick = rng.integers(0, len(names), tcfg.batch)
            t = rng.integers(0, trainer.schedule.num_steps, tcfg.batch)
            batch = np.stack([x0[i] for i in pick])
            eps = rng.standard_normal(batch.shape)
            loss = trainer.training_step(batch, [bundles[i] for i in pick], t=t, eps=eps)
            window.append(loss)
            if step % cfg["train.log_every"] == 0 or step == tcfg.steps - 1:
                lines.append(f"{step} {np.mean(window):.6e} {trainer.opt.lr:.6e}")
                window = []
                if progress is not None:
                    progress(step, loss)
                log.info("train step %d loss %.2f", step, loss)
            if (step + 1) % cfg["train.checkpoint_every"] == 0 and step + 1 < tcfg.steps:
                _save_train_state(state_path, trainer)
                log_path.write_text("\n".join(lines) + "\n")
        log_path.write_text("\n".join(lines) + "\n")
        df.save_state(out / "denoiser.ckpt", model, trainer.schedule, trainer)
        state_path.unlink(missing_ok=True)
        if vae.checksum() != checksum:
            raise PipelineError("VAE weights changed during denoiser training")
    return out / "denoiser.ckpt"


def load_model(run) -> tuple[df.Denoiser, df.NoiseSchedule]:
    return df.load_state(_require(Path(run) / "model" / "denoiser.ckpt", "train"))


# -------------------------------------------------------------- synthesize

def clip_seed(cfg: JobConfig, name: str) -> int:
    return derive_seed(cfg["sample.seed"], name)


def synthesize_clip(bundle: df.LatentBundle, model, schedule, vae, seed: int, clip_x0: float) -> np.ndarray:
    return df.sample(bundle, model, schedule, seed, vae=vae, clip_x0=clip_x0)[0]


def eval_names(cfg: JobConfig, run) -> list[str]:
    return _split(run, "heldout")[: cfg["eval.clips"]]


def synthesize_stage(cfg: JobConfig, run, names=None) -> None:
    run = Path(run)
    names = names or eval_names(cfg, run)
    vae = load_vae(run)
    model, schedule = load_model(run)
    with stage_dir(run / "samples", cfg, "synthesize") as out:
        for n in names:
            frames = synthesize_clip(load_bundle(run, n), model, schedule, vae, clip_seed(cfg, n),
                                     cfg["sample.clip_x0"])
            save_frames(out / n, frames)
            log.info("synthesized %s", n)


# ---------------------------------------------------------------- evaluate

REPORT_COLUMNS = ("psnr", "ssim", "baseline_psnr", "baseline_ssim", "gain_db")


@dataclass
class EvalReport:
    rows: dict = field(default_factory=dict)  # clip -> {column: value}
    probes: dict = field(default_factory=dict)  # probe name -> value
    seed: int = 0
    fingerprint: str = ""

    def aggregates(self) -> dict:
        if not self.rows:
            return {c: math.nan for c in REPORT_COLUMNS}
        return {c: float(np.mean([r[c] for r in self.rows.values()])) for c in REPORT_COLUMNS}

    def to_text(self) -> str:
        lines = ["# spatialsynth-eval 1", f"# seed={self.seed} fingerprint={self.fingerprint}",
                 "clip " + " ".join(REPORT_COLUMNS)]
        for name, r in sorted(self.rows.items()):
            lines.append(name + " " + " ".join(f"{r[c]:.6f}" for c in REPORT_COLUMNS))
        agg = self.aggregates()
        lines.append("mean " + " ".join(f"{agg[c]:.6f}" for c in REPORT_COLUMNS))
        lines += [f"probe {k} {v:.6f}" for k, v in sorted(self.probes.items())]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "fingerprint": self.fingerprint, "rows": self.rows,
                           "aggregates": self.aggregates(), "probes": self.probes}, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["rows"], d["probes"], d["seed"], d["fingerprint"])


def _float(frames):
    return np.asarray(frames, dtype=np.float64) / 255.0


def reconstruction_row(source, synth, baseline) -> dict:
    p, b = psnr(synth, source), psnr(baseline, source)
    return {"psnr": p, "ssim": ssim(synth, source), "baseline_psnr": b,
            "baseline_ssim": ssim(baseline, source), "gain_db": p - b}


def occlusion_fidelity(synth, source, human_layer, occluder_over_human) -> tuple[int, int]:
    """Count pixels (of ``occluder_over_human``) whose synthesized color is
    nearer the occluder's color than the character's; returns (closer, total)."""
    m = np.asarray(occluder_over_human, dtype=bool)
    if not m.any():
        return 0, 0
    d_occ = np.linalg.norm(synth[m] - source[m], axis=-1)
    d_hum = np.linalg.norm(synth[m] - human_layer[m], axis=-1)
    return int(np.sum(d_occ < d_hum)), int(m.sum())


def evaluate_stage(cfg: JobConfig, run, names=None, probes: bool = True) -> EvalReport:
    run = Path(run)
    names = names or eval_names(cfg, run)
    with stage_dir(run / "eval", cfg, "evaluate") as out:
        rep = EvalReport(seed=cfg.seed, fingerprint=cfg.fingerprint())
        closer = total = 0
        for n in names:
            src = _float(load_frames(run / "data" / n / "frames"))
            syn = _float(load_frames(_require(run / "samples" / n, "synthesize")))
            base = _float(load_frames(run / "decomp" / n / "recovered"))
            rep.rows[n] = reconstruction_row(src, syn, base)
            occ = dc.load_masklet(run / "data" / n / "gt_occlusion.bin").mask
            amodal = dc.load_masklet(run / "data" / n / "human_amodal.bin").mask
            c, t = occlusion_fidelity(syn, src, _float(load_frames(run / "data" / n / "human_layer")), occ & amodal)
            closer += c
            total += t
        if total:
            rep.probes["occlusion_fidelity"] = closer / total
        if probes:
            rep.probes.update(swap_probes(cfg, run, names))
        (out / "report.txt").write_text(rep.to_text())
        (out / "report.json").write_text(rep.to_json())
    return rep


# -------------------------------------------------------------------- swap

WORKFLOWS = ("identity", "motion", "scene")


def recombine(workflow: str, target: df.LatentBundle, donor: df.LatentBundle) -> df.LatentBundle:
    """Replace one code of ``target`` with the donor's."""
    if workflow not in WORKFLOWS:
        raise PipelineError(f"unknown swap workflow {workflow!r}; expected one of {WORKFLOWS}")
    for code, a, b in (("C_id", target.canonical, donor.canonical), ("C_mo", target.motion, donor.motion),
                       ("C_so", target.c_so, donor.c_so)):
        if a.shape != b.shape:
            raise PipelineError(f"incompatible {code} grids between sources: {a.shape} vs {b.shape}")
    out = df.LatentBundle(target.canonical, target.motion, target.c_so, target.clip_id)
    if workflow == "identity":
        out.canonical = donor.canonical
    elif workflow == "motion":
        out.motion = donor.motion
    else:
        out.c_so = donor.c_so
    out.clip_id = f"{target.clip_id}<{workflow}:{donor.clip_id}"
    return out


@dataclass
class SwapResult:
    frames: np.ndarray
    reference: np.ndarray  # no-swap output at the same seed
    stats: dict


def run_swap(workflow: str, target: df.LatentBundle, donor: df.LatentBundle, model, schedule, vae,
             seed: int, human_mask, background_mask, clip_x0: float = 10.0,
             reference: np.ndarray | None = None, donor_scene=None, target_scene=None) -> SwapResult:
    """Sample the recombined bundle and report region-wise changes.

    ``human_mask``/``background_mask`` are the target's ground-truth
    masklets.  ``reference`` (the no-swap output at ``seed``) is sampled when
    not given.  For scene swaps, passing the donor's and target's recovered
    scenes adds background SSIM against both.
    """
    bundle = recombine(workflow, target, donor)
    if reference is None:
        reference = synthesize_clip(target, model, schedule, vae, seed, clip_x0)
    frames = synthesize_clip(bundle, model, schedule, vae, seed, clip_x0)
    hum = np.asarray(human_mask, dtype=bool)
    bg = np.asarray(background_mask, dtype=bool)
    stats = {"human_change": mean_abs_in(frames, reference, hum),
             "background_change": mean_abs_in(frames, reference, bg),
             "human_ssim": masked_ssim(frames, reference, hum),
             "psnr_vs_reference": psnr(frames, reference)}
    stats["change_ratio"] = stats["human_change"] / max(stats["background_change"], 1e-12)
    if donor_scene is not None and target_scene is not None:
        stats["background_ssim_new"] = masked_ssim(frames, donor_scene, bg)
        stats["background_ssim_old"] = masked_ssim(frames, target_scene, bg)
    return SwapResult(frames, reference, stats)


def _no_occluders(run, name) -> bool:
    roles = sg.read_meta(Path(run) / "data" / name)["roles"]
    return "occlusion" not in roles.values()


def swap_probes(cfg: JobConfig, run, names) -> dict:
    """Identity and scene swaps over held-out pairs, against the stored
    no-swap samples.  Scene donors are occluder-free clips so the swap
    replaces the background only."""
    run = Path(run)
    vae = load_vae(run)
    model, schedule = load_model(run)
    pairs = min(cfg["swap.pairs"], len(names))
    donors = [n for n in _split(run, "train") if _no_occluders(run, n)]
    ratios, ssims = [], []
    for k in range(pairs):
        tgt, idn = names[k], names[(k + 1) % len(names)]
        bundle = load_bundle(run, tgt)
        ref = _float(load_frames(run / "samples" / tgt))
        hum = dc.load_masklet(run / "decomp" / tgt / "human.bin").mask
        bg = dc.load_masklet(run / "decomp" / tgt / "scene.bin").mask
        seed = clip_seed(cfg, tgt)
        res = run_swap("identity", bundle, load_bundle(run, idn), model, schedule, vae, seed, hum, bg,
                       cfg["sample.clip_x0"], ref)
        ratios.append(res.stats["change_ratio"])
        if donors:
            res = run_swap("scene", bundle, load_bundle(run, donors[k % len(donors)]), model, schedule, vae,
                           seed, hum, bg, cfg["sample.clip_x0"], ref)
            ssims.append(res.stats["human_ssim"])
        log.info("swap probes on %s done", tgt)
    out = {}
    if ratios:
        # pooled: ratio of the mean changes is dominated by no single pair
        out["identity_change_ratio"] = float(np.mean(ratios))
    if ssims:
        out["scene_swap_human_ssim"] = float(np.mean(ssims))
    return out


def swap_stage(cfg: JobConfig, run, workflow: str, target: str, donor: str) -> SwapResult:
    run = Path(run)
    vae = load_vae(run)
    model, schedule = load_model(run)
    hum = dc.load_masklet(_require(run / "decomp" / target, "decompose") / "human.bin").mask
    bg = dc.load_masklet(run / "decomp" / target / "scene.bin").mask
    kw = {}
    if workflow == "scene":
        kw = {"donor_scene": _float(load_frames(run / "decomp" / donor / "recovered")),
              "target_scene": _float(load_frames(run / "decomp" / target / "recovered"))}
    res = run_swap(workflow, load_bundle(run, target), load_bundle(run, donor), model, schedule, vae,
                   clip_seed(cfg, target), hum, bg, cfg["sample.clip_x0"], **kw)
    with stage_dir(run / "swap" / f"{workflow}_{target}_{donor}", cfg, "swap") as out:
        save_frames(out / "frames", res.frames)
        save_frames(out / "reference", res.reference)
        (out / "report.txt").write_text("".join(f"{k} {v:.6f}\n" for k, v in sorted(res.stats.items())))
        (out / "report.json").write_text(json.dumps(res.stats, indent=1, sort_keys=True) + "\n")
    return res


# --------------------------------------------------------------------- run

def run_all(cfg: JobConfig, run) -> EvalReport:
    gen_data(cfg, run)
    decompose(cfg, run)
    render_motion_stage(cfg, run)
    pretrain_vae_stage(cfg, run)
    encode_stage(cfg, run)
    train_stage(cfg, run)
    synthesize_stage(cfg, run)
    return evaluate_stage(cfg, run)
