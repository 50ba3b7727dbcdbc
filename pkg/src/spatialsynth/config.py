"""Job configuration: INI files of ``key = value`` lines grouped in sections.

Keys are addressed as ``section.key``; anything not set in the file takes
the default below.  Values are typed after their defaults.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

DEFAULTS = {
    "run.seed": 0,
    "run.workers": 1,
    "data.count": 200,
    "data.width": 128,
    "data.height": 128,
    "data.frames": 8,
    "data.holdout": 0.1,
    "motion.code_dim": 8,
    "motion.code_seed": 7,
    "vae.steps": 3000,
    "vae.batch": 16,
    "vae.crop": 64,
    "vae.lr": 2e-3,
    "vae.lr_final": 1e-4,
    "vae.kl_weight": 1e-6,
    "vae.width": 32,
    "vae.min_psnr": 28.0,
    "vae.max_zero_error": 0.05,
    "schedule.steps": 100,
    "schedule.beta_start": 1e-3,
    "schedule.beta_end": 0.2,
    "train.steps": 5000,
    "train.batch": 4,
    "train.lr": 1e-3,
    "train.lr_final": 5e-5,
    "train.warmup": 100,
    "train.clip_norm": 1.0,
    "train.ema": 0.999,
    "train.log_every": 50,
    "train.checkpoint_every": 500,
    "train.scene_prior": False,
    "sample.clip_x0": 10.0,
    "sample.seed": 1234,
    "eval.clips": 20,
    "eval.min_gain_db": 3.0,
    "swap.identity_ratio": 5.0,
    "swap.motion_ratio": 0.1,
    "swap.scene_ssim": 0.8,
    "swap.occlusion_fraction": 0.8,
    "swap.pairs": 10,
}


class ConfigError(ValueError):
    pass


def _coerce(key, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


@dataclass
class JobConfig:
    command: str = ""
    out: Path = Path("run")
    serial: bool = False
    source: str = "<defaults>"
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def workers(self) -> int:
        return 1 if self.serial else max(1, self.values["run.workers"])

    def set(self, key, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, str(value))

    def fingerprint(self) -> str:
        """Hash of every value that shapes artifacts (worker count excluded)."""
        vals = {k: v for k, v in sorted(self.values.items()) if k != "run.workers"}
        return hashlib.sha256(json.dumps(vals, sort_keys=True).encode()).hexdigest()[:16]

    def dump(self) -> str:
        sections = {}
        for k, v in sorted(self.values.items()):
            sec, _, name = k.partition(".")
            sections.setdefault(sec, []).append(f"{name} = {v}")
        return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())


def load_config(path=None, overrides: dict | None = None) -> JobConfig:
    cfg = JobConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            parser.read_string(path.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in parser.sections():
            for name, raw in parser.items(sec):
                cfg.set(f"{sec}.{name}", raw)
        cfg.source = str(path)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg
