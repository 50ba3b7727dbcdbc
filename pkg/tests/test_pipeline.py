import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from spatialsynth import cli
from spatialsynth import diffusion as df
from spatialsynth import pipeline as pl
from spatialsynth.config import ConfigError, load_config

TINY = ["--set", "data.count=5", "--set", "data.width=32", "--set", "data.height=32", "--set", "data.holdout=0.4",
        "--set", "vae.steps=6", "--set", "vae.crop=32", "--set", "vae.batch=4", "--set", "vae.width=8",
        "--set", "train.steps=3", "--set", "train.batch=2", "--set", "schedule.steps=4",
        "--set", "eval.clips=2", "--set", "swap.pairs=2"]


def _tree_digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "timing.txt":
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["run", "--out", str(out), "--serial", "--seed", "3"] + TINY) == 0
    return out


# ------------------------------------------------------------------ config

def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "job.ini"
    p.write_text("[data]\ncount = 7  # clips\nwidth = 64\n\n[train]\nlr = 0.5\n")
    cfg = load_config(p, {"run.seed": "9"})
    assert cfg["data.count"] == 7 and cfg["data.width"] == 64 and cfg["train.lr"] == 0.5
    assert cfg.seed == 9
    assert cfg["data.height"] == 128  # default
    assert "[data]" in cfg.dump()


def test_config_errors(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[data]\ncolour = 3\n")
    with pytest.raises(ConfigError, match="data.colour"):
        load_config(p)
    p.write_text("[data]\ncount = many\n")
    with pytest.raises(ConfigError, match="count"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_fingerprint_ignores_worker_count():
    a = load_config(None, {"run.workers": 1})
    b = load_config(None, {"run.workers": 4})
    c = load_config(None, {"run.seed": 1})
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_derived_seeds_are_distinct_and_stable():
    assert pl.derive_seed(0, "vae") == pl.derive_seed(0, "vae")
    assert len({pl.derive_seed(0, n) for n in ("vae", "train", "denoiser")}) == 3
    assert pl.derive_seed(0, "vae") != pl.derive_seed(1, "vae")


# --------------------------------------------------------------------- cli

def test_cli_error_is_one_json_line(tmp_path, capsys):
    code = cli.main(["decompose", "--out", str(tmp_path / "nothing")])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    msg = json.loads(err[-1])
    assert msg["error"] == "PipelineError" and "gen-data" in msg["message"]


def test_cli_bad_config_key(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path), "--set", "nope.key=1"]) == 1
    assert json.loads(capsys.readouterr().err.strip())["error"] == "ConfigError"


def test_cli_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly"])
    assert exc.value.code == 2


def test_lock_file_excludes_concurrent_commands(tmp_path):
    cfg = load_config()
    with pl.stage_dir(tmp_path / "s", cfg, "x"):
        with pytest.raises(pl.PipelineError, match="locked"):
            with pl.stage_dir(tmp_path / "s", cfg, "x"):
                pass
    assert not (tmp_path / "s" / ".lock").exists()
    assert json.loads((tmp_path / "s" / "provenance.json").read_text())["seed"] == 0


# ---------------------------------------------------------------- pipeline

def test_run_produces_every_stage(tiny_run):
    for stage in ("data", "decomp", "motion", "vae", "codes", "model", "samples", "eval"):
        prov = json.loads((tiny_run / stage / "provenance.json").read_text())
        assert prov["seed"] == 3
    held = [e.name for e in pl.sg.read_manifest(tiny_run / "data" / "manifest.txt")[1] if e.split == "heldout"]
    assert len(held) == 2
    for n in held:
        frames = pl.load_frames(tiny_run / "samples" / n)
        assert frames.shape == (8, 32, 32, 3)


def test_report_aggregates_recompute(tiny_run):
    rep = pl.EvalReport.from_json((tiny_run / "eval" / "report.json").read_text())
    agg = rep.aggregates()
    for col in pl.REPORT_COLUMNS:
        assert agg[col] == np.mean([r[col] for r in rep.rows.values()])
    lines = (tiny_run / "eval" / "report.txt").read_text().splitlines()
    mean = [ln for ln in lines if ln.startswith("mean ")][0].split()[1:]
    assert [float(v) for v in mean] == pytest.approx([agg[c] for c in pl.REPORT_COLUMNS], abs=1e-6)
    row = next(iter(rep.rows.values()))
    assert row["gain_db"] == pytest.approx(row["psnr"] - row["baseline_psnr"])


def test_serial_run_is_byte_identical(tiny_run, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["run", "--out", str(again), "--serial", "--seed", "3"] + TINY) == 0
    a, b = _tree_digest(tiny_run), _tree_digest(again)
    assert a.keys() == b.keys()
    assert a == b
    assert any(k.startswith("samples/") for k in a)


def test_different_seed_changes_artifacts(tiny_run, tmp_path):
    other = tmp_path / "other"
    assert cli.main(["gen-data", "--out", str(other), "--serial", "--seed", "4"] + TINY) == 0
    assert (other / "data" / "manifest.txt").read_bytes() != (tiny_run / "data" / "manifest.txt").read_bytes()


def test_vae_frozen_through_training(tiny_run):
    vae = pl.load_vae(tiny_run)
    assert vae.frozen
    rep = json.loads((tiny_run / "vae" / "report.json").read_text())
    assert rep["checksum"] == vae.checksum()


def test_identity_swap_with_same_character_is_a_no_op(tiny_run):
    cfg = load_config(None, dict(kv.split("=") for kv in TINY[1::2]))
    cfg.set("run.seed", 3)
    name = pl.eval_names(cfg, tiny_run)[0]
    b = pl.load_bundle(tiny_run, name)
    vae = pl.load_vae(tiny_run)
    model, sched = pl.load_model(tiny_run)
    hum = pl.dc.load_masklet(tiny_run / "decomp" / name / "human.bin").mask
    res = pl.run_swap("identity", b, b, model, sched, vae, 5, hum, ~hum)
    assert res.stats["psnr_vs_reference"] >= 40.0


def test_swap_rejects_incompatible_grids(tiny_run):
    cfg = load_config(None, dict(kv.split("=") for kv in TINY[1::2]))
    name = pl.eval_names(cfg, tiny_run)[0]
    b = pl.load_bundle(tiny_run, name)
    small = df.LatentBundle(b.canonical, b.motion, b.c_so[:, :4], "small")
    with pytest.raises(pl.PipelineError, match="C_so"):
        pl.recombine("scene", b, small)
    with pytest.raises(pl.PipelineError, match="workflow"):
        pl.recombine("hair", b, b)


def test_recombine_replaces_exactly_one_code(tiny_run):
    names = [e.name for e in pl.sg.read_manifest(tiny_run / "data" / "manifest.txt")[1]][:2]
    a, b = (pl.load_bundle(tiny_run, n) for n in names)
    for wf, field in (("identity", "canonical"), ("motion", "motion"), ("scene", "c_so")):
        r = pl.recombine(wf, a, b)
        for f in ("canonical", "motion", "c_so"):
            assert getattr(r, f) is (getattr(b, f) if f == field else getattr(a, f))


def test_swap_command_writes_report(tiny_run, capsys):
    names = [e.name for e in pl.sg.read_manifest(tiny_run / "data" / "manifest.txt")[1]][:2]
    code = cli.main(["swap", "--out", str(tiny_run), "--serial", "--seed", "3", "--workflow", "scene",
                     "--target", names[0], "--donor", names[1]] + TINY)
    assert code == 0
    d = tiny_run / "swap" / f"scene_{names[0]}_{names[1]}"
    stats = json.loads((d / "report.json").read_text())
    assert {"human_change", "background_change", "background_ssim_new", "background_ssim_old"} <= stats.keys()
    assert len(list((d / "frames").glob("*.png"))) == 8
    assert "change_ratio" in capsys.readouterr().out


def test_occlusion_fidelity_counts():
    src = np.zeros((1, 2, 2, 3))
    src[..., 0] = 1.0  # occluder red
    human = np.zeros((1, 2, 2, 3))
    human[..., 2] = 1.0  # character blue
    synth = np.zeros((1, 2, 2, 3))
    synth[0, 0, :, 0] = 0.9
    synth[0, 1, :, 2] = 0.9
    mask = np.ones((1, 2, 2), bool)
    assert pl.occlusion_fidelity(synth, src, human, mask) == (2, 4)
    assert pl.occlusion_fidelity(synth, src, human, ~mask) == (0, 0)


def test_reconstruction_row_identity():
    rng = np.random.default_rng(0)
    src = rng.random((2, 16, 16, 3))
    row = pl.reconstruction_row(src, src, np.clip(src + 0.1, 0, 1))
    assert math.isinf(row["psnr"]) and row["ssim"] == 1.0
