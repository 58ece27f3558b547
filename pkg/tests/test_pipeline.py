import json
from pathlib import Path

import pytest

from diffq.errors import ConfigError
from diffq.pipeline import cli
from diffq.pipeline.config import (ExperimentConfig, config_hash, expand_sweep, load_config,
                                   load_preset, parse_seeds, preset_names, resolve)
from diffq.pipeline.runner import compare, run_full

TINY = """
[diffusion]
T_steps = 10
n_data = 512
hidden = 8
depth = 2
emb_dim = 4
train_iters = 60
train_batch = 64

[calibration]
n_per_timestep = 20
interval = 2
val_fraction = 0.1
groups = 5

[quant]
iters = 20
batch_size = 64

[weighting]
meta_iters = 2
batch = 16

[diagnostics]
lemma_train = 30
lemma42_configs = 5
buckets = 10

[run]
seed = 3
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def _cfg(path, **over) -> ExperimentConfig:
    return load_config(path).replace(**over)


# -- configuration ------------------------------------------------------------

def test_presets_load():
    names = preset_names()
    assert {"toy", "fullscale", "fullscale_sgd"} <= set(names)
    for n in names:
        load_preset(n)
    full = load_preset("fullscale")
    assert full.quant.iters == 20000 and full.weighting.meta_iters == 1500


def test_unknown_keys_and_tables_rejected(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[quant]\nbitz = 4\n")
    with pytest.raises(ConfigError, match="bitz"):
        load_config(bad)
    bad.write_text("[quantt]\nbits = 4\n")
    with pytest.raises(ConfigError, match="quantt"):
        load_config(bad)
    bad.write_text("[quant]\nbits = 'four'\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError, match="missing.toml"):
        load_config(tmp_path / "missing.toml")


@pytest.mark.parametrize("over", [
    {"calibration.interval": 3},               # does not divide T
    {"calibration.groups": 11},                # more groups than timesteps
    {"calibration.val_fraction": 0.001, "calibration.n_per_timestep": 20},
    {"weighting.tau": 0.0},
    {"quant.bits": 1},
    {"run.mode": "both"},
])
def test_validation_errors(tiny_cfg, over):
    with pytest.raises(ConfigError):
        _cfg(tiny_cfg, **over)


def test_hash_ignores_output_dir(tiny_cfg):
    a = _cfg(tiny_cfg, **{"run.out": "x"})
    b = _cfg(tiny_cfg, **{"run.out": "y"})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(_cfg(tiny_cfg, **{"run.seed": 4}))


def test_seeds_and_sweeps():
    assert parse_seeds("1..4") == [1, 2, 3, 4]
    assert parse_seeds("1,5") == [1, 5]
    with pytest.raises(ConfigError):
        parse_seeds("4..1")
    cfg, raw = resolve("sweep_tau")
    taus = [c.weighting.tau for c in expand_sweep(cfg, raw)]
    assert len(taus) > 1 and len(set(taus)) == len(taus)


# -- CLI ----------------------------------------------------------------------

def test_cli_usage_errors(capsys, tmp_path):
    assert cli.main(["calibrate", "--bogus"]) == 2
    assert cli.main([]) == 2
    missing = tmp_path / "nope.toml"
    assert cli.main(["train-fp", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_cli_verify_lemmas(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["verify-lemmas", "--config", str(tiny_cfg), "--seed", "7",
                     "--out", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out)
    path = Path(printed["path"])
    assert path.exists()
    rep = json.loads(path.read_text())
    assert rep["lemma43_t1"]["residual_composite"] <= 1e-8
    assert rep["lemma43"]["t_acc"] == 5


def test_cli_calibrate_and_sample(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["calibrate", "--config", str(tiny_cfg), "--uniform", "--out", str(out)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["mode"] == "uniform" and len(res["group_mse"]) == 5
    assert cli.main(["sample", "--config", str(tiny_cfg), "--n", "8", "--out", str(out)]) == 0
    assert Path(json.loads(capsys.readouterr().out)["path"]).exists()


# -- runs ---------------------------------------------------------------------

def _files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.qcw1"))}


def test_manifest_determinism_and_resume(tiny_cfg, tmp_path):
    cfg = _cfg(tiny_cfg)
    a = run_full(cfg, tmp_path / "a", diagnostics=True)
    b = run_full(cfg, tmp_path / "b", diagnostics=True)
    assert a.manifest.content_hashes() == b.manifest.content_hashes()
    assert a.manifest.status == "complete"
    again = run_full(cfg, tmp_path / "a", diagnostics=True)
    assert again.recomputed == ["diagnostics"]
    assert again.manifest.content_hashes() == a.manifest.content_hashes()
    # a corrupted artifact is recomputed, everything upstream of it is reused
    ck = tmp_path / "a" / a.manifest.run_id / "checkpoints" / "block1.qcw1"
    ck.write_bytes(ck.read_bytes()[:-1] + b"x")
    fixed = run_full(cfg, tmp_path / "a", diagnostics=False)
    assert fixed.recomputed == ["block1"]
    assert fixed.manifest.content_hashes()["block1"] == a.manifest.content_hashes()["block1"]


@pytest.mark.parametrize("over", [{"weighting.outer_lr": 0.0}, {"weighting.meta_iters": 0}])
def test_ablations_match_uniform(tiny_cfg, tmp_path, over):
    cfg = _cfg(tiny_cfg, **over)
    uni = run_full(cfg.replace(**{"run.mode": "uniform"}), tmp_path, diagnostics=False)
    wtd = run_full(cfg.replace(**{"run.mode": "weighted"}), tmp_path, diagnostics=False)
    fu = _files(tmp_path / uni.manifest.run_id / "checkpoints")
    fw = _files(tmp_path / wtd.manifest.run_id / "checkpoints")
    assert fu.keys() == fw.keys() and "quant.qcw1" in fu
    assert fu == fw


def test_compare_and_single_block(tiny_cfg, tmp_path):
    cfg = _cfg(tiny_cfg, **{"diffusion.depth": 1})
    s = compare(cfg, [1, 2], tmp_path)
    assert s["n"] == 2 and 0.0 <= s["frac_weighted_not_worse"] <= 1.0
    assert Path(s["path"], "compare.json").exists()
    row = s["rows"][0]
    assert len(row["deltas"]) == 5
