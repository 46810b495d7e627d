import json
import logging

import numpy as np
import pytest

from dyndistill import cli, experiment
from dyndistill.data import LabeledDataset, UnlabeledDataset, dataset_meta, load_dataset, save_dataset
from dyndistill.distill import pretrain
from dyndistill.errors import CheckpointError, ConfigError
from dyndistill.experiment import (
    ExperimentConfig,
    SweepSpec,
    apply_overrides,
    cmd_analyze,
    cmd_eval,
    cmd_generate,
    cmd_train,
    read_features_csv,
    run_sweep,
)
from dyndistill.fileio import sha256_file
from dyndistill.model import extract_features, load_checkpoint, network_from_state, pair_state

TINY = {
    "domain": {"n_base_classes": 6, "samples_per_class": 12, "target_samples_per_class": 30, "input_dim": 12,
               "latent_dim": 4, "nuisance_dim": 2},
    "train": {"epochs_step1": 2, "epochs_step2": 2, "lambda_ramp_epochs": 1, "hidden_dims": [10], "embed_dim": 6},
    "eval": {"n_episodes": 20, "kmeans_restarts": 2},
}


def tiny(tmp_path, **top) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**TINY, "out_dir": str(tmp_path), **top})


def _write_config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


# ---------------------------------------------------------------------------
# config


def test_config_round_trip_and_unknown_keys():
    cfg = ExperimentConfig.from_dict(TINY)
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict() and again.config_hash() == cfg.config_hash()
    for bad in ({"bogus": 1}, {"train": {"bogus": 1}}, {"datasets": {"other": "x"}}, {"eval": []}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)


def test_overrides_and_seed_resolution():
    d = apply_overrides(TINY, ["train.tau=0.5", "eval.shots=[1]", "name=abc"])
    assert d["train"]["tau"] == 0.5 and d["eval"]["shots"] == [1] and d["name"] == "abc"
    assert TINY["train"].get("tau") is None  # input untouched
    cfg = ExperimentConfig.from_dict({**d, "seed": 7}).resolved()
    assert cfg.domain.seed == cfg.train.seed == cfg.eval.seed == 7
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_hash_ignores_locations_but_not_substance():
    a = ExperimentConfig.from_dict({**TINY, "name": "a", "out_dir": "x"})
    b = ExperimentConfig.from_dict({**TINY, "name": "b", "out_dir": "y"})
    c = ExperimentConfig.from_dict(apply_overrides(TINY, {"train.tau": 0.2}))
    assert a.config_hash() == b.config_hash() != c.config_hash()


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_three_files_and_manifest(tmp_path):
    cfg = tiny(tmp_path)
    paths = cmd_generate(cfg)
    assert sorted(paths) == ["base", "target_eval", "unlabeled"]
    man = json.loads((cfg.run_dir / "manifest.json").read_text())["runs"]["generate"]
    for split, p in paths.items():
        assert man["outputs"][split]["sha256"] == sha256_file(p)
        assert dataset_meta(p)["config_hash"] == man["config_hash"] == cfg.config_hash()
    first = {s: sha256_file(p) for s, p in paths.items()}
    again = cmd_generate(cfg)
    assert {s: sha256_file(p) for s, p in again.items()} == first


def test_generate_invalid_dim_exits_with_config_code(tmp_path):
    code = cli.main(["--config", _write_config(tmp_path), "--out", str(tmp_path), "--set", "domain.input_dim=0",
                     "generate"])
    assert code == 2


def test_generate_unwritable_path_is_file_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["--config", _write_config(tmp_path), "--out", str(blocker), "generate"]) == 3


# ---------------------------------------------------------------------------
# train


def test_train_matches_library_pretrain(tmp_path):
    cfg = tiny(tmp_path)
    paths = cmd_generate(cfg)
    pair = cmd_train(cfg)
    ref = pretrain(load_dataset(paths["base"]), load_dataset(paths["unlabeled"]).view(), cfg.train)
    for k, v in pair_state(ref.pair).items():
        assert pair_state(pair)[k].tobytes() == v.tobytes()
    state, stored_cfg, meta = load_checkpoint(cfg.run_dir / "final.ckpt")
    assert meta["config_hash"] == cfg.config_hash() and stored_cfg == cfg.substance()
    lines = [json.loads(l) for l in (cfg.run_dir / "train_log.jsonl").read_text().splitlines()]
    assert [l["phase"] for l in lines] == ["step1"] * 2 + ["step2"] * 2
    assert {"epoch", "lr", "lambda", "supervised", "distill", "total", "skip_count"} <= set(lines[0])
    assert all(l["config_hash"] == cfg.config_hash() for l in lines)


def test_transfer_only_logs_zero_lambda(tmp_path):
    cfg = tiny(tmp_path)
    cmd_generate(cfg)
    assert cli.main(["--config", _write_config(tmp_path), "--out", str(tmp_path), "train", "--transfer-only"]) == 0
    lines = [json.loads(l) for l in (cfg.run_dir / "train_log.jsonl").read_text().splitlines()]
    step2 = [l for l in lines if l["phase"] == "step2"]
    assert step2 and all(l["lambda"] == 0.0 and l["distill"] == 0.0 for l in step2)


def test_one_step_emits_no_step1_checkpoint(tmp_path):
    cfg = tiny(tmp_path)
    cmd_generate(cfg)
    cmd_train(cfg)
    assert (cfg.run_dir / "step1.ckpt").exists()
    cmd_train(tiny(tmp_path, train={**TINY["train"], "one_step": True}))
    assert not (cfg.run_dir / "step1.ckpt").exists()
    assert (cfg.run_dir / "final.ckpt").exists()


def test_interrupted_training_leaves_valid_last_checkpoint(tmp_path, monkeypatch):
    cfg = tiny(tmp_path)
    cmd_generate(cfg)
    real = experiment.train_joint

    def interrupted(pair, base, unl, tc, on_epoch_end):
        def hook(rec):
            on_epoch_end(rec)
            raise KeyboardInterrupt

        return real(pair, base, unl, tc, on_epoch_end=hook)

    monkeypatch.setattr(experiment, "train_joint", interrupted)
    with pytest.raises(KeyboardInterrupt):
        cmd_train(cfg)
    state, _, meta = load_checkpoint(cfg.run_dir / "last.ckpt")
    assert meta["phase"] == "step2" and meta["epoch"] == 0
    assert network_from_state(state, "teacher", requires_grad=False).encoder.input_dim == 12
    assert not (cfg.run_dir / "final.ckpt").exists()
    assert not list(cfg.run_dir.glob(".*.tmp"))


def test_train_without_datasets_is_file_error(tmp_path):
    assert cli.main(["--config", _write_config(tmp_path), "--out", str(tmp_path), "train"]) == 3


def test_external_dataset_paths(tmp_path):
    src = tiny(tmp_path, name="src")
    paths = cmd_generate(src)
    ext = tiny(tmp_path, name="ext", datasets={k: str(v) for k, v in paths.items()})
    cmd_train(ext)
    assert (ext.run_dir / "final.ckpt").exists() and not (ext.run_dir / "data").exists()


# ---------------------------------------------------------------------------
# eval / analyze


@pytest.fixture()
def trained(tmp_path):
    cfg = tiny(tmp_path)
    cmd_generate(cfg)
    cmd_train(cfg)
    return cfg


def test_eval_is_deterministic_with_both_shots(trained):
    a = (cmd_eval(trained), (trained.run_dir / "eval.json").read_bytes())
    b = (cmd_eval(trained), (trained.run_dir / "eval.json").read_bytes())
    assert a[1] == b[1]
    assert sorted(a[0]["sections"]) == ["1shot", "5shot"]
    sec = a[0]["sections"]["5shot"]
    assert len(sec["per_episode_accuracies"]) == 20 and sec["checkpoint"] == a[0]["checkpoint"]["sha256"]
    assert a[0]["config_hash"] == trained.config_hash()


def test_corrupt_checkpoint_reports_path(trained, tmp_path, caplog):
    bad = tmp_path / "broken.ckpt"
    bad.write_bytes((trained.run_dir / "final.ckpt").read_bytes()[:50])
    with caplog.at_level(logging.ERROR):
        code = cli.main(["--config", _write_config(tmp_path), "--out", str(tmp_path), "eval", "--checkpoint", str(bad)])
    assert code == 3 and "broken.ckpt" in caplog.text


def test_architecture_mismatch_is_load_error(trained, tmp_path):
    ds = save_dataset(LabeledDataset(np.zeros((50, 5)), np.arange(50) % 5, 5), tmp_path / "five.ddset")
    with pytest.raises(CheckpointError, match="input_dim"):
        cmd_eval(trained, dataset=ds)


def test_analyze_determinism_and_feature_export(trained):
    a = cmd_analyze(trained)
    first = [(trained.run_dir / f).read_bytes() for f in ("analysis.json", "features.csv")]
    b = cmd_analyze(trained)
    assert a == b and first == [(trained.run_dir / f).read_bytes() for f in ("analysis.json", "features.csv")]
    x, y = read_features_csv(trained.run_dir / "features.csv")
    state, _, _ = load_checkpoint(trained.run_dir / "final.ckpt")
    ev = load_dataset(trained.run_dir / "data" / "target_eval.ddset")
    assert np.array_equal(x, extract_features(network_from_state(state).encoder, ev.samples))
    assert np.array_equal(y, ev.labels)
    assert (trained.run_dir / "features.csv").read_text().startswith(f"# config_hash={trained.config_hash()}")
    assert 0 <= a["cluster"]["v_measure"] <= 1 and a["cluster"]["k"] == 10


def test_analyze_on_hidden_label_pool_and_error_path(trained, tmp_path):
    doc = cmd_analyze(trained, dataset=trained.run_dir / "data" / "unlabeled.ddset")
    assert doc["cluster"]["k"] == 10
    bare = save_dataset(UnlabeledDataset(np.zeros((10, 12))), tmp_path / "bare.ddset")
    code = cli.main(["--config", _write_config(tmp_path), "--out", str(tmp_path), "analyze", "--dataset", str(bare)])
    assert code == 4


def test_manifest_references_existing_files(trained):
    cmd_eval(trained)
    cmd_analyze(trained)
    runs = json.loads((trained.run_dir / "manifest.json").read_text())["runs"]
    assert set(runs) == {"generate", "train", "eval", "analyze"}
    for entry in runs.values():
        assert entry["version"] and entry["wall_seconds"] >= 0
        for ref in entry["outputs"].values():
            assert sha256_file(ref["path"]) == ref["sha256"]


def test_flags_work_after_the_subcommand(tmp_path):
    cfgp = _write_config(tmp_path)
    assert cli.main(["generate", "--config", cfgp, "--out", str(tmp_path), "--seed", "3", "--name", "late"]) == 0
    assert (tmp_path / "late" / "data" / "base.ddset").exists()
    assert dataset_meta(tmp_path / "late" / "data" / "base.ddset")["domain"]["seed"] == 3


# ---------------------------------------------------------------------------
# sweeps


def test_momentum_sweep_counts(tmp_path):
    spec = SweepSpec(name="m", axis="train.m", values=[0.0, 0.99, 1.0], seeds=[0, 1])
    res = run_sweep(tiny(tmp_path), spec)
    assert len(res.runs) == 6 and not res.failures
    assert [r["cell"] for r in res.rows] == ["m=0.0", "m=0.99", "m=1.0"]
    assert all(r["n_ok"] == 2 for r in res.rows)
    lines = res.table_path.read_text().splitlines()
    assert len(lines) == 4 and "5shot_s1" in lines[0]


def test_duplicate_cells_are_dropped_with_warning(caplog):
    spec = SweepSpec(cells=[{"label": "a", "train.tau": 0.5}, {"label": "b", "train.tau": 0.5}, {"train.m": 0.9}])
    with caplog.at_level(logging.WARNING):
        cells = spec.expand()
    assert [c.label for c in cells] == ["a", "m=0.9"] and "duplicate" in caplog.text


def test_single_cell_sweep_equals_train_plus_eval(tmp_path):
    direct = tiny(tmp_path / "direct", seed=0)
    cmd_generate(direct)
    cmd_train(direct)
    cmd_eval(direct)
    res = run_sweep(tiny(tmp_path / "sw"), SweepSpec(name="one", cells=[{"label": "only"}], seeds=[0]))
    cell_dir = tmp_path / "sw" / "one" / "only" / "seed0"
    for f in ("eval.json", "final.ckpt", "train_log.jsonl"):
        assert (cell_dir / f).read_bytes() == (direct.run_dir / f).read_bytes(), f
    assert res.rows[0]["5shot_s0"] == json.loads((direct.run_dir / "eval.json").read_text())["sections"]["5shot"]["mean_accuracy"]


def test_failed_cell_is_recorded_and_exit_is_nonzero(tmp_path):
    spec = {"name": "f", "cells": [{"label": "ok"}, {"label": "bad", "eval.queries_per_class": 1000}], "seeds": [0]}
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(spec))
    code = cli.main(["--config", _write_config(tmp_path), "--out", str(tmp_path), "sweep", "--spec", str(p)])
    assert code == 5
    doc = json.loads((tmp_path / "f" / "sweep.json").read_text())
    assert [r["status"] for r in doc["runs"]] == ["ok", "failed"] and "EpisodeError" in doc["failures"][0]["error"]


def test_parallel_sweep_matches_serial(tmp_path):
    spec = SweepSpec(name="p", axis="train.tau", values=[0.1, 1.0], seeds=[0])
    serial = run_sweep(tiny(tmp_path / "a"), spec, jobs=1)
    parallel = run_sweep(tiny(tmp_path / "b"), spec, jobs=2)
    assert serial.rows == parallel.rows


def test_presets_expand():
    for name in experiment.PRESETS:
        assert experiment.preset(name).expand()
    with pytest.raises(ConfigError):
        experiment.preset("nope")


def test_axis_sweep_from_cli(tmp_path, capsys):
    code = cli.main(["--config", _write_config(tmp_path), "--out", str(tmp_path), "--log-level", "WARNING",
                     "sweep", "--axis", "train.augment_pairing", "--values", "w-s", "s-w", "--seeds", "0"])
    assert code == 0
    out = capsys.readouterr().out
    assert "augment_pairing=w-s" in out and "augment_pairing=s-w" in out
