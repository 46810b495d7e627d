"""Experiment plumbing: configs, run directories, manifests, sweeps.

A run directory ``<out_dir>/<name>`` holds::

    data/{base,unlabeled,target_eval}.ddset   (from generate)
    step1.ckpt  last.ckpt  final.ckpt  train_log.jsonl
    eval.json  eval.csv  analysis.json  features.csv
    manifest.json

Everything except the manifest (which records wall-clock timing) is a pure
function of the config and the library version.
"""

from __future__ import annotations

import concurrent.futures
import copy
import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DomainGenConfig,
    LabeledDataset,
    UnlabeledDataset,
    generate_domains,
    load_dataset,
    save_dataset,
    subsample_unlabeled,
)
from .distill import TrainConfig, train_base, train_joint
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, FileFormatError
from .evaluation import EvalConfig, cluster_features, evaluate_features
from .fileio import atomic_write_text, canonical_json, sha256_bytes, sha256_file
from .model import (
    StudentTeacherPair,
    extract_features,
    init_network,
    load_checkpoint,
    network_from_state,
    network_state,
    pair_state,
    save_checkpoint,
)

log = logging.getLogger(__name__)

SPLITS = ("base", "unlabeled", "target_eval")


# ---------------------------------------------------------------------------
# config


def _build(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {unknown}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' config: {exc}") from exc


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    out_dir: str = "runs"
    seed: int | None = None  # when set, overrides the domain/train/eval seeds
    unlabeled_use_fraction: float = 1.0
    datasets: dict = field(default_factory=lambda: dict.fromkeys(SPLITS))
    domain: DomainGenConfig = field(default_factory=DomainGenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {unknown}")
        domain = _build(DomainGenConfig, d.pop("domain", {}), "domain")
        train = _build(TrainConfig, d.pop("train", {}), "train")
        ev = _build(EvalConfig, d.pop("eval", {}), "eval")
        datasets = dict.fromkeys(SPLITS)
        extra = d.pop("datasets", None) or {}
        bad = sorted(set(extra) - set(SPLITS))
        if bad:
            raise ConfigError(f"unknown dataset splits: {bad}")
        datasets.update(extra)
        return cls(**d, datasets=datasets, domain=domain, train=train, eval=ev)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "out_dir": str(self.out_dir),
            "seed": self.seed,
            "unlabeled_use_fraction": self.unlabeled_use_fraction,
            "datasets": dict(self.datasets),
            "domain": dataclasses.asdict(self.domain),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }
        return json.loads(json.dumps(d))  # tuples -> lists, as they come back from a file

    def resolved(self) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        if cfg.seed is not None:
            cfg.domain.seed = cfg.train.seed = cfg.eval.seed = int(cfg.seed)
        return cfg

    def validate(self) -> None:
        self.domain.validate()
        self.train.validate()
        self.eval.validate()
        if not 0.0 < self.unlabeled_use_fraction <= 1.0:
            raise ConfigError("unlabeled_use_fraction must lie in (0, 1]")

    def substance(self) -> dict:
        """Everything that can change results; names and locations excluded."""
        d = self.resolved().to_dict()
        for key in ("name", "out_dir", "datasets", "seed"):
            d.pop(key)
        return d

    def config_hash(self) -> str:
        return sha256_bytes(canonical_json(self.substance()).encode())

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.name


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Set dotted keys (``train.tau``) in a nested config dict; returns a copy."""
    out = copy.deepcopy(d)
    items = overrides.items() if isinstance(overrides, dict) else (_split_assignment(o) for o in overrides)
    for key, value in items:
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set '{key}': '{p}' is not a section")
        node[parts[-1]] = value
    return out


def _split_assignment(text: str):
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, value = text.split("=", 1)
    return key.strip(), parse_value(value.strip())


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileFormatError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def build_config(path=None, overrides=(), **top) -> ExperimentConfig:
    d = load_config_file(path) if path else {}
    d = apply_overrides(d, list(overrides))
    d.update({k: v for k, v in top.items() if v is not None})
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    version: str = __version__

    def add(self, kind: str, name: str, path) -> None:
        getattr(self, kind)[name] = {"path": str(path), "sha256": sha256_file(path)}

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        doc = {"runs": {}}
        if path.exists():
            try:
                doc = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError):
                log.warning("replacing unreadable manifest %s", path)
        doc.setdefault("runs", {})[self.command] = dataclasses.asdict(self)
        return atomic_write_text(path, canonical_json(doc))


def _manifest(command: str, cfg: ExperimentConfig) -> RunManifest:
    return RunManifest(command, cfg.config_hash(), cfg.seed, cfg.to_dict())


def _file_id(path) -> dict:
    return {"file": Path(path).name, "sha256": sha256_file(path)}


# ---------------------------------------------------------------------------
# datasets


def dataset_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    return {s: Path(cfg.datasets[s]) if cfg.datasets.get(s) else cfg.run_dir / "data" / f"{s}.ddset" for s in SPLITS}


def cmd_generate(cfg: ExperimentConfig) -> dict[str, Path]:
    cfg = cfg.resolved()
    cfg.validate()
    t0 = time.perf_counter()
    base, unl, ev = generate_domains(cfg.domain)
    man = _manifest("generate", cfg)
    out = {}
    for split, ds in zip(SPLITS, (base, unl, ev)):
        meta = {"config_hash": man.config_hash, "split": split, "domain": dataclasses.asdict(cfg.domain), "version": __version__}
        out[split] = save_dataset(ds, cfg.run_dir / "data" / f"{split}.ddset", meta)
        man.add("outputs", split, out[split])
    man.wall_seconds = time.perf_counter() - t0
    man.write(cfg.run_dir)
    log.info("wrote %s", ", ".join(str(p) for p in out.values()))
    return out


def _read(path: Path, split: str):
    if not path.exists():
        raise FileFormatError(f"missing {split} dataset {path} (run 'generate' or set datasets.{split})")
    return load_dataset(path)


def load_splits(cfg: ExperimentConfig, which=SPLITS) -> dict:
    paths = dataset_paths(cfg)
    out = {}
    for split in which:
        ds = _read(paths[split], split)
        if split == "unlabeled" and isinstance(ds, LabeledDataset):
            ds = UnlabeledDataset(ds.samples, ds.labels, ds.n_classes)  # labels kept hidden
        if split != "unlabeled" and not isinstance(ds, LabeledDataset):
            raise ContractError(f"{split} dataset {paths[split]} carries no labels")
        out[split] = ds
    dims = {s: d.input_dim for s, d in out.items()}
    if len(set(dims.values())) > 1:
        raise DimensionError(f"datasets disagree on input_dim: {dims}")
    return out


# ---------------------------------------------------------------------------
# train


def _write_jsonl(path: Path, records) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def cmd_train(cfg: ExperimentConfig) -> StudentTeacherPair:
    cfg = cfg.resolved()
    cfg.validate()
    t0 = time.perf_counter()
    run_dir = cfg.run_dir
    paths = dataset_paths(cfg)
    splits = load_splits(cfg, ("base", "unlabeled"))
    base, unl = splits["base"], splits["unlabeled"]
    if cfg.unlabeled_use_fraction < 1.0:
        unl = subsample_unlabeled(unl, cfg.unlabeled_use_fraction, cfg.train.seed)
    tc = cfg.train
    man = _manifest("train", cfg)
    for split in ("base", "unlabeled"):
        man.add("inputs", split, paths[split])
    substance = cfg.substance()
    meta = {"config_hash": man.config_hash, "version": __version__}
    records = []
    log_path = run_dir / "train_log.jsonl"

    def checkpoint(path, state, **extra):
        return save_checkpoint(path, state, substance, {**meta, **extra})

    student = init_network(tc.seed, tc.widths(base.input_dim), base.n_classes, tc.separate_distill_head)

    def on_epoch(rec, state_fn):
        rec = {**rec, "config_hash": man.config_hash}
        records.append(rec)
        _write_jsonl(log_path, records)
        checkpoint(run_dir / "last.ckpt", state_fn(), phase=rec["phase"], epoch=rec["epoch"])
        log.info("%s epoch %d: total %.4f (sup %.4f, distill %.4f, lambda %.3f)", rec["phase"], rec["epoch"],
                 rec["total"], rec["supervised"], rec["distill"], rec["lambda"])

    step1 = run_dir / "step1.ckpt"
    if tc.one_step:
        step1.unlink(missing_ok=True)  # never leave a stale step-1 file behind
    else:
        train_base(student, base, tc, on_epoch_end=lambda r: on_epoch(r, lambda: network_state(student)))
        man.add("outputs", "step1", checkpoint(step1, network_state(student), phase="step1"))
    pair = StudentTeacherPair.from_student(student, tc.m)
    train_joint(pair, base, unl.view(), tc, on_epoch_end=lambda r: on_epoch(r, lambda: pair_state(pair)))
    final = checkpoint(run_dir / "final.ckpt", pair_state(pair), phase="final")
    if not records:
        _write_jsonl(log_path, records)
    man.add("outputs", "final", final)
    man.add("outputs", "train_log", log_path)
    if (run_dir / "last.ckpt").exists():
        man.add("outputs", "last", run_dir / "last.ckpt")
    man.wall_seconds = time.perf_counter() - t0
    man.write(run_dir)
    return pair


# ---------------------------------------------------------------------------
# eval / analyze


def _load_encoder(path: Path, input_dim: int, dataset_path: Path):
    state, _, _ = load_checkpoint(path)
    net = network_from_state(state, "student", requires_grad=False)
    if net.encoder.input_dim != input_dim:
        raise CheckpointError(
            f"checkpoint {path} expects input_dim {net.encoder.input_dim}, dataset {dataset_path} has {input_dim}"
        )
    return net.encoder


def cmd_eval(cfg: ExperimentConfig, checkpoint=None, dataset=None, report=None) -> dict:
    cfg = cfg.resolved()
    cfg.validate()
    t0 = time.perf_counter()
    ckpt = Path(checkpoint) if checkpoint else cfg.run_dir / "final.ckpt"
    dpath = Path(dataset) if dataset else dataset_paths(cfg)["target_eval"]
    ds = _read(dpath, "target_eval")
    if not isinstance(ds, LabeledDataset):
        raise ContractError(f"evaluation dataset {dpath} carries no labels")
    enc = _load_encoder(ckpt, ds.input_dim, dpath)
    feats = extract_features(enc, ds.samples)
    man = _manifest("eval", cfg)
    ck = _file_id(ckpt)
    sections = {}
    for shot in cfg.eval.shots:
        rep = evaluate_features(feats, ds, shot, cfg.eval)
        rep.checkpoint = ck["sha256"]
        sections[f"{shot}shot"] = rep.to_dict()
    doc = {
        "config_hash": man.config_hash,
        "checkpoint": ck,
        "dataset": _file_id(dpath),
        "sections": sections,
        "version": __version__,
    }
    out = Path(report) if report else cfg.run_dir / "eval.json"
    atomic_write_text(out, canonical_json(doc))
    table = io.StringIO()
    w = csv.writer(table, lineterminator="\n")
    w.writerow(["config_hash", "way", "shot", "mean_accuracy", "ci95", "n_episodes"])
    for s in sections.values():
        w.writerow([man.config_hash, s["way"], s["shot"], repr(s["mean_accuracy"]), repr(s["ci95"]),
                    len(s["per_episode_accuracies"])])
    csv_path = atomic_write_text(out.with_suffix(".csv"), table.getvalue())
    man.add("inputs", "checkpoint", ckpt)
    man.add("inputs", "target_eval", dpath)
    man.add("outputs", "report", out)
    man.add("outputs", "table", csv_path)
    man.wall_seconds = time.perf_counter() - t0
    man.write(cfg.run_dir)
    for name, s in sections.items():
        log.info("%s: %.2f +- %.2f", name, s["mean_accuracy"], s["ci95"])
    return doc


def write_features_csv(path, features: np.ndarray, labels, config_hash: str) -> Path:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{i}" for i in range(features.shape[1])] + ["label"])
    for row, y in zip(features, labels):
        w.writerow([repr(float(v)) for v in row] + [int(y)])
    return atomic_write_text(path, buf.getvalue())


def read_features_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    body = rows[1:]
    x = np.array([[float(v) for v in r[:-1]] for r in body])
    return x, np.array([int(r[-1]) for r in body])


def cmd_analyze(cfg: ExperimentConfig, checkpoint=None, dataset=None) -> dict:
    cfg = cfg.resolved()
    cfg.validate()
    t0 = time.perf_counter()
    ckpt = Path(checkpoint) if checkpoint else cfg.run_dir / "final.ckpt"
    dpath = Path(dataset) if dataset else dataset_paths(cfg)["target_eval"]
    ds = _read(dpath, "analysis")
    if isinstance(ds, LabeledDataset):
        labels = ds.labels
    elif ds.has_hidden_labels:
        labels = ds.reveal_labels()
    else:
        raise ContractError(f"{dpath} has no labels to score clusters against")
    samples = ds.samples if isinstance(ds, LabeledDataset) else ds.view().samples
    enc = _load_encoder(ckpt, samples.shape[1], dpath)
    feats = extract_features(enc, samples)
    rep = cluster_features(feats, labels, seed=cfg.eval.seed, n_init=cfg.eval.kmeans_restarts)
    man = _manifest("analyze", cfg)
    doc = {
        "config_hash": man.config_hash,
        "checkpoint": _file_id(ckpt),
        "dataset": _file_id(dpath),
        "cluster": rep.to_dict(),
        "version": __version__,
    }
    out = atomic_write_text(cfg.run_dir / "analysis.json", canonical_json(doc))
    fpath = write_features_csv(cfg.run_dir / "features.csv", feats, labels, man.config_hash)
    man.add("inputs", "checkpoint", ckpt)
    man.add("inputs", "dataset", dpath)
    man.add("outputs", "report", out)
    man.add("outputs", "features", fpath)
    man.wall_seconds = time.perf_counter() - t0
    man.write(cfg.run_dir)
    log.info("v-measure %.2f%% (k=%d)", rep.v_measure_percent, rep.k)
    return doc


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class Cell:
    label: str
    overrides: dict


@dataclass
class SweepSpec:
    name: str = "sweep"
    axis: str | None = None
    values: list = field(default_factory=list)
    cells: list = field(default_factory=list)  # explicit cells: {"label": ..., <dotted key>: value, ...}
    seeds: list = field(default_factory=lambda: [0])
    base: dict = field(default_factory=dict)  # dotted overrides shared by every cell

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        return _build(cls, d, "sweep")

    def expand(self) -> list[Cell]:
        raw = []
        if self.axis is not None:
            raw += [Cell(f"{self.axis.split('.')[-1]}={_fmt(v)}", {self.axis: v}) for v in self.values]
        for c in self.cells:
            c = dict(c)
            label = c.pop("label", None)
            raw.append(Cell(label or (",".join(f"{k.split('.')[-1]}={_fmt(v)}" for k, v in sorted(c.items())) or "default"), c))
        if not raw:
            raise ConfigError("sweep has no cells: give axis+values or cells")
        seen, cells = {}, []
        for c in raw:
            key = canonical_json(c.overrides)
            if key in seen:
                log.warning("duplicate sweep cell %s (same as %s) dropped", c.label, seen[key])
                continue
            seen[key] = c.label
            cells.append(c)
        labels = [c.label for c in cells]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"sweep cell labels must be unique: {labels}")
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        return cells


def _fmt(v) -> str:
    return json.dumps(v) if not isinstance(v, str) else v


PRESETS = {
    "paper-shape": {"cells": [{"label": "transfer", "train.transfer_only": True}, {"label": "ours"}], "seeds": [0, 1, 2, 3, 4]},
    "momentum": {"axis": "train.m", "values": [0.0, 0.99, 1.0]},
    "tau": {"axis": "train.tau", "values": [0.02, 0.1, 0.5, 1.0, 2.0]},
    "pairing": {"axis": "train.augment_pairing", "values": ["w-w", "w-s", "s-w", "s-s"]},
    # 80/20 target split; the 80% pool is used in growing portions
    "unlabeled-fraction": {
        "axis": "unlabeled_use_fraction",
        "values": [0.125, 0.25, 0.5, 1.0],
        "base": {"domain.unlabeled_fraction": 0.8},
    },
    "modes": {
        "cells": [
            {"label": "transfer", "train.transfer_only": True},
            {"label": "ours"},
            {"label": "no_base", "train.no_base": True},
            {"label": "one_step", "train.one_step": True},
            {"label": "hard_threshold", "train.hard_threshold": 0.95},
            {"label": "distill_head", "train.separate_distill_head": True},
        ]
    },
}


def preset(name: str, seeds=None) -> SweepSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}'; choose from {sorted(PRESETS)}")
    d = {"name": name, "seeds": [0, 1], **copy.deepcopy(PRESETS[name])}
    if seeds is not None:
        d["seeds"] = list(seeds)
    return SweepSpec.from_dict(d)


def _run_cell(cfg_dict: dict, generate: bool) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    if generate:
        cmd_generate(cfg)
    cmd_train(cfg)
    ev = cmd_eval(cfg)
    an = cmd_analyze(cfg)
    return {
        "fewshot": {s["shot"]: s["mean_accuracy"] for s in ev["sections"].values()},
        "ci95": {s["shot"]: s["ci95"] for s in ev["sections"].values()},
        "v_measure_percent": an["cluster"]["v_measure_percent"],
        "config_hash": ev["config_hash"],
    }


def _safe_run(task: dict) -> dict:
    try:
        return {**task["id"], "status": "ok", **_run_cell(task["config"], task["generate"])}
    except Exception as exc:  # recorded per cell; the sweep carries on
        log.error("cell %s seed %s failed: %s", task["id"]["cell"], task["id"]["seed"], exc)
        return {**task["id"], "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class SweepResult:
    rows: list[dict]
    runs: list[dict]
    failures: list[dict]
    table_path: Path
    report_path: Path


def run_sweep(cfg: ExperimentConfig, spec: SweepSpec, jobs: int = 1) -> SweepResult:
    cells = spec.expand()
    root = Path(cfg.out_dir) / spec.name
    base_dict = apply_overrides(cfg.to_dict(), spec.base)
    shares_data = not any(k.startswith("domain.") for c in cells for k in c.overrides) and not any(cfg.datasets.values())
    tasks = []
    for seed in spec.seeds:
        seed_dict = {**base_dict, "seed": int(seed)}
        data_dir = None
        if shares_data:
            gen = ExperimentConfig.from_dict({**seed_dict, "out_dir": str(root / "data"), "name": f"seed{seed}"})
            paths = cmd_generate(gen)
            data_dir = {s: str(p) for s, p in paths.items()}
        for cell in cells:
            d = apply_overrides(seed_dict, cell.overrides)
            d.update(out_dir=str(root / cell.label), name=f"seed{seed}")
            if data_dir:
                d["datasets"] = data_dir
            ExperimentConfig.from_dict(d).resolved().validate()
            tasks.append({"id": {"cell": cell.label, "seed": int(seed)}, "config": d, "generate": data_dir is None})
    log.info("sweep %s: %d cells x %d seeds = %d runs", spec.name, len(cells), len(spec.seeds), len(tasks))
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_safe_run, tasks))
    else:
        runs = [_safe_run(t) for t in tasks]
    rows = aggregate(cells, runs, spec.seeds)
    failures = [r for r in runs if r["status"] != "ok"]
    table_path = write_table(root / "sweep_table.csv", rows)
    report_path = atomic_write_text(
        root / "sweep.json",
        canonical_json({"spec": dataclasses.asdict(spec), "rows": rows, "runs": runs, "failures": failures, "version": __version__}),
    )
    return SweepResult(rows, runs, failures, table_path, report_path)


def _ci(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(1.96 * v.std() / math.sqrt(v.size)) if v.size else float("nan")


def aggregate(cells: list[Cell], runs: list[dict], seeds) -> list[dict]:
    """One row per cell: means over seeds, per-seed values, paired deltas vs the first cell."""
    ok = {(r["cell"], r["seed"]): r for r in runs if r["status"] == "ok"}
    shots = sorted({int(s) for r in ok.values() for s in r["fewshot"]})
    ref = cells[0].label
    rows = []
    for cell in cells:
        row = {"cell": cell.label, "overrides": json.dumps(cell.overrides, sort_keys=True)}
        got = [ok[(cell.label, s)] for s in seeds if (cell.label, s) in ok]
        row["n_ok"] = len(got)
        for shot in shots:
            vals = [r["fewshot"][shot] for r in got]
            row[f"{shot}shot_mean"] = float(np.mean(vals)) if vals else float("nan")
            row[f"{shot}shot_ci95_seeds"] = _ci(vals)
            diffs = [ok[(cell.label, s)]["fewshot"][shot] - ok[(ref, s)]["fewshot"][shot]
                     for s in seeds if (cell.label, s) in ok and (ref, s) in ok]
            row[f"{shot}shot_delta_vs_{ref}"] = float(np.mean(diffs)) if diffs else float("nan")
            for s in seeds:
                r = ok.get((cell.label, s))
                row[f"{shot}shot_s{s}"] = r["fewshot"][shot] if r else float("nan")
        vm = [r["v_measure_percent"] for r in got]
        row["v_measure_mean"] = float(np.mean(vm)) if vm else float("nan")
        for s in seeds:
            r = ok.get((cell.label, s))
            row[f"v_measure_s{s}"] = r["v_measure_percent"] if r else float("nan")
        rows.append(row)
    return rows


def write_table(path, rows: list[dict]) -> Path:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return atomic_write_text(path, buf.getvalue())


def format_table(rows: list[dict], shots=(1, 5)) -> str:
    """Fixed-width text rendering of a sweep table for the terminal."""
    lines = []
    head = f"{'cell':<22}" + "".join(f"{f'{k}-shot':>18}" for k in shots) + f"{'V-measure':>12}{'runs':>6}"
    lines.append(head)
    for r in rows:
        parts = [f"{r['cell']:<22}"]
        for k in shots:
            m, c = r.get(f"{k}shot_mean", float("nan")), r.get(f"{k}shot_ci95_seeds", float("nan"))
            parts.append(f"{m:>10.2f} +-{c:>5.2f}")
        parts.append(f"{r['v_measure_mean']:>12.2f}{r['n_ok']:>6d}")
        lines.append("".join(parts))
    return "\n".join(lines)

