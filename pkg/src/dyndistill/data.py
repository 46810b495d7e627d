"""Synthetic cross-domain data, vector augmentations, episodes, dataset files.

Samples are generated from Gaussian clusters in a low-dimensional latent
space, embedded into the input space by a random linear map.  Target-domain
samples additionally go through a fixed warp (input-space rotation followed
by per-coordinate tanh squashing), which is the controllable domain gap.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, EpisodeError, ParseError, ValidationError
from .fileio import atomic_write_bytes

# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", y)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValidationError(f"samples must be a non-empty 2-D array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValidationError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} samples")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes}), found {y.min()}..{y.max()}")
        if self.class_names is not None:
            names = tuple(str(n) for n in self.class_names)
            if len(names) != self.n_classes:
                raise ValidationError(f"{len(names)} class names for {self.n_classes} classes")
            object.__setattr__(self, "class_names", names)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    @cached_property
    def class_indices(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in range(self.n_classes)}

    def present_classes(self) -> list[int]:
        return [c for c, idx in self.class_indices.items() if idx.size]


@dataclass(frozen=True)
class UnlabeledView:
    """The only face of the target set the training loop is allowed to see."""

    samples: np.ndarray

    def __len__(self) -> int:
        return self.samples.shape[0]


class UnlabeledDataset:
    """Target-domain samples whose labels are kept aside for clustering analysis only."""

    def __init__(self, samples, hidden_labels=None, n_classes: int | None = None):
        x = np.ascontiguousarray(samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValidationError(f"samples must be a non-empty 2-D array, got shape {x.shape}")
        self._samples = x
        self._samples.setflags(write=False)
        self.__hidden = None
        self._n_classes = n_classes
        if hidden_labels is not None:
            y = np.ascontiguousarray(hidden_labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ValidationError("hidden label count does not match sample count")
            if n_classes is not None and y.size and (y.min() < 0 or y.max() >= n_classes):
                raise ValidationError(f"hidden labels must lie in [0, {n_classes})")
            self.__hidden = y

    def __len__(self) -> int:
        return self._samples.shape[0]

    @property
    def input_dim(self) -> int:
        return self._samples.shape[1]

    @property
    def has_hidden_labels(self) -> bool:
        return self.__hidden is not None

    @property
    def n_classes(self) -> int | None:
        return self._n_classes

    def view(self) -> UnlabeledView:
        return UnlabeledView(self._samples)

    def reveal_labels(self) -> np.ndarray:
        """Post-hoc evaluation only (clustering scores)."""
        if self.__hidden is None:
            raise ValidationError("this unlabeled set carries no hidden labels")
        return self.__hidden.copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, UnlabeledDataset):
            return NotImplemented
        same_labels = (self.__hidden is None and other.__hidden is None) or (
            self.__hidden is not None and other.__hidden is not None and np.array_equal(self.__hidden, other.__hidden)
        )
        return (
            np.array_equal(self._samples, other._samples)
            and same_labels
            and self._n_classes == other._n_classes
        )


# ---------------------------------------------------------------------------
# generation


@dataclass
class DomainGenConfig:
    n_base_classes: int = 64
    n_target_classes: int = 10
    samples_per_class: int = 30
    target_samples_per_class: int | None = 500  # None: same as samples_per_class
    input_dim: int = 32
    latent_dim: int = 8
    cluster_std: float = 1.0
    center_scale: float = 2.0
    noise_std: float = 0.1
    nuisance_dim: int = 8
    nuisance_std: float = 1.0
    warp: bool = True
    warp_severity: float = 1.0
    unlabeled_fraction: float = 0.2
    seed: int = 0

    @classmethod
    def sanity(cls, seed: int = 0, **overrides) -> "DomainGenConfig":
        """Clean variant: no domain warp and no shared nuisance directions."""
        return cls(**{"warp": False, "nuisance_std": 0.0, "seed": seed, **overrides})

    def validate(self) -> None:
        for name in ("n_base_classes", "n_target_classes", "samples_per_class", "input_dim", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.latent_dim + self.nuisance_dim > self.input_dim:
            raise ConfigError("latent_dim + nuisance_dim cannot exceed input_dim")
        if self.nuisance_dim < 0 or self.nuisance_std < 0:
            raise ConfigError("nuisance_dim and nuisance_std must be >= 0")
        if self.cluster_std < 0 or self.noise_std < 0 or self.center_scale <= 0:
            raise ConfigError("cluster_std and noise_std must be >= 0, center_scale > 0")
        if not 0.0 < self.unlabeled_fraction < 1.0:
            raise ConfigError("unlabeled_fraction must lie in (0, 1)")
        if self.warp_severity < 0:
            raise ConfigError("warp_severity must be >= 0")


@dataclass(frozen=True)
class DomainGeometry:
    base_centers: np.ndarray  # (n_base, latent)
    target_centers: np.ndarray  # (n_target, latent)
    embedding: np.ndarray  # (latent, input): x = z @ embedding
    nuisance: np.ndarray  # (nuisance_dim, input), shared by both domains
    rotation: np.ndarray  # (input, input), orthogonal
    gains: np.ndarray  # (input,)
    severity: float

    def embed_base(self, z: np.ndarray) -> np.ndarray:
        return z @ self.embedding

    def embed_target(self, z: np.ndarray) -> np.ndarray:
        u = z @ self.embedding @ self.rotation
        if self.severity == 0:
            return u
        k = self.severity * self.gains
        return np.tanh(k * u) / k


def _cayley_rotation(rng: np.random.Generator, dim: int, angle: float) -> np.ndarray:
    a = rng.normal(size=(dim, dim))
    skew = (a - a.T) / np.sqrt(2 * dim)
    eye = np.eye(dim)
    return np.linalg.solve(eye - angle * skew, eye + angle * skew)


def domain_geometry(cfg: DomainGenConfig) -> DomainGeometry:
    """Deterministic cluster centres and maps for ``cfg`` (independent of sampling noise)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0])
    base_c = rng.normal(scale=cfg.center_scale, size=(cfg.n_base_classes, cfg.latent_dim))
    target_c = rng.normal(scale=cfg.center_scale, size=(cfg.n_target_classes, cfg.latent_dim))
    embedding = rng.normal(scale=1.0 / np.sqrt(cfg.latent_dim), size=(cfg.latent_dim, cfg.input_dim))
    severity = cfg.warp_severity if cfg.warp else 0.0
    rotation = _cayley_rotation(rng, cfg.input_dim, severity)
    gains = rng.uniform(0.5, 1.5, size=cfg.input_dim)
    nuisance = rng.normal(scale=1.0 / np.sqrt(max(cfg.nuisance_dim, 1)), size=(cfg.nuisance_dim, cfg.input_dim))
    return DomainGeometry(base_c, target_c, embedding, nuisance, rotation, gains, float(severity))


def _sample_latent(rng, centers, n_per_class, std):
    labels = np.repeat(np.arange(centers.shape[0]), n_per_class)
    z = centers[labels] + std * rng.normal(size=(labels.size, centers.shape[1]))
    return z, labels


def generate_domains(cfg: DomainGenConfig) -> tuple[LabeledDataset, UnlabeledDataset, LabeledDataset]:
    """Return ``(base, target_unlabeled, target_eval)`` for ``cfg``.

    The target set is split per class: ``unlabeled_fraction`` of each class goes
    to the unlabeled pool, the rest to evaluation.
    """
    geo = domain_geometry(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    n = cfg.samples_per_class

    def observe(x):
        # class-free variation shared by both domains, plus isotropic noise
        nz = cfg.nuisance_std * rng.normal(size=(x.shape[0], cfg.nuisance_dim))
        return x + nz @ geo.nuisance + cfg.noise_std * rng.normal(size=x.shape)

    zb, yb = _sample_latent(rng, geo.base_centers, n, cfg.cluster_std)
    xb = observe(geo.embed_base(zb))

    n = cfg.target_samples_per_class or cfg.samples_per_class
    zt, yt = _sample_latent(rng, geo.target_centers, n, cfg.cluster_std)
    xt = observe(geo.embed_target(zt))

    n_unl = int(round(cfg.unlabeled_fraction * n))
    n_unl = min(max(n_unl, 1), n - 1) if n > 1 else 0
    unl_idx, eval_idx = [], []
    for c in range(cfg.n_target_classes):
        idx = np.flatnonzero(yt == c)
        perm = rng.permutation(idx)
        unl_idx.append(perm[:n_unl])
        eval_idx.append(perm[n_unl:])
    unl_idx = np.sort(np.concatenate(unl_idx))
    eval_idx = np.sort(np.concatenate(eval_idx))
    if unl_idx.size == 0 or eval_idx.size == 0:
        raise ConfigError("samples_per_class too small to split target data")

    base = LabeledDataset(xb, yb, cfg.n_base_classes, tuple(f"base_{c}" for c in range(cfg.n_base_classes)))
    unlabeled = UnlabeledDataset(xt[unl_idx], yt[unl_idx], cfg.n_target_classes)
    target_eval = LabeledDataset(
        xt[eval_idx], yt[eval_idx], cfg.n_target_classes, tuple(f"target_{c}" for c in range(cfg.n_target_classes))
    )
    return base, unlabeled, target_eval


def subsample_unlabeled(dataset: UnlabeledDataset, fraction: float, seed: int) -> UnlabeledDataset:
    """Keep a random ``fraction`` of an unlabeled pool (unlabeled-amount sweeps)."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    n = len(dataset)
    k = max(1, int(round(fraction * n)))
    idx = np.sort(np.random.default_rng(seed).permutation(n)[:k])
    labels = dataset.reveal_labels()[idx] if dataset.has_hidden_labels else None
    return UnlabeledDataset(dataset.view().samples[idx], labels, dataset.n_classes)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    noise_std: float = 0.0
    mask_fraction: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        lo, hi = self.scale_range
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if not 0.0 <= self.mask_fraction < 1.0:
            raise ConfigError("mask_fraction must lie in [0, 1)")
        if not 0 < lo <= hi:
            raise ConfigError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")

    def weaker_than(self, other: "AugmentationSpec") -> bool:
        return self.noise_std < other.noise_std and self.mask_fraction <= other.mask_fraction


WEAK = AugmentationSpec(noise_std=0.05, mask_fraction=0.0, scale_range=(0.95, 1.05))
STRONG = AugmentationSpec(noise_std=0.25, mask_fraction=0.20, scale_range=(0.8, 1.2))
IDENTITY = AugmentationSpec()


def n_masked(dim: int, mask_fraction: float) -> int:
    return int(np.floor(mask_fraction * dim + 0.5))


def augment_batch(x: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """``scale * (x + noise)`` with ``round(mask_fraction * dim)`` coordinates zeroed per row.

    Draw order is fixed (noise, scale, mask) so results depend only on the generator state.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    out = x.copy()
    if spec.noise_std > 0:
        out += spec.noise_std * rng.normal(size=(n, d))
    lo, hi = spec.scale_range
    if lo != hi:
        out *= rng.uniform(lo, hi, size=(n, 1))
    elif lo != 1.0:
        out *= lo
    k = n_masked(d, spec.mask_fraction)
    if k > 0:
        cols = np.argsort(rng.random((n, d)), axis=1)[:, :k]
        np.put_along_axis(out, cols, 0.0, axis=1)
    return out


def augment(sample: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    return augment_batch(np.asarray(sample, dtype=np.float64)[None, :], spec, rng)[0]


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    classes: np.ndarray  # original class ids; position = remapped label
    support_idx: np.ndarray  # row indices into the source dataset
    query_idx: np.ndarray
    way: int
    shot: int


def sample_episode(
    dataset: LabeledDataset, way: int, shot: int, queries_per_class: int, rng: np.random.Generator
) -> Episode:
    if way < 1 or shot < 1 or queries_per_class < 1:
        raise EpisodeError(f"way/shot/queries must be >= 1 (got {way}/{shot}/{queries_per_class})")
    available = dataset.present_classes()
    if len(available) < way:
        raise EpisodeError(f"{way}-way episode needs {way} classes, dataset has {len(available)}")
    need = shot + queries_per_class
    short = [c for c in available if dataset.class_indices[c].size < need]
    if short:
        raise EpisodeError(f"classes {short[:5]} have fewer than {need} samples (shot {shot} + queries {queries_per_class})")
    classes = rng.choice(np.asarray(available), size=way, replace=False)
    s_idx, q_idx, s_y, q_y = [], [], [], []
    for new_label, c in enumerate(classes):
        picked = rng.choice(dataset.class_indices[int(c)], size=need, replace=False)
        s_idx.append(picked[:shot])
        q_idx.append(picked[shot:])
        s_y.append(np.full(shot, new_label))
        q_y.append(np.full(queries_per_class, new_label))
    s_idx, q_idx = np.concatenate(s_idx), np.concatenate(q_idx)
    return Episode(
        support_x=dataset.samples[s_idx],
        support_y=np.concatenate(s_y).astype(np.int64),
        query_x=dataset.samples[q_idx],
        query_y=np.concatenate(q_y).astype(np.int64),
        classes=classes.astype(np.int64),
        support_idx=s_idx,
        query_idx=q_idx,
        way=way,
        shot=shot,
    )


# ---------------------------------------------------------------------------
# files
#
# layout (little-endian):
#   magic "DDSET\0" | u16 version | u16 flags | u64 n | u64 dim | u64 n_classes
#   | f64[n*dim] samples | i64[n] labels (if flagged) | u32 len + utf-8 JSON names (if flagged)
#   | u32 len + utf-8 JSON metadata object (if flagged)

DATASET_MAGIC = b"DDSET\x00"
DATASET_VERSION = 1
FLAG_LABELS = 1
FLAG_HIDDEN = 2  # labels belong to an unlabeled set and stay hidden from training
FLAG_NAMES = 4
FLAG_META = 8
_KNOWN_FLAGS = FLAG_LABELS | FLAG_HIDDEN | FLAG_NAMES | FLAG_META
_HEADER = struct.Struct("<HHQQQ")


def _json_block(obj) -> bytes:
    blob = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(blob)) + blob


def encode_dataset(dataset: LabeledDataset | UnlabeledDataset, meta: dict | None = None) -> bytes:
    names = None
    if isinstance(dataset, LabeledDataset):
        x, y, n_classes, flags = dataset.samples, dataset.labels, dataset.n_classes, FLAG_LABELS
        names = dataset.class_names
    else:
        x = dataset.view().samples
        y = dataset.reveal_labels() if dataset.has_hidden_labels else None
        n_classes = dataset.n_classes or 0
        flags = (FLAG_LABELS | FLAG_HIDDEN) if y is not None else 0
    if names is not None:
        flags |= FLAG_NAMES
    if meta is not None:
        flags |= FLAG_META
    parts = [DATASET_MAGIC, _HEADER.pack(DATASET_VERSION, flags, x.shape[0], x.shape[1], n_classes)]
    parts.append(np.ascontiguousarray(x, dtype="<f8").tobytes())
    if y is not None:
        parts.append(np.ascontiguousarray(y, dtype="<i8").tobytes())
    if names is not None:
        parts.append(_json_block(list(names)))
    if meta is not None:
        parts.append(_json_block(meta))
    return b"".join(parts)


def decode_dataset(payload: bytes, path=None) -> LabeledDataset | UnlabeledDataset:
    return _decode(payload, path)[0]


def _decode(payload: bytes, path=None):
    pos = 0

    def need(nbytes: int, what: str):
        if pos + nbytes > len(payload):
            raise ParseError(f"truncated file: expected {nbytes} bytes of {what}", pos, path)

    need(len(DATASET_MAGIC), "magic")
    if payload[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise ParseError("bad magic bytes", 0, path)
    pos = len(DATASET_MAGIC)
    need(_HEADER.size, "header")
    version, flags, n, dim, n_classes = _HEADER.unpack_from(payload, pos)
    if version != DATASET_VERSION:
        raise ParseError(f"unsupported dataset version {version}", pos, path)
    if flags & ~_KNOWN_FLAGS:
        raise ParseError(f"unknown flag bits {flags:#x}", pos + 2, path)
    if n < 1 or dim < 1:
        raise ParseError(f"invalid shape n={n}, dim={dim}", pos + 4, path)
    pos += _HEADER.size
    need(8 * n * dim, "sample payload")
    x = np.frombuffer(payload, dtype="<f8", count=n * dim, offset=pos).reshape(n, dim).astype(np.float64)
    pos += 8 * n * dim
    y = None
    if flags & FLAG_LABELS:
        need(8 * n, "labels")
        y = np.frombuffer(payload, dtype="<i8", count=n, offset=pos).astype(np.int64)
        bad = np.flatnonzero((y < 0) | (y >= n_classes))
        if bad.size:
            raise ValidationError(
                f"label {y[bad[0]]} at row {bad[0]} outside [0, {n_classes}) declared in header"
                + (f" ({path})" if path else "")
            )
        pos += 8 * n
    def json_block(what: str):
        nonlocal pos
        need(4, f"{what} length")
        (blen,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        need(blen, what)
        try:
            obj = json.loads(payload[pos : pos + blen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"malformed {what}: {exc}", pos, path) from exc
        pos += blen
        return obj

    names = tuple(json_block("class names")) if flags & FLAG_NAMES else None
    meta = json_block("metadata") if flags & FLAG_META else None
    if pos != len(payload):
        raise ParseError(f"{len(payload) - pos} trailing bytes", pos, path)
    if flags & FLAG_HIDDEN or not flags & FLAG_LABELS:
        return UnlabeledDataset(x, y, n_classes or None), meta
    return LabeledDataset(x, y, int(n_classes), names), meta


def save_dataset(dataset, path, meta: dict | None = None) -> Path:
    return atomic_write_bytes(path, encode_dataset(dataset, meta))


def dataset_meta(path) -> dict | None:
    """The metadata block of a binary dataset file, or None when absent."""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read dataset: {exc}", None, path) from exc
    return _decode(payload, path)[1]


def load_dataset(path) -> LabeledDataset | UnlabeledDataset:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read dataset: {exc}", None, path) from exc
    return decode_dataset(payload, path)


def load_csv(path, has_labels: bool | None = None, n_classes: int | None = None):
    """One row per sample; an integer final column is taken as the label.

    ``has_labels=None`` guesses from the last column (all integral values).
    """
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header line
                raise ParseError(f"non-numeric value on line {lineno}", None, path)
    if not rows:
        raise ParseError("empty CSV", 0, path)
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ParseError("ragged CSV rows", None, path)
    arr = np.asarray(rows, dtype=np.float64)
    if has_labels is None:
        last = arr[:, -1]
        has_labels = width > 1 and bool(np.all(last == np.round(last)) and np.all(last >= 0))
    if not has_labels:
        return UnlabeledDataset(arr)
    y = arr[:, -1].astype(np.int64)
    k = int(y.max()) + 1 if n_classes is None else n_classes
    return LabeledDataset(arr[:, :-1], y, k)


def dataset_summary(dataset) -> dict:
    kind = "labeled" if isinstance(dataset, LabeledDataset) else "unlabeled"
    out = {"kind": kind, "n": len(dataset), "input_dim": dataset.input_dim}
    out["n_classes"] = dataset.n_classes
    return out


def config_dict(cfg: DomainGenConfig) -> dict:
    return asdict(cfg)
