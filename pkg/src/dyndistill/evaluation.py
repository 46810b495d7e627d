"""Few-shot episodic evaluation and clustering analysis on frozen features."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import softmax_array
from .data import LabeledDataset, sample_episode
from .errors import ConfigError, ContractError, EpisodeError
from .model import Encoder, extract_features


@dataclass
class EvalConfig:
    way: int = 5
    shots: tuple[int, ...] = (1, 5)
    queries_per_class: int = 15
    n_episodes: int = 600
    l2: float = 1.0
    lr_iters: int = 500
    lr_step: float = 0.5
    normalize_features: bool = False
    kmeans_restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        self.shots = tuple(int(s) for s in np.atleast_1d(self.shots))

    def validate(self) -> None:
        if self.n_episodes < 2:
            raise ConfigError("n_episodes must be >= 2 for a confidence interval")
        if self.way < 2:
            raise ConfigError("way must be >= 2")
        if not self.shots or min(self.shots) < 1 or self.queries_per_class < 1:
            raise ConfigError("shots and queries_per_class must be >= 1")
        if self.l2 < 0 or self.lr_iters < 0 or not self.lr_step > 0:
            raise ConfigError("invalid logistic-regression settings")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["shots"] = list(self.shots)
        return d


@dataclass
class EvalReport:
    way: int
    shot: int
    mean_accuracy: float  # percent
    ci95: float  # percent half-width
    per_episode_accuracies: list[float]
    config: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ClusterReport:
    homogeneity: float
    completeness: float
    v_measure: float  # in [0, 1]
    k: int
    seed: int | None = None
    inertia: float | None = None

    @property
    def v_measure_percent(self) -> float:
        return 100.0 * self.v_measure

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["v_measure_percent"] = self.v_measure_percent
        return d


def confidence_interval(accuracies) -> float:
    acc = np.asarray(accuracies, dtype=np.float64)
    return float(1.96 * acc.std() / np.sqrt(acc.size))


# ---------------------------------------------------------------------------
# logistic regression


@dataclass
class LinearClassifier:
    weight: np.ndarray  # (n_classes, d)
    bias: np.ndarray  # (n_classes,)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weight.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=-1)


def logistic_objective(w, b, x, y, l2: float) -> float:
    """Mean cross-entropy plus ``l2 * ||W||^2 / 2``."""
    z = x @ w.T + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean() + 0.5 * l2 * np.sum(w * w))


def _fit_batched(x: np.ndarray, y: np.ndarray, n_classes: int, l2: float, iters: int, step: float):
    """Gradient descent on E independent problems at once; x is (E, n, d), y is (E, n)."""
    e, n, d = x.shape
    onehot = np.zeros((e, n, n_classes))
    np.put_along_axis(onehot, y[..., None], 1.0, axis=2)
    # softmax-CE curvature is at most 1/2, so this bounds the Lipschitz constant
    lip = 0.5 * (np.sum(x * x, axis=2).mean(axis=1) + 1.0) + l2
    eta = np.minimum(step, 1.0 / lip)[:, None, None]
    w = np.zeros((e, n_classes, d))
    b = np.zeros((e, 1, n_classes))
    for _ in range(iters):
        p = softmax_array(x @ w.transpose(0, 2, 1) + b)
        r = (p - onehot) / n
        gw = r.transpose(0, 2, 1) @ x + l2 * w
        gb = r.sum(axis=1, keepdims=True)
        w -= eta * gw
        b -= eta * gb
    return w, b[:, 0, :]


def fit_logistic_regression(features, labels, n_classes: int | None = None, cfg: EvalConfig | None = None) -> LinearClassifier:
    """Multinomial logistic regression, full-batch GD from zero init."""
    cfg = cfg or EvalConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ContractError(f"features {x.shape} / labels {y.shape} mismatch")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    missing = sorted(set(range(n_classes)) - set(y.tolist()))
    if missing:
        raise ContractError(f"classes {missing} have no training samples")
    w, b = _fit_batched(x[None], y[None], n_classes, cfg.l2, cfg.lr_iters, cfg.lr_step)
    return LinearClassifier(w[0], b[0])


# ---------------------------------------------------------------------------
# few-shot evaluation


def _normalize(f: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(f, axis=-1, keepdims=True)
    return f / np.where(norm > 0, norm, 1.0)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(seed + index)


def evaluate_features(features: np.ndarray, dataset: LabeledDataset, shot: int, cfg: EvalConfig) -> EvalReport:
    """Few-shot accuracy given precomputed per-sample features of ``dataset``."""
    cfg.validate()
    feats = _normalize(features) if cfg.normalize_features else features
    sx, sy, qx, qy = [], [], [], []
    for i in range(cfg.n_episodes):
        try:
            ep = sample_episode(dataset, cfg.way, shot, cfg.queries_per_class, episode_rng(cfg.seed, i))
        except EpisodeError as exc:
            raise EpisodeError(f"episode {i}: {exc}") from exc
        sx.append(feats[ep.support_idx])
        sy.append(ep.support_y)
        qx.append(feats[ep.query_idx])
        qy.append(ep.query_y)
    sx, sy, qx, qy = map(np.stack, (sx, sy, qx, qy))
    w, b = _fit_batched(sx, sy, cfg.way, cfg.l2, cfg.lr_iters, cfg.lr_step)
    pred = (qx @ w.transpose(0, 2, 1) + b[:, None, :]).argmax(axis=2)
    acc = 100.0 * (pred == qy).mean(axis=1)
    return EvalReport(
        way=cfg.way,
        shot=shot,
        mean_accuracy=float(acc.mean()),
        ci95=confidence_interval(acc),
        per_episode_accuracies=acc.tolist(),
        config=cfg.to_dict(),
    )


def evaluate_fewshot(encoder: Encoder, target_eval: LabeledDataset, cfg: EvalConfig, shot: int | None = None) -> EvalReport:
    """N-way K-shot accuracy of a frozen encoder, mean and 95% CI over episodes.

    Features are extracted once for the whole set; the encoder is per-sample,
    so this equals extracting support/query features per episode.
    """
    shot = cfg.shots[0] if shot is None else shot
    return evaluate_features(extract_features(encoder, target_eval.samples), target_eval, shot, cfg)


# ---------------------------------------------------------------------------
# clustering


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list[float]
    n_iter: int


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ c.T + np.sum(c * c, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, np.asarray(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float) -> KMeansResult:
    k = centroids.shape[0]
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        assign = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), assign].sum()))
        new = np.empty_like(centroids)
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[assign == j].mean(axis=0)
            else:
                new[j] = centroids[j]
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            # re-seed empty clusters at the points farthest from their centroid
            resid = np.sum((x - new[assign]) ** 2, axis=1)
            for j, idx in zip(empty, np.argsort(-resid, kind="stable")):
                new[j] = x[idx]
        shift = float(np.max(np.sum((new - centroids) ** 2, axis=1)))
        centroids = new
        if shift <= tol and not empty.size:
            break
    d = _sq_dists(x, centroids)
    assign = d.argmin(axis=1)
    inertia = float(d[np.arange(len(x)), assign].sum())
    history.append(inertia)
    return KMeansResult(assign, centroids, inertia, history, it)


def kmeans(features, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300, tol: float = 1e-8) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts by inertia."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError("kmeans expects a 2-D feature matrix")
    if not 1 <= k <= x.shape[0]:
        raise ContractError(f"k={k} must lie in [1, n={x.shape[0]}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        res = _lloyd(x, _kmeanspp(x, k, rng), max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def v_measure(truth, predicted) -> ClusterReport:
    """Homogeneity, completeness and their harmonic mean (natural-log entropies)."""
    t = np.asarray(truth)
    p = np.asarray(predicted)
    if t.shape != p.shape or t.ndim != 1:
        raise ContractError(f"label arrays differ in shape: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise ContractError("v_measure needs at least one sample")
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1))
    np.add.at(table, (ti, pi), 1.0)
    n = table.sum()
    h_c = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    nz = table > 0
    # joint / marginal conditional entropies
    col = np.broadcast_to(table.sum(axis=0, keepdims=True), table.shape)
    row = np.broadcast_to(table.sum(axis=1, keepdims=True), table.shape)
    h_c_given_k = float(-(table[nz] / n * np.log(table[nz] / col[nz])).sum())
    h_k_given_c = float(-(table[nz] / n * np.log(table[nz] / row[nz])).sum())
    hom = 1.0 if h_c == 0 else 1.0 - h_c_given_k / h_c
    com = 1.0 if h_k == 0 else 1.0 - h_k_given_c / h_k
    v = 0.0 if hom + com == 0 else 2.0 * hom * com / (hom + com)
    return ClusterReport(hom, com, v, int(pi.max() + 1))


def cluster_features(features: np.ndarray, labels, seed: int = 0, n_init: int = 10) -> ClusterReport:
    """KMeans with k = number of true classes, scored against the true labels."""
    labels = np.asarray(labels)
    k = int(np.unique(labels).size)
    res = kmeans(features, k, seed=seed, n_init=n_init)
    rep = v_measure(labels, res.assignments)
    rep.k, rep.seed, rep.inertia = k, seed, res.inertia
    return rep


# ---------------------------------------------------------------------------
# comparisons


@dataclass
class ComparisonRow:
    name: str
    fewshot: dict[int, EvalReport]
    cluster: ClusterReport | None

    def flat(self) -> dict:
        out = {"name": self.name}
        for shot, rep in sorted(self.fewshot.items()):
            out[f"{shot}shot_mean"] = rep.mean_accuracy
            out[f"{shot}shot_ci95"] = rep.ci95
        if self.cluster is not None:
            out["v_measure_percent"] = self.cluster.v_measure_percent
        return out


def compare_encoders(
    encoders: Mapping[str, Encoder],
    target_eval: LabeledDataset,
    cfg: EvalConfig,
    cluster: bool = True,
) -> list[ComparisonRow]:
    """Evaluate every encoder on the same episode sequence (paired comparison)."""
    dims = {e.input_dim for e in encoders.values()}
    if len(dims) > 1:
        raise ContractError(f"encoders disagree on input_dim: {sorted(dims)}")
    rows = []
    for name, enc in encoders.items():
        feats = extract_features(enc, target_eval.samples)
        fs = {shot: evaluate_features(feats, target_eval, shot, cfg) for shot in cfg.shots}
        cl = cluster_features(feats, target_eval.labels, cfg.seed, cfg.kmeans_restarts) if cluster else None
        rows.append(ComparisonRow(name, fs, cl))
    return rows


def paired_difference(a: EvalReport, b: EvalReport) -> float:
    """Mean of per-episode differences ``a - b``; episodes must be paired."""
    if len(a.per_episode_accuracies) != len(b.per_episode_accuracies):
        raise ContractError("reports cover different numbers of episodes")
    return float(np.mean(np.subtract(a.per_episode_accuracies, b.per_episode_accuracies)))
