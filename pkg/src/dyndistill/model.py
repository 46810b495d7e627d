"""MLP encoder, linear classifier head, and the mean-teacher student/teacher pair."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, DimensionError
from .fileio import atomic_write_bytes

CHECKPOINT_MAGIC = b"DDCKPT\x00\x01"
CHECKPOINT_VERSION = 1


@dataclass
class Linear:
    weight: Tensor  # (in_dim, out_dim)
    bias: Tensor  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class Encoder:
    """Stack of linear layers with ReLU between them and none after the last."""

    layers: list[Linear]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"encoder expects (batch, {self.input_dim}) input, got {x.shape}")
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return h

    def named_parameters(self, prefix: str = "encoder") -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layer{i}")


@dataclass
class ClassifierHead:
    linear: Linear

    @property
    def n_classes(self) -> int:
        return self.linear.out_dim

    def __call__(self, h: Tensor) -> Tensor:
        return self.linear(h)

    def named_parameters(self, prefix: str = "head") -> Iterator[tuple[str, Tensor]]:
        yield from self.linear.named_parameters(prefix)


@dataclass
class Network:
    encoder: Encoder
    head: ClassifierHead
    # separate projection for the distillation loss; None means the head is reused
    distill_head: ClassifierHead | None = None

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        dot = f"{prefix}." if prefix else ""
        yield from self.encoder.named_parameters(f"{dot}encoder")
        yield from self.head.named_parameters(f"{dot}head")
        if self.distill_head is not None:
            yield from self.distill_head.named_parameters(f"{dot}distill_head")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def distill_projection(self) -> ClassifierHead:
        return self.distill_head if self.distill_head is not None else self.head

    def __call__(self, batch) -> Tensor:
        return forward(self, batch)


def _uniform_linear(rng: np.random.Generator, fan_in: int, fan_out: int, requires_grad: bool) -> Linear:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Linear(Tensor(w, requires_grad), Tensor(np.zeros(fan_out), requires_grad))


def init_network(seed: int, widths, n_classes: int, distill_head: bool = False) -> Network:
    """Seeded network: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.

    ``widths`` lists the encoder sizes ``[input_dim, hidden..., embed_dim]``.
    """
    widths = [int(w) for w in (widths or [])]
    if len(widths) < 2:
        raise ConfigError("encoder widths need at least an input and an embedding size")
    if any(w < 1 for w in widths) or n_classes < 1:
        raise ConfigError(f"all widths and n_classes must be positive: {widths}, {n_classes}")
    rng = np.random.default_rng(seed)
    layers = [_uniform_linear(rng, a, b, True) for a, b in zip(widths[:-1], widths[1:])]
    head = ClassifierHead(_uniform_linear(rng, widths[-1], n_classes, True))
    extra = ClassifierHead(_uniform_linear(rng, widths[-1], n_classes, True)) if distill_head else None
    return Network(Encoder(layers), head, extra)


def _as_batch(batch) -> Tensor:
    if isinstance(batch, Tensor):
        return batch
    arr = np.asarray(batch, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return Tensor(arr)


def forward(network: Network, batch, head: ClassifierHead | None = None) -> Tensor:
    """Logits ``g(f(batch))``. Pass ``head`` to project through a different head."""
    h = network.encoder(_as_batch(batch))
    return (head or network.head)(h)


def extract_features(encoder: Encoder, batch) -> np.ndarray:
    """Embeddings only, computed without recording a graph."""
    x = np.asarray(batch, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != encoder.input_dim:
        raise DimensionError(f"encoder expects width {encoder.input_dim}, got {x.shape[1]}")
    h = x
    n = len(encoder.layers)
    for i, layer in enumerate(encoder.layers):
        h = h @ layer.weight.data + layer.bias.data
        if i < n - 1:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def frozen_copy(network: Network) -> Network:
    """Deep copy whose parameters never record gradients."""
    clone = copy.deepcopy(network)
    for p in clone.parameters():
        p.requires_grad = False
        p.grad = None
    return clone


@dataclass
class StudentTeacherPair:
    student: Network
    teacher: Network
    momentum: float = 0.99
    ema_steps: int = field(default=0)

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"teacher momentum must lie in [0, 1], got {self.momentum}")

    @classmethod
    def from_student(cls, student: Network, momentum: float = 0.99) -> "StudentTeacherPair":
        return cls(student, frozen_copy(student), momentum)

    def teacher_forward(self, batch, head: ClassifierHead | None = None) -> Tensor:
        return ad.detach(forward(self.teacher, batch, head))


def ema_update(pair: StudentTeacherPair) -> None:
    """theta_t <- m * theta_t + (1 - m) * theta_s over encoder and head(s)."""
    m = pair.momentum
    for (name_t, t), (name_s, s) in zip(pair.teacher.named_parameters(), pair.student.named_parameters()):
        if name_t != name_s or t.shape != s.shape:
            raise DimensionError(f"teacher/student mismatch at {name_t} vs {name_s}")
        if m == 1.0:
            continue
        if m == 0.0:
            t.data[...] = s.data
            continue
        t.data *= m
        t.data += (1.0 - m) * s.data
    pair.ema_steps += 1


# ---------------------------------------------------------------------------
# checkpoints


def pair_state(pair: StudentTeacherPair) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in pair.student.named_parameters("student")}
    state.update({name: p.data for name, p in pair.teacher.named_parameters("teacher")})
    return state


def network_state(network: Network, prefix: str = "student") -> dict[str, np.ndarray]:
    return {name: p.data for name, p in network.named_parameters(prefix)}


def encode_checkpoint(state: dict[str, np.ndarray], config: dict | None = None, meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in state:
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"config": config or {}, "meta": meta or {}, "entries": entries, "payload_bytes": offset},
        sort_keys=True,
    ).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + b"".join(chunks)


def decode_checkpoint(payload: bytes, path=None) -> tuple[dict[str, np.ndarray], dict, dict]:
    where = f" in {path}" if path is not None else ""
    head_len = len(CHECKPOINT_MAGIC) + 8
    if len(payload) < head_len or payload[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint (bad magic){where}")
    version, hlen = struct.unpack_from("<II", payload, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}{where}")
    try:
        header = json.loads(payload[head_len : head_len + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header{where}: {exc}") from exc
    body = payload[head_len + hlen :]
    if len(body) != header.get("payload_bytes"):
        raise CheckpointError(
            f"checkpoint payload is {len(body)} bytes, header declares {header.get('payload_bytes')}{where}"
        )
    state = {}
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + 8 * n > len(body):
            raise CheckpointError(f"entry {entry['name']} overruns payload{where}")
        state[entry["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=start).reshape(shape).astype(np.float64)
    return state, header.get("config", {}), header.get("meta", {})


def save_checkpoint(path, state: dict[str, np.ndarray], config: dict | None = None, meta: dict | None = None) -> Path:
    return atomic_write_bytes(path, encode_checkpoint(state, config, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(payload, path)


def network_from_state(state: dict[str, np.ndarray], prefix: str = "student", requires_grad: bool = True) -> Network:
    """Rebuild a network from ``<prefix>.encoder.layerI.*`` / ``<prefix>.head.*`` entries."""

    def linear(name: str) -> Linear:
        try:
            w, b = state[f"{name}.weight"], state[f"{name}.bias"]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint lacks {exc.args[0]}") from exc
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise CheckpointError(f"bad shapes for {name}: {w.shape}, {b.shape}")
        return Linear(Tensor(w, requires_grad), Tensor(b, requires_grad))

    layers = []
    while f"{prefix}.encoder.layer{len(layers)}.weight" in state:
        layers.append(linear(f"{prefix}.encoder.layer{len(layers)}"))
    if not layers:
        raise CheckpointError(f"checkpoint has no '{prefix}' encoder")
    for a, b in zip(layers[:-1], layers[1:]):
        if a.out_dim != b.in_dim:
            raise CheckpointError(f"inconsistent encoder widths under '{prefix}'")
    head = ClassifierHead(linear(f"{prefix}.head"))
    extra = None
    if f"{prefix}.distill_head.weight" in state:
        extra = ClassifierHead(linear(f"{prefix}.distill_head"))
    return Network(Encoder(layers), head, extra)


def pair_from_state(state: dict[str, np.ndarray], momentum: float = 0.99) -> StudentTeacherPair:
    student = network_from_state(state, "student", True)
    if "teacher.encoder.layer0.weight" in state:
        teacher = network_from_state(state, "teacher", False)
    else:
        teacher = frozen_copy(student)
    return StudentTeacherPair(student, teacher, momentum)
