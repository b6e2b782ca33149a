"""IKres backbone and task heads, plus the checkpoint file format.

IKres is a single-channel 1-d residual network: an ingest convolution
(1 -> 64 filters, kernel 16, stride 1) with batchnorm and relu, then four
residual blocks with 128/196/256/320 filters. Each block is
[conv(stride 2) -> bn -> relu -> conv -> bn] with a skip path of
max-pool (k=2, stride 2, ceil mode) plus a 1-to-1 convolution, joined by
an add and a final relu. Global average pooling yields the embedding
(one value per final-block filter), consumed by a two-layer dense head:
QT head emits two outputs (z-scored QT and heart rate), QRS and PR heads
one each, and the PRchk head one probability through a sigmoid.

Each task trains its own full parameter set end to end; the four models
share the architecture, never the weights.

Checkpoint layout (little-endian): 8-byte magic ``IKRESCK1``, u32
format version, u32 header length, a canonical JSON header (config,
task, normalizer statistics, decision threshold, parameter manifest in
sorted path order), then the raw float32 parameter payload in manifest
order. Saving is canonical, so load -> save reproduces a file byte for
byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

CHECKPOINT_MAGIC = b"IKRESCK1"
CHECKPOINT_VERSION = 1

HEADS = ("qt", "qrs", "pr", "prchk")
HEAD_DIMS = {"qt": 2, "qrs": 1, "pr": 1, "prchk": 1}
HEAD_TARGETS = {"qt": ("qt_ms", "hr_bpm"), "qrs": ("qrs_ms",), "pr": ("pr_ms",), "prchk": ()}


class ModelError(Exception):
    """Configuration or forward-pass failure."""


class CheckpointError(Exception):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass(frozen=True)
class IKresConfig:
    ingest_filters: int = 64
    block_filters: tuple[int, ...] = (128, 196, 256, 320)
    kernel: int = 16
    input_len: int = 2500
    head_hidden: int = 64

    @property
    def embedding_dim(self) -> int:
        return self.block_filters[-1]

    def validate(self) -> None:
        if len(self.block_filters) != 4:
            raise ModelError(f"exactly four residual blocks required, got {len(self.block_filters)}")
        if min(self.block_filters) < 1 or self.ingest_filters < 1:
            raise ModelError("filter counts must be positive")
        if self.kernel < 1 or self.input_len < self.kernel:
            raise ModelError("kernel must be positive and fit the input")
        if self.head_hidden < 1:
            raise ModelError("head_hidden must be positive")

    def to_dict(self) -> dict:
        return {
            "ingest_filters": self.ingest_filters,
            "block_filters": list(self.block_filters),
            "kernel": self.kernel,
            "input_len": self.input_len,
            "head_hidden": self.head_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IKresConfig":
        return cls(
            ingest_filters=int(d["ingest_filters"]),
            block_filters=tuple(int(v) for v in d["block_filters"]),
            kernel=int(d["kernel"]),
            input_len=int(d["input_len"]),
            head_hidden=int(d["head_hidden"]),
        )


@dataclass
class Normalizer:
    """Per-target z-scoring statistics in natural units (ms, bpm)."""

    targets: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (len(self.targets),) or self.std.shape != (len(self.targets),):
            raise ModelError("normalizer statistics must match the target list")
        if np.any(self.std <= 0):
            raise ModelError("normalizer std must be positive for every target")

    @classmethod
    def fit(cls, targets: tuple[str, ...], values: np.ndarray) -> "Normalizer":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(targets):
            raise ModelError("fit expects values shaped [n, n_targets]")
        std = values.std(axis=0)
        if np.any(std <= 0):
            raise ModelError("degenerate target column (zero variance)")
        return cls(targets=targets, mean=values.mean(axis=0), std=std)

    def forward(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _kaiming_conv(rng, out_ch, in_ch, k, dtype):
    fan_in = in_ch * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k)).astype(dtype)


def _kaiming_dense(rng, d_in, d_out, dtype):
    return rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out)).astype(dtype)


def _bn_params(params, path, ch, dtype):
    params[f"{path}.gamma"] = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
    params[f"{path}.beta"] = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)
    params[f"{path}.running_mean"] = Tensor(np.zeros(ch, dtype=dtype))
    params[f"{path}.running_var"] = Tensor(np.ones(ch, dtype=dtype))


def build_model(
    config: IKresConfig, head: str, init_seed: int = 0, dtype=np.float32
) -> dict[str, Tensor]:
    """Backbone plus one task head, Kaiming-normal weights and zero biases.

    Keys are canonical layer paths (``ingest.conv.w`` ...); batchnorm
    running buffers live alongside the learned parameters but never
    require gradients.
    """
    config.validate()
    if head not in HEADS:
        raise ModelError(f"unknown head {head!r}, expected one of {HEADS}")
    rng = np.random.default_rng(init_seed)
    k = config.kernel
    params: dict[str, Tensor] = {}

    params["ingest.conv.w"] = Tensor(_kaiming_conv(rng, config.ingest_filters, 1, k, dtype),
                                     requires_grad=True)
    params["ingest.conv.b"] = Tensor(np.zeros(config.ingest_filters, dtype=dtype),
                                     requires_grad=True)
    _bn_params(params, "ingest.bn", config.ingest_filters, dtype)

    in_ch = config.ingest_filters
    for i, out_ch in enumerate(config.block_filters, start=1):
        base = f"block{i}"
        params[f"{base}.conv1.w"] = Tensor(_kaiming_conv(rng, out_ch, in_ch, k, dtype),
                                           requires_grad=True)
        params[f"{base}.conv1.b"] = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        _bn_params(params, f"{base}.bn1", out_ch, dtype)
        params[f"{base}.conv2.w"] = Tensor(_kaiming_conv(rng, out_ch, out_ch, k, dtype),
                                           requires_grad=True)
        params[f"{base}.conv2.b"] = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        _bn_params(params, f"{base}.bn2", out_ch, dtype)
        params[f"{base}.skip.conv.w"] = Tensor(_kaiming_conv(rng, out_ch, in_ch, 1, dtype),
                                               requires_grad=True)
        params[f"{base}.skip.conv.b"] = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        in_ch = out_ch

    d = config.embedding_dim
    params["head.fc1.w"] = Tensor(_kaiming_dense(rng, d, config.head_hidden, dtype),
                                  requires_grad=True)
    params["head.fc1.b"] = Tensor(np.zeros(config.head_hidden, dtype=dtype), requires_grad=True)
    params["head.fc2.w"] = Tensor(_kaiming_dense(rng, config.head_hidden, HEAD_DIMS[head], dtype),
                                  requires_grad=True)
    params["head.fc2.b"] = Tensor(np.zeros(HEAD_DIMS[head], dtype=dtype), requires_grad=True)
    return params


def trainable(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if v.requires_grad}


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _bn(params, path, x, training):
    return tc.batchnorm1d(
        x,
        params[f"{path}.gamma"],
        params[f"{path}.beta"],
        params[f"{path}.running_mean"],
        params[f"{path}.running_var"],
        training=training,
    )


def embed(params: dict[str, Tensor], config: IKresConfig, x: Tensor, training: bool) -> Tensor:
    """Backbone forward: [batch, 1, input_len] -> [batch, embedding_dim]."""
    if x.data.ndim != 3 or x.data.shape[1] != 1 or x.data.shape[2] != config.input_len:
        raise ModelError(
            f"expected input [batch, 1, {config.input_len}], got {x.data.shape}"
        )
    h = tc.conv1d(x, params["ingest.conv.w"], params["ingest.conv.b"], stride=1, padding="same")
    h = tc.relu(_bn(params, "ingest.bn", h, training))
    for i in range(1, len(config.block_filters) + 1):
        base = f"block{i}"
        main = tc.conv1d(h, params[f"{base}.conv1.w"], params[f"{base}.conv1.b"],
                         stride=2, padding="same")
        main = tc.relu(_bn(params, f"{base}.bn1", main, training))
        main = tc.conv1d(main, params[f"{base}.conv2.w"], params[f"{base}.conv2.b"],
                         stride=1, padding="same")
        main = _bn(params, f"{base}.bn2", main, training)
        skip = tc.maxpool1d(h, k=2, stride=2, ceil_mode=True)
        skip = tc.conv1d(skip, params[f"{base}.skip.conv.w"], params[f"{base}.skip.conv.b"],
                         stride=1, padding=0)
        h = tc.relu(tc.add(main, skip))
    return tc.avgpool_global(h)


def forward_head(params: dict[str, Tensor], embedding: Tensor, head: str) -> Tensor:
    """Two dense layers with relu between; PRchk adds a sigmoid."""
    if head not in HEADS:
        raise ModelError(f"unknown head {head!r}")
    h = tc.relu(tc.dense(embedding, params["head.fc1.w"], params["head.fc1.b"]))
    out = tc.dense(h, params["head.fc2.w"], params["head.fc2.b"])
    if head == "prchk":
        out = tc.sigmoid(out)
    return out


def forward_model(
    params: dict[str, Tensor], config: IKresConfig, x: Tensor, head: str, training: bool
) -> Tensor:
    return forward_head(params, embed(params, config, x, training), head)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    config: IKresConfig
    task: str
    params: dict[str, Tensor]
    normalizer: Optional[Normalizer]
    prchk_threshold: Optional[float] = None
    config_hash: Optional[str] = None

    def validate(self) -> None:
        self.config.validate()
        if self.task not in HEADS:
            raise CheckpointError(f"unknown task {self.task!r}")
        for path, tensor in self.params.items():
            if not np.all(np.isfinite(tensor.data)):
                raise CheckpointError(f"non-finite parameter {path}")


def _header_dict(ckpt: ModelCheckpoint) -> dict:
    manifest = [
        {
            "path": path,
            "shape": list(ckpt.params[path].data.shape),
            "trainable": bool(ckpt.params[path].requires_grad),
        }
        for path in sorted(ckpt.params)
    ]
    norm = None
    if ckpt.normalizer is not None:
        norm = {
            "targets": list(ckpt.normalizer.targets),
            "mean": [float(v) for v in ckpt.normalizer.mean],
            "std": [float(v) for v in ckpt.normalizer.std],
        }
    return {
        "config": ckpt.config.to_dict(),
        "task": ckpt.task,
        "normalizer": norm,
        "prchk_threshold": ckpt.prchk_threshold,
        "config_hash": ckpt.config_hash,
        "params": manifest,
    }


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    ckpt.validate()
    header = json.dumps(_header_dict(ckpt), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for name in sorted(ckpt.params):
            f.write(np.ascontiguousarray(ckpt.params[name].data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    if len(blob) < 16 + header_len:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated header)")
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({e})") from e

    config = IKresConfig.from_dict(header["config"])
    offset = 16 + header_len
    params: dict[str, Tensor] = {}
    for item in header["params"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: corrupt checkpoint (truncated payload)")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        params[item["path"]] = Tensor(arr, requires_grad=bool(item["trainable"]))
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: corrupt checkpoint (trailing bytes)")

    norm = None
    if header.get("normalizer") is not None:
        n = header["normalizer"]
        norm = Normalizer(
            targets=tuple(n["targets"]),
            mean=np.asarray(n["mean"], dtype=np.float64),
            std=np.asarray(n["std"], dtype=np.float64),
        )
    ckpt = ModelCheckpoint(
        config=config,
        task=header["task"],
        params=params,
        normalizer=norm,
        prchk_threshold=header.get("prchk_threshold"),
        config_hash=header.get("config_hash"),
    )
    ckpt.validate()
    return ckpt
