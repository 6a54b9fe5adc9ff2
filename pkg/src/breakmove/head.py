"""Trainable head: residual feature-map blocks followed by a scaled MLP classifier.

Weights follow the ``(out, in)`` convention, so a layer computes
``h @ W.T + b`` on a batch of row vectors.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .dataset import NUM_CLASSES, Label
from .errors import CorruptFile, InvalidArgument, MissingFile, ShapeMismatch
from .rng import substream

CHECKPOINT_MAGIC = b"HCK1"


@dataclass(frozen=True)
class HeadConfig:
    d: int
    n_fm: int = 1  # N_H
    n_hidden: int = 1  # N_C
    scale: float = 2.0  # s
    num_classes: int = NUM_CLASSES
    seed: int = 0
    residual: str = "block"  # "block" or "global"

    def __post_init__(self):
        if self.d < 1:
            raise InvalidArgument(f"d must be positive, got {self.d}")
        if self.n_fm < 0 or self.n_hidden < 0:
            raise InvalidArgument("n_fm and n_hidden must be non-negative")
        if not self.scale >= 1:
            raise InvalidArgument(f"scale must be >= 1, got {self.scale}")
        if self.num_classes != NUM_CLASSES:
            raise InvalidArgument(f"the head has exactly {NUM_CLASSES} outputs")
        if self.residual not in ("block", "global"):
            raise InvalidArgument(f"residual must be 'block' or 'global', got {self.residual!r}")

    def widths(self) -> list[int]:
        """Classifier widths ``[d, w_1, ..., w_NC, L]``; hidden widths never drop below L."""
        w = [self.d]
        for _ in range(self.n_hidden):
            w.append(max(self.num_classes, int(math.floor(w[-1] / self.scale))))
        w.append(self.num_classes)
        return w

    @classmethod
    def from_dict(cls, data: dict) -> "HeadConfig":
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class HeadParams:
    config: HeadConfig
    fm: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    clf: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def arrays(self) -> list[np.ndarray]:
        """Flat view of every tensor in schedule order: FM (W, b) pairs then classifier pairs."""
        out = []
        for W, b in self.fm + self.clf:
            out.extend((W, b))
        return out

    def weights(self) -> list[np.ndarray]:
        return [W for W, _ in self.fm + self.clf]

    def with_arrays(self, arrays) -> "HeadParams":
        arrays = list(arrays)
        n_fm = len(self.fm)
        pairs = [(arrays[2 * k], arrays[2 * k + 1]) for k in range(len(arrays) // 2)]
        return HeadParams(self.config, pairs[:n_fm], pairs[n_fm:])

    def copy(self) -> "HeadParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "HeadParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def validate(self) -> None:
        cfg = self.config
        if len(self.fm) != cfg.n_fm or len(self.clf) != cfg.n_hidden + 1:
            raise ShapeMismatch("layer count does not match the config schedule")
        for W, b in self.fm:
            if W.shape != (cfg.d, cfg.d) or b.shape != (cfg.d,):
                raise ShapeMismatch(f"FM block has shapes {W.shape}, {b.shape}")
        widths = cfg.widths()
        for k, (W, b) in enumerate(self.clf):
            if W.shape != (widths[k + 1], widths[k]) or b.shape != (widths[k + 1],):
                raise ShapeMismatch(f"classifier layer {k} has shapes {W.shape}, {b.shape}")
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise ShapeMismatch("parameters contain non-finite values")


@dataclass
class ForwardCache:
    x: np.ndarray
    fm_inputs: list[np.ndarray] = field(default_factory=list)  # h_{i-1}
    fm_pre: list[np.ndarray] = field(default_factory=list)  # W_i h_{i-1} + b_i
    z: np.ndarray | None = None
    clf_inputs: list[np.ndarray] = field(default_factory=list)
    clf_pre: list[np.ndarray] = field(default_factory=list)
    logits: np.ndarray | None = None


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_head(config: HeadConfig) -> HeadParams:
    """Glorot-uniform weights and zero biases, deterministic under ``config.seed``."""
    rng = substream(config.seed, "init")
    fm = [(_glorot(rng, config.d, config.d), np.zeros(config.d)) for _ in range(config.n_fm)]
    widths = config.widths()
    clf = [(_glorot(rng, widths[k + 1], widths[k]), np.zeros(widths[k + 1])) for k in range(len(widths) - 1)]
    return HeadParams(config, fm, clf)


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeMismatch(f"expected inputs with {d} features, got shape {np.shape(x)}")
    return x, single


def fm_forward(params: HeadParams, x, cache: ForwardCache | None = None):
    """Apply the FM stack: ``h <- h + relu(W h + b)`` per block.

    Returns ``(z, cache)``; ``z`` has the same shape as ``x``.
    """
    h, single = _as_batch(x, params.config.d)
    if cache is None:
        cache = ForwardCache(x=h)
    for W, b in params.fm:
        pre = h @ W.T + b
        cache.fm_inputs.append(h)
        cache.fm_pre.append(pre)
        h = h + np.maximum(pre, 0.0)
    if params.config.residual == "global":
        h = h + cache.x
    cache.z = h
    return (h[0] if single else h), cache


def classifier_forward(params: HeadParams, z, cache: ForwardCache | None = None):
    """Hidden layers with ReLU, then a plain affine map to the logits."""
    u, single = _as_batch(z, params.config.d)
    if cache is None:
        cache = ForwardCache(x=u, z=u)
    last = len(params.clf) - 1
    for k, (W, b) in enumerate(params.clf):
        pre = u @ W.T + b
        cache.clf_inputs.append(u)
        cache.clf_pre.append(pre)
        u = pre if k == last else np.maximum(pre, 0.0)
    cache.logits = u
    return (u[0] if single else u), cache


def forward(params: HeadParams, x) -> tuple[np.ndarray, ForwardCache]:
    z, cache = fm_forward(params, x)
    logits, cache = classifier_forward(params, cache.z, cache)
    if np.ndim(x) == 1:
        return logits[0], cache
    return logits, cache


def argmax_label(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(np.asarray(logits), axis=-1)


def predict(params: HeadParams, x):
    """Class decision ``argmax_k f_k(x)``; a Label for one vector, an int array for a batch."""
    logits, _ = forward(params, x)
    if np.ndim(x) == 1:
        return Label(int(argmax_label(logits)))
    return argmax_label(logits)


# ---------------------------------------------------------------------------
# checkpoints
#
# HCK1 | u32 header length | UTF-8 JSON header | one EMB8 block per tensor.
# Tensors follow HeadParams.arrays() order; biases are stored as 1 x n blocks.


def save_checkpoint(path, params: HeadParams, epoch: int = 0, extra: dict | None = None) -> None:
    header = {"config": asdict(params.config), "seed": params.config.seed, "epoch": int(epoch)}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in params.arrays():
            tensorio.write_block(fh, a if a.ndim == 2 else a[None, :], tensorio.MAGIC_F64)


def load_checkpoint(path) -> tuple[HeadParams, dict]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CorruptFile(f"{path}: not a head checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        config = HeadConfig.from_dict(header["config"])
        template = init_head(config)
        arrays = []
        for ref in template.arrays():
            block = tensorio.read_block(fh, tensorio.MAGIC_F64, source=str(path))[:, 0, :]
            arrays.append(block.reshape(ref.shape).copy())
        if fh.read(1):
            raise CorruptFile(f"{path}: trailing bytes after last tensor")
    params = template.with_arrays(arrays)
    params.validate()
    return params, header
