"""Small differentiable point-set encoder.

Per-point MLP (3 -> h -> h, rectifier) shared across points, max pooling over
the point dimension, then a linear projection to the embedding dimension with
optional L2 row normalization. Forward, analytic backward, Adam with
decoupled weight decay, and a versioned binary snapshot format.

All math runs in float64. Snapshots quantize parameters to float32 at freeze
time, so save -> load -> encode is bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PointScan
from .errors import ConfigurationError, TrainingError, UsageError

_SNAP_MAGIC = b"RFSN"
_SNAP_VERSION = 1
_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")  # declaration (serialization) order

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class EncoderParams:
    """Weights and biases; shapes fixed by (hidden, out_dim)."""

    w1: np.ndarray  # (3, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, h)
    b2: np.ndarray  # (h,)
    w3: np.ndarray  # (h, D)
    b3: np.ndarray  # (D,)

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w3.shape[1]

    def tensors(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f) for f in _FIELDS)

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(*(t.astype(dtype, copy=False) for t in self.tensors()))

    def map(self, fn) -> "EncoderParams":
        return EncoderParams(*(fn(t) for t in self.tensors()))


GradientBundle = EncoderParams  # same shapes, per-parameter gradients


@dataclass(frozen=True)
class EmbeddingBatch:
    """Row-per-sample descriptor matrix tagged with its producing model."""

    vectors: np.ndarray  # (N, D)
    producer: str = "new"  # "old" | "new"
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2:
            raise UsageError(f"embedding batch must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise UsageError("embedding batch contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(v, axis=1)
            if v.shape[1] > 0 and not np.all(np.abs(norms - 1.0) < 1e-6):
                raise UsageError("normalized embedding batch has rows with L2 norm != 1")
        object.__setattr__(self, "vectors", v)

    @property
    def batch_size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ModelSnapshot:
    """Frozen encoder state after a completed training step (float32)."""

    params: EncoderParams
    step_index: int
    config_digest: str
    normalize: bool

    def __post_init__(self):
        if self.step_index < 0:
            raise UsageError(f"step_index must be >= 0, got {self.step_index}")


def init_params(seed: int, hidden: int, dim: int) -> EncoderParams:
    """Variance-scaled uniform weights (Glorot), zero biases; pure in seed."""
    if hidden < 1 or dim < 1:
        raise ConfigurationError(f"hidden and dim must be >= 1, got ({hidden}, {dim})")
    rng = np.random.Generator(np.random.PCG64(seed))

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, (fan_in, fan_out))

    return EncoderParams(
        w1=glorot(3, hidden),
        b1=np.zeros(hidden),
        w2=glorot(hidden, hidden),
        b2=np.zeros(hidden),
        w3=glorot(hidden, dim),
        b3=np.zeros(dim),
    )


def _stack_scans(scans) -> np.ndarray:
    if isinstance(scans, np.ndarray):
        x = np.asarray(scans, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != 3:
            raise UsageError(f"scan batch array must be (B, P, 3), got {x.shape}")
        return x
    counts = {s.count for s in scans}
    if len(counts) != 1:
        raise UsageError(f"ragged scan batch: point counts {sorted(counts)}")
    return np.stack([np.asarray(s.points, dtype=np.float64) for s in scans])


def _forward(params: EncoderParams, x: np.ndarray, normalize: bool):
    p = params.astype(np.float64)
    a1 = x @ p.w1 + p.b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ p.w2 + p.b2
    h2 = np.maximum(a2, 0.0)
    # argmax takes the first maximum: ties break to the lowest point index.
    idx = np.argmax(h2, axis=1)
    pooled = np.take_along_axis(h2, idx[:, None, :], axis=1)[:, 0, :]
    z = pooled @ p.w3 + p.b3
    if normalize:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        e = z / np.maximum(norms, _NORM_FLOOR)
    else:
        norms = None
        e = z
    cache = (p, x, a1, h1, a2, idx, pooled, z, norms)
    return e, cache


def encode(params: EncoderParams, scans, normalize: bool = True, producer: str = "new") -> EmbeddingBatch:
    """Embed a batch of scans; permutation of points within a scan is a no-op."""
    x = _stack_scans(scans)
    e, _ = _forward(params, x, normalize)
    # A pre-normalization zero row stays zero; do not claim unit norm for it.
    normed = bool(normalize) and bool(np.all(np.abs(np.linalg.norm(e, axis=1) - 1.0) < 1e-6))
    return EmbeddingBatch(vectors=e, producer=producer, normalized=normed)


def encode_with_cache(params: EncoderParams, scans, normalize: bool = True):
    """Like encode, but also returns the forward cache for backward()."""
    x = _stack_scans(scans)
    return _forward(params, x, normalize)


def backward(params: EncoderParams, scans, upstream: np.ndarray, normalize: bool = True,
             cache=None) -> GradientBundle:
    """Exact loss gradient w.r.t. every parameter given d(loss)/d(embedding).

    Max pooling routes gradient to the argmax point (lowest index on ties);
    the rectifier subgradient at 0 is 0. With normalization on, the full
    normalization Jacobian is applied; rows with norm below 1e-12 get zero
    gradient (subgradient convention at the origin).
    """
    if cache is None:
        x = _stack_scans(scans)
        _, cache = _forward(params, x, normalize)
    p, x, a1, h1, a2, idx, pooled, z, norms = cache
    de = np.asarray(upstream, dtype=np.float64)
    if de.shape != z.shape:
        raise UsageError(f"upstream shape {de.shape} does not match embeddings {z.shape}")

    if normalize:
        safe = np.maximum(norms, _NORM_FLOOR)
        e = z / safe
        dz = (de - np.sum(de * e, axis=1, keepdims=True) * e) / safe
        dz[norms[:, 0] < _NORM_FLOOR] = 0.0
    else:
        dz = de

    dw3 = pooled.T @ dz
    db3 = dz.sum(axis=0)
    dpooled = dz @ p.w3.T

    dh2 = np.zeros_like(a2)
    np.put_along_axis(dh2, idx[:, None, :], dpooled[:, None, :], axis=1)
    da2 = dh2 * (a2 > 0.0)

    b, pts, h = a2.shape
    h1f = h1.reshape(b * pts, h)
    da2f = da2.reshape(b * pts, h)
    dw2 = h1f.T @ da2f
    db2 = da2f.sum(axis=0)
    dh1 = da2 @ p.w2.T
    da1 = dh1 * (a1 > 0.0)

    xf = x.reshape(b * pts, 3)
    da1f = da1.reshape(b * pts, h)
    dw1 = xf.T @ da1f
    db1 = da1f.sum(axis=0)
    return EncoderParams(w1=dw1, b1=db1, w2=dw2, b2=db2, w3=dw3, b3=db3)


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


@dataclass
class AdamState:
    m: EncoderParams
    v: EncoderParams
    t: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls(m=params.map(np.zeros_like), v=params.map(np.zeros_like), t=0)


def adam_step(
    params: EncoderParams,
    grads: GradientBundle,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[EncoderParams, AdamState]:
    """One Adam update; weight decay is decoupled and applied before the moments."""
    for name, g in zip(_FIELDS, grads.tensors()):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for pt, gt, mt, vt in zip(params.tensors(), grads.tensors(), state.m.tensors(), state.v.tensors()):
        pt = pt - lr * weight_decay * pt
        m = beta1 * mt + (1.0 - beta1) * gt
        v = beta2 * vt + (1.0 - beta2) * gt * gt
        pt = pt - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_p.append(pt)
        new_m.append(m)
        new_v.append(v)
    return EncoderParams(*new_p), AdamState(m=EncoderParams(*new_m), v=EncoderParams(*new_v), t=t)


# ---------------------------------------------------------------------------
# Snapshots

def flatten_params(params: EncoderParams) -> np.ndarray:
    """Concatenate all tensors into one float64 vector, declaration order."""
    return np.concatenate([np.asarray(t, dtype=np.float64).ravel() for t in params.tensors()])


def unflatten_params(vec: np.ndarray, hidden: int, dim: int) -> EncoderParams:
    """Inverse of flatten_params for the given architecture."""
    shapes = [(3, hidden), (hidden,), (hidden, hidden), (hidden,), (hidden, dim), (dim,)]
    total = sum(int(np.prod(s)) for s in shapes)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (total,):
        raise UsageError(f"expected a flat vector of {total} params, got {vec.shape}")
    out = []
    off = 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(vec[off : off + n].reshape(s))
        off += n
    return EncoderParams(*out)


def params_digest(params: EncoderParams) -> str:
    """SHA-256 over the exact parameter bytes, declaration order."""
    h = hashlib.sha256()
    for t in params.tensors():
        h.update(np.ascontiguousarray(t).tobytes())
    return h.hexdigest()


def make_snapshot(params: EncoderParams, step_index: int, config_digest: str,
                  normalize: bool) -> ModelSnapshot:
    """Freeze params into a snapshot (float32, the on-disk precision)."""
    return ModelSnapshot(
        params=params.astype("<f4"),
        step_index=step_index,
        config_digest=config_digest,
        normalize=normalize,
    )


def save_snapshot(snapshot: ModelSnapshot, path: str | Path) -> Path:
    """Versioned binary: magic, config digest, dims, then f32 tensors in order."""
    p = snapshot.params.astype("<f4")
    digest = snapshot.config_digest.encode("utf-8")
    out = Path(path)
    with open(out, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(struct.pack("<I", _SNAP_VERSION))
        fh.write(struct.pack("<H", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<III", snapshot.step_index, p.hidden, p.out_dim))
        fh.write(struct.pack("<B", 1 if snapshot.normalize else 0))
        for t in p.tensors():
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return out


def load_snapshot(path: str | Path) -> ModelSnapshot:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise UsageError(f"snapshot file not found: {path}") from None
    off = 0

    def take(n):
        nonlocal off
        chunk = raw[off : off + n]
        if len(chunk) != n:
            raise UsageError(f"truncated snapshot file {path}")
        off += n
        return chunk

    if take(4) != _SNAP_MAGIC:
        raise UsageError(f"{path} is not a snapshot file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != _SNAP_VERSION:
        raise UsageError(f"unsupported snapshot version {version}")
    (dlen,) = struct.unpack("<H", take(2))
    digest = take(dlen).decode("utf-8")
    step_index, hidden, dim = struct.unpack("<III", take(12))
    (norm_flag,) = struct.unpack("<B", take(1))
    shapes = [(3, hidden), (hidden,), (hidden, hidden), (hidden,), (hidden, dim), (dim,)]
    tensors = []
    for shape in shapes:
        n = int(np.prod(shape))
        tensors.append(np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy())
    if off != len(raw):
        raise UsageError(f"trailing bytes in snapshot file {path}")
    return ModelSnapshot(
        params=EncoderParams(*tensors),
        step_index=step_index,
        config_digest=digest,
        normalize=bool(norm_flag),
    )
