"""Dense float64 tensors with reverse-mode automatic differentiation.

Every learned parameter and activation in this package lives in a
:class:`Tensor`.  Storage is a row-major contiguous numpy float64 array;
each op records its parents and a backward closure, and :func:`backward`
walks the resulting DAG once in reverse topological order, accumulating
gradients (shared subexpressions sum).

Deliberate restrictions, chosen for a desk-scale artifact:

* float64 only, no views or strides, no GPU;
* broadcasting is limited to adding or multiplying a trailing-dimension
  vector into a matrix (the bias / layer-norm-affine pattern), everything
  else is a :class:`ShapeError` so model-wiring bugs surface early;
* graph construction is single threaded per model instance.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager

import numpy as np

from .errors import CheckpointError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "backward",
    "zero_grad",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "embedding_lookup",
    "cross_entropy",
    "binary_cross_entropy",
    "tsum",
    "tmean",
    "concat",
    "AdamState",
    "adam_step",
    "global_grad_norm",
    "clip_gradients",
    "save_tensor_file",
    "load_tensor_file",
]

LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus optional gradient buffer.

    ``data`` is always C-contiguous float64.  ``grad`` is allocated lazily
    during :func:`backward` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        # ascontiguousarray alone would promote 0-d scalars to shape (1,)
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _result(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the graph only when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, delta: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(delta, dtype=np.float64)
    else:
        t.grad = t.grad + delta


# -- graph traversal ---------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every ``requires_grad`` tensor.

    ``loss`` must be a scalar produced by a recorded graph.  Repeated calls
    without :func:`zero_grad` accumulate.  Traversal is iterative so graphs
    with hundreds of thousands of nodes do not hit the recursion limit.
    """
    if loss.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    _accum(loss, np.ones((), dtype=np.float64))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params) -> None:
    """Reset gradients of an iterable (or dict) of tensors to None."""
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        p.grad = None


# -- core ops ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors.

    Backward: dA = dC @ B^T, dB = A^T @ dC.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _result(out_data, (a, b), _bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")

    def _bw(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _result(a.data.T.copy(), (a,), _bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")

    def _bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), _bw)


def _trailing_vector(a: Tensor, b: Tensor):
    """Return True when b is a 1-D vector matching a's trailing extent."""
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts matrix + trailing-dimension bias vector."""
    if a.shape == b.shape:
        def _bw(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g)
        return _result(a.data + b.data, (a, b), _bw)
    if _trailing_vector(a, b):
        def _bw(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0))
        return _result(a.data + b.data, (a, b), _bw)
    raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes incompatible: {a.shape} - {b.shape}")

    def _bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _result(a.data - b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; also accepts matrix * trailing-dimension vector."""
    if a.shape == b.shape:
        def _bw(g):
            if a.requires_grad:
                _accum(a, g * b.data)
            if b.requires_grad:
                _accum(b, g * a.data)
        return _result(a.data * b.data, (a, b), _bw)
    if _trailing_vector(a, b):
        def _bw(g):
            if a.requires_grad:
                _accum(a, g * b.data)
            if b.requires_grad:
                _accum(b, (g * a.data).reshape(-1, b.shape[0]).sum(axis=0))
        return _result(a.data * b.data, (a, b), _bw)
    raise ShapeError(f"mul shapes incompatible: {a.shape} * {b.shape}")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _result(a.data * s, (a,), _bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - y * y))

    return _result(y, (a,), _bw)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * y * (1.0 - y))

    return _result(y, (a,), _bw)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * (a.data > 0.0))

    return _result(y, (a,), _bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``: slices sum to 1 and are positive.

    Inputs may contain large negative masking constants; max subtraction
    keeps the exponentials in range.
    """
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def _bw(g):
        if a.requires_grad:
            inner = np.sum(g * y, axis=axis, keepdims=True)
            _accum(a, y * (g - inner))

    return _result(y, (a,), _bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse

    def _bw(g):
        if a.requires_grad:
            soft = np.exp(y)
            _accum(a, g - soft * np.sum(g, axis=axis, keepdims=True))

    return _result(y, (a,), _bw)


def layer_norm(a: Tensor) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (eps 1e-5).

    Affine gain/bias are applied by callers via mul/add so this op stays
    parameter-free; a constant vector maps to zeros.
    """
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    y = centered * inv

    def _bw(g):
        if a.requires_grad:
            g_mean = g.mean(axis=-1, keepdims=True)
            gy_mean = (g * y).mean(axis=-1, keepdims=True)
            _accum(a, inv * (g - g_mean - y * gy_mean))

    return _result(y, (a,), _bw)


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not train or rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * mask)

    return _result(a.data * mask, (a,), _bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows ``ids`` from a 2-D table; backward scatters with np.add.at."""
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding id out of range [0, {table.shape[0]}): {idx.min()}..{idx.max()}"
        )

    def _bw(g):
        if table.requires_grad:
            delta = np.zeros_like(table.data)
            np.add.at(delta, idx, g)
            _accum(table, delta)

    return _result(table.data[idx], (table,), _bw)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean token-level cross entropy from raw logits.

    ``logits`` is [N, V], ``targets`` a length-N id sequence.  Positions whose
    target equals ``ignore_index`` are excluded from the mean.  Computed via
    a fused log-sum-exp so uniform logits give exactly ln V.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    t = np.asarray(list(targets), dtype=np.int64)
    if t.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy target count {t.shape[0]} != logit rows {logits.shape[0]}"
        )
    keep = np.ones(t.shape[0], dtype=bool) if ignore_index is None else t != ignore_index
    if t[keep].size and (t[keep].min() < 0 or t[keep].max() >= logits.shape[1]):
        raise ShapeError("cross_entropy target id out of vocabulary range")
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise ShapeError("cross_entropy has no non-ignored targets")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
    per_tok = lse[:, 0] - x[np.arange(t.shape[0]), np.where(keep, t, 0)]
    loss = per_tok[keep].sum() / n_kept

    def _bw(g):
        if logits.requires_grad:
            soft = np.exp(x - lse)
            soft[np.arange(t.shape[0]), np.where(keep, t, 0)] -= 1.0
            soft[~keep] = 0.0
            _accum(logits, soft * (float(g) / n_kept))

    return _result(np.float64(loss), (logits,), _bw)


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy from logits against {0,1} targets.

    Uses the stable form max(x,0) - x*t + log1p(exp(-|x|)).
    """
    t = np.ascontiguousarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce target shape {t.shape} != logits {logits.shape}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    loss = per.sum() / n

    def _bw(g):
        if logits.requires_grad:
            _accum(logits, (_sigmoid_stable(x) - t) * (float(g) / n))

    return _result(np.float64(loss), (logits,), _bw)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        def _bw(g):
            if a.requires_grad:
                _accum(a, np.full(a.shape, float(g)))
        return _result(np.float64(a.data.sum()), (a,), _bw)
    if a.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"tsum(axis={axis}) supports 2-D tensors with axis 0 or 1")

    def _bw(g):
        if a.requires_grad:
            _accum(a, np.expand_dims(g, axis) * np.ones(a.shape))

    return _result(a.data.sum(axis=axis), (a,), _bw)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate 1-D or 2-D tensors along ``axis``; backward slices."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty list")
    nd = tensors[0].ndim
    if any(t.ndim != nd for t in tensors):
        raise ShapeError("concat operands must share rank")
    if axis < 0 or axis >= nd:
        raise ShapeError(f"concat axis {axis} invalid for rank {nd}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offs = np.cumsum([0] + extents)

    def _bw(g):
        for t, start, stop in zip(tensors, offs[:-1], offs[1:]):
            if t.requires_grad:
                sl = [slice(None)] * nd
                sl[axis] = slice(int(start), int(stop))
                _accum(t, g[tuple(sl)])

    return _result(out_data, tuple(tensors), _bw)


# -- optimizer ----------------------------------------------------------------


class AdamState:
    """First/second moment buffers plus shared timestep for a parameter set."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# -- tensor container format ---------------------------------------------------
#
# Single-file layout (all integers little endian):
#   bytes 0..3    magic b"RTCK"
#   bytes 4..7    format version, uint32 (currently 1)
#   bytes 8..11   manifest byte length M, uint32
#   bytes 12..    manifest: UTF-8 JSON
#                   {"meta": {...},
#                    "tensors": [{"name": str, "shape": [int], "offset": int}]}
#   then          data section: concatenated raw float64 little-endian
#                 buffers; "offset" is in bytes from the data section start.

_MAGIC = b"RTCK"
_FORMAT_VERSION = 1


def save_tensor_file(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus a JSON meta block to ``path``."""
    entries = []
    offset = 0
    buffers = []
    for name in tensors:
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.astype("<f8").tobytes()
        buffers.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for raw in buffers:
            fh.write(raw)


def load_tensor_file(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a file written by :func:`save_tensor_file`; validates layout."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a tensor container (bad magic)")
    version, mlen = struct.unpack("<II", blob[4:12])
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    if len(blob) < 12 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[12 : 12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest does not parse: {exc}") from exc
    data = blob[12 + mlen :]
    tensors: dict[str, np.ndarray] = {}
    expected_end = 0
    for entry in manifest.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(entry["offset"])
        stop = start + count * 8
        if stop > len(data):
            raise CheckpointError(f"{path}: buffer for '{entry['name']}' is truncated")
        arr = np.frombuffer(data[start:stop], dtype="<f8").reshape(shape).copy()
        tensors[entry["name"]] = arr
        expected_end = max(expected_end, stop)
    if expected_end != len(data):
        raise CheckpointError(f"{path}: data section length mismatch (corrupt file)")
    return tensors, manifest.get("meta", {})
