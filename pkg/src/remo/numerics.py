"""Dense-array engine: reverse-mode differentiation, layers, Adam.

Tensors wrap contiguous numpy arrays. While a Tape is active, every
primitive appends its backward rule in execution order, so one reverse
sweep over the tape yields gradients for all reachable parameters.
Shapes are explicit: the only implicit broadcast allowed is adding a
(d,) bias to an (n, d) matrix.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # Small operator sugar; all routed through the primitives below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Execution-ordered record of primitives for one reverse pass."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _STACK.append(self)
        return self

    def __exit__(self, *exc):
        _STACK.pop()


_STACK: list[Tape] = []


def _active() -> Tape | None:
    return _STACK[-1] if _STACK else None


def _record(out: Tensor, backward_fn: Callable) -> None:
    tape = _active()
    if tape is not None and out.requires_grad:
        tape.nodes.append((out, backward_fn))


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of ``loss`` w.r.t. every tensor reachable on the tape.

    Returns a map keyed by ``id(tensor)``; parameters absent from the map
    simply did not influence the loss. The tape is consumed: a second
    pass over it is an error.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape._consumed:
        raise RuntimeError("tape already consumed by a backward pass")
    tape._consumed = True
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)}

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    for out, backward_fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        backward_fn(g, accumulate)
    return grads


def _needs(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    bias_add = a.data.ndim == 2 and b.data.ndim == 1 \
        and a.shape[1] == b.shape[0]
    if not bias_add and a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data, _needs(a, b))

    def bwd(g, acc):
        acc(a, g)
        acc(b, g.sum(axis=0) if bias_add else g)

    _record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data, _needs(a, b))

    def bwd(g, acc):
        acc(a, g)
        acc(b, -g)

    _record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data, _needs(a, b))

    def bwd(g, acc):
        acc(a, g * b.data)
        acc(b, g * a.data)

    _record(out, bwd)
    return out


def scale(x: Tensor, s: "Tensor | float") -> Tensor:
    """Multiply by a python float or a scalar (size-1) tensor."""
    if isinstance(s, Tensor):
        if s.data.size != 1:
            raise ShapeError(f"scale factor must be scalar, got {s.shape}")
        out = Tensor(x.data * s.data.reshape(()), _needs(x, s))

        def bwd(g, acc):
            acc(x, g * s.data.reshape(()))
            acc(s, np.asarray(np.sum(g * x.data), dtype=s.dtype).reshape(s.shape))

        _record(out, bwd)
        return out
    out = Tensor(x.data * s, x.requires_grad)
    _record(out, lambda g, acc: acc(x, g * s))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data, _needs(a, b))

    def bwd(g, acc):
        acc(a, g @ b.data.T)
        acc(b, a.data.T @ g)

    _record(out, bwd)
    return out


def transpose(x: Tensor) -> Tensor:
    out = Tensor(x.data.T, x.requires_grad)
    _record(out, lambda g, acc: acc(x, g.T))
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape), x.requires_grad)
    _record(out, lambda g, acc: acc(x, g.reshape(x.shape)))
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), x.requires_grad)
    _record(out, lambda g, acc: acc(x, g * (x.data > 0)))
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data), x.requires_grad)
    _record(out, lambda g, acc: acc(x, g / x.data))
    return out


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data), x.requires_grad)
    _record(out, lambda g, acc: acc(x, g / (2.0 * out.data)))
    return out


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data, x.requires_grad)
    _record(out, lambda g, acc: acc(x, g * 2.0 * x.data))
    return out


def mean(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype), x.requires_grad)
    _record(out, lambda g, acc: acc(
        x, np.full_like(x.data, g / x.data.size)))
    return out


def total(x: Tensor) -> Tensor:
    """Sum of all elements (scalar)."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype), x.requires_grad)
    _record(out, lambda g, acc: acc(x, np.full_like(x.data, g)))
    return out


def mean_rows(x: Tensor) -> Tensor:
    """Column means of a 2-D tensor, kept as a (1, d) row."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows: need 2-D, got {x.shape}")
    n = x.shape[0]
    out = Tensor(x.data.mean(axis=0, keepdims=True), x.requires_grad)
    _record(out, lambda g, acc: acc(x, np.repeat(g / n, n, axis=0)))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _needs(*tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, acc):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            acc(t, piece)

    _record(out, bwd)
    return out


def lookup(table: Tensor, idx) -> Tensor:
    """Embedding lookup: (V, d) table gathered by a 1-D index array."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"lookup: index must be 1-D, got {idx.shape}")
    out = Tensor(table.data[idx], table.requires_grad)

    def bwd(g, acc):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        acc(table, dt)

    _record(out, bwd)
    return out


def take_rows(x: Tensor, idx) -> Tensor:
    return lookup(x, idx)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Tile a (1, d) row into (n, d)."""
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"repeat_rows: need (1, d), got {x.shape}")
    out = Tensor(np.repeat(x.data, n, axis=0), x.requires_grad)
    _record(out, lambda g, acc: acc(x, g.sum(axis=0, keepdims=True)))
    return out


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols: need 2-D, got {x.shape}")
    out = Tensor(x.data[:, start:stop], x.requires_grad)

    def bwd(g, acc):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        acc(x, dx)

    _record(out, bwd)
    return out


def scatter_sum(values: Tensor, idx, size: int) -> Tensor:
    """Sum 1-D values into a length-``size`` vector at positions ``idx``."""
    idx = np.asarray(idx, dtype=np.int64)
    if values.data.ndim != 1 or idx.shape != values.shape:
        raise ShapeError(
            f"scatter_sum: values {values.shape} vs idx {idx.shape}")
    data = np.zeros(size, dtype=values.dtype)
    np.add.at(data, idx, values.data)
    out = Tensor(data, values.requires_grad)
    _record(out, lambda g, acc: acc(values, g[idx]))
    return out


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, x.requires_grad)

    def bwd(g, acc):
        dot = (g * p).sum(axis=-1, keepdims=True)
        acc(x, p * (g - dot))

    _record(out, bwd)
    return out


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse, x.requires_grad)
    p = np.exp(out.data)

    def bwd(g, acc):
        acc(x, g - p * g.sum(axis=-1, keepdims=True))

    _record(out, bwd)
    return out


def gather_labels(x: Tensor, labels) -> Tensor:
    """Pick x[i, labels[i]] for each row -> 1-D vector."""
    labels = np.asarray(labels, dtype=np.int64)
    if x.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_labels: {x.shape} with labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[1]):
        raise IndexError("label index out of range")
    rows = np.arange(x.shape[0])
    out = Tensor(x.data[rows, labels], x.requires_grad)

    def bwd(g, acc):
        dx = np.zeros_like(x.data)
        dx[rows, labels] = g
        acc(x, dx)

    _record(out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: need 2-D, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, _needs(x, gain, bias))

    def bwd(g, acc):
        acc(bias, g.sum(axis=0))
        acc(gain, (g * xhat).sum(axis=0))
        gx = g * gain.data
        d = x.shape[1]
        acc(x, inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    _record(out, bwd)
    return out


def nll_sum(logits: Tensor, targets) -> Tensor:
    """Sum of negative log-likelihoods over rows of a logits matrix."""
    return scale(total(gather_labels(log_softmax(logits), targets)), -1.0)


# ---------------------------------------------------------------------------
# Parameters and optimization
# ---------------------------------------------------------------------------

def glorot_uniform(shape: tuple[int, int], rng: np.random.Generator,
                   dtype=DEFAULT_DTYPE) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


INIT_SCHEME = "glorot_uniform(w), zeros(b), normal(0,0.02)(embedding)"


class ParameterStore:
    """Named trainable tensors plus per-parameter Adam state."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.ascontiguousarray(array, dtype=self.dtype),
                   requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        self._t[name] = 0
        return t

    def weight(self, name: str, shape: tuple[int, int],
               rng: np.random.Generator) -> Tensor:
        return self.add(name, glorot_uniform(shape, rng, self.dtype))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape, dtype=self.dtype))

    def embedding(self, name: str, shape,
                  rng: np.random.Generator) -> Tensor:
        return self.add(name, rng.normal(0.0, 0.02, size=shape)
                        .astype(self.dtype))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self.params[k].data = arr.copy()

    def grads_by_name(self, grads: dict[int, np.ndarray],
                      trainable: "set[str] | None" = None,
                      ) -> dict[str, np.ndarray]:
        """Resolve a backward() result to parameter names.

        Parameters unreachable from the loss get zero gradients.
        """
        out = {}
        for name, p in self.params.items():
            if trainable is not None and name not in trainable:
                continue
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else g
        return out


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray],
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"non-finite gradient for parameter {name!r}; step aborted")
    for name, g in grads.items():
        p = store.params[name]
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter {name!r} {p.shape}")
        store._t[name] += 1
        t = store._t[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

def init_mlp(store: ParameterStore, prefix: str, sizes: Sequence[int],
             rng: np.random.Generator) -> None:
    """Affine stack params: sizes = (in, hidden..., out)."""
    for k in range(len(sizes) - 1):
        store.weight(f"{prefix}.w{k}", (sizes[k], sizes[k + 1]), rng)
        store.zeros(f"{prefix}.b{k}", sizes[k + 1])


def mlp_forward(store: ParameterStore, x: Tensor, prefix: str,
                n_layers: int) -> Tensor:
    """ReLU between affine layers, linear output (logits)."""
    h = x
    for k in range(n_layers):
        h = add(matmul(h, store[f"{prefix}.w{k}"]), store[f"{prefix}.b{k}"])
        if k < n_layers - 1:
            h = relu(h)
    return h


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _stem(path: str | Path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def save_checkpoint(path: str | Path, store: ParameterStore,
                    meta: dict | None = None,
                    include_adam: bool = False) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian
    IEEE-754 blob, entries in manifest order)."""
    stem = _stem(path)
    precision = {"float32": "float32", "float64": "float64"}[store.dtype.name]
    wire = "<f4" if precision == "float32" else "<f8"
    entries = []
    blob = bytearray()
    rows: list[tuple[str, str, np.ndarray]] = [
        (name, "param", t.data) for name, t in store.params.items()]
    if include_adam:
        rows += [(name, "adam_m", store._m[name]) for name in store.params]
        rows += [(name, "adam_v", store._v[name]) for name in store.params]
    for name, role, arr in rows:
        raw = np.ascontiguousarray(arr, dtype=wire).tobytes()
        entries.append({"name": name, "role": role,
                        "shape": list(arr.shape), "offset": len(blob)})
        blob.extend(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "precision": precision,
        "init_scheme": INIT_SCHEME,
        "meta": meta or {},
        "adam_step": store._t if include_adam else None,
        "entries": entries,
    }
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    stem.with_suffix(".bin").write_bytes(bytes(blob))
    return stem


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    """Rebuild a ParameterStore (and optional Adam state) from disk."""
    stem = _stem(path)
    manifest = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    precision = manifest["precision"]
    dtype = np.float32 if precision == "float32" else np.float64
    wire = "<f4" if precision == "float32" else "<f8"
    itemsize = struct.calcsize("f") if precision == "float32" else struct.calcsize("d")
    blob = stem.with_suffix(".bin").read_bytes()
    store = ParameterStore(dtype)
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype=wire, count=count, offset=start)
        arr = arr.reshape(shape).astype(dtype)
        if entry["role"] == "param":
            store.add(entry["name"], arr)
        elif entry["role"] == "adam_m":
            store._m[entry["name"]] = arr.copy()
        elif entry["role"] == "adam_v":
            store._v[entry["name"]] = arr.copy()
    if manifest.get("adam_step"):
        store._t.update({k: int(v) for k, v in manifest["adam_step"].items()})
    return store, manifest["meta"]


__all__ = [
    "Tensor", "Tape", "ParameterStore", "ShapeError", "DEFAULT_DTYPE",
    "INIT_SCHEME",
    "constant", "backward", "add", "sub", "mul", "scale", "matmul",
    "transpose", "reshape", "relu", "log", "sqrt", "square", "mean",
    "total", "mean_rows", "concat", "lookup", "take_rows", "repeat_rows",
    "slice_cols", "scatter_sum", "softmax", "log_softmax", "gather_labels",
    "layer_norm", "nll_sum", "glorot_uniform", "adam_step", "init_mlp",
    "mlp_forward", "save_checkpoint", "load_checkpoint",
]
