"""A small tape-based reverse-mode autodiff over numpy arrays.

Every op records its parents and a closure mapping the upstream gradient to
parent gradients.  ``backward`` replays the recorded nodes in reverse
creation order and then frees the graph.  Arithmetic is float32 by default;
``precision(np.float64)`` switches newly created tensors to 64-bit for
gradient checks.

Also here: AdamW, the cosine learning-rate schedule, a minimal Module
system and the checkpoint format.
"""
from __future__ import annotations

import contextlib
import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

_DTYPE = np.float32
_GRAD_ENABLED = True
_ids = itertools.count()


class GraphFreedError(RuntimeError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@contextlib.contextmanager
def precision(dtype):
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def default_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "_freed")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def Parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss._freed:
        raise GraphFreedError("graph already freed by a previous backward(); re-run the forward pass")
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring gradients")

    nodes, seen, stack = [], {loss._id}, [loss]
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if p._id not in seen and p.requires_grad:
                seen.add(p._id)
                stack.append(p)
    nodes.sort(key=lambda t: t._id, reverse=True)

    grads = {loss._id: np.ones_like(loss.data)}
    for t in nodes:
        g = grads.pop(t._id, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg
    for t in nodes:
        if t._backward is not None:
            t._parents = ()
            t._backward = None
            t._freed = True


# -- elementwise & shape ops -----------------------------------------------

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    return _record(np.where(pos, a.data, slope * a.data), (a,), lambda g: (np.where(pos, g, slope * g),))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _record(s, (a,), lambda g: (g * s * (1 - s),))


# -- indexing ops ------------------------------------------------------------

def gather(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError("gather index out of range")

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _record(x.data[index], (x,), bw)


def scatter_add(x: Tensor, index, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` buckets given by ``index``."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError("scatter index out of range")
    out = np.zeros((n,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, index, x.data)
    return _record(out, (x,), lambda g: (g[index],))


def spmm(S: sp.spmatrix, x: Tensor) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor.

    Gather and scatter-add are both special cases; the spline convolution
    uses this form to fuse them.
    """
    S = S.astype(x.data.dtype)
    return _record(np.asarray(S @ x.data), (x,), lambda g: (np.asarray(S.T @ g),))


# -- convolution ----------------------------------------------------------

def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Valid (no padding), stride-1 3D convolution.  x: (B, Cin, D, H, W), w: (Cout, Cin, k, k, k)."""
    B, Cin, D, H, W = x.shape
    Cout, Cin_w, kd, kh, kw = w.shape
    if Cin != Cin_w:
        raise ValueError(f"conv3d: input has {Cin} channels, weight expects {Cin_w}")
    Do, Ho, Wo = D - kd + 1, H - kh + 1, W - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kd, kh, kw), axis=(2, 3, 4))
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * Do * Ho * Wo, Cin * kd * kh * kw)
    wmat = w.data.reshape(Cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Do, Ho, Wo, Cout).transpose(0, 4, 1, 2, 3)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(-1, Cout)
        dw = (g2.T @ cols).reshape(w.shape)
        db = g2.sum(axis=0) if b is not None else None
        dcols = (g2 @ wmat).reshape(B, Do, Ho, Wo, Cin, kd, kh, kw)
        dx = np.zeros_like(x.data)
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    dx[:, :, i : i + Do, j : j + Ho, k : k + Wo] += dcols[..., i, j, k].transpose(0, 4, 1, 2, 3)
        return (dx, dw, db)

    parents = (x, w, b) if b is not None else (x, w)
    return _record(np.ascontiguousarray(out), parents, bw if b is not None else (lambda g: bw(g)[:2]))


# -- normalisation ----------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalise per channel (axis 1) over all other axes.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, like common frameworks).
    """
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = [1] * x.data.ndim
    bshape[1] = x.shape[1]
    if training:
        m = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.var(axis=axes, dtype=np.float64)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * m / max(m - 1, 1)
    else:
        mu, var = running_mean, running_var
    dt = x.data.dtype
    inv = (1.0 / np.sqrt(var + eps)).astype(dt).reshape(bshape)
    xhat = (x.data - mu.astype(dt).reshape(bshape)) * inv
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.data.size // x.shape[1]
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            dx = inv / m * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv
        return (dx, dgamma, dbeta)

    return _record(out.astype(dt), (x, gamma, beta), bw)


# -- losses -------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Weighted mean of per-row cross entropy: sum(w_y * ce) / sum(w_y)."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    total = w.sum()
    loss = -(w * logp[np.arange(n), labels]).sum() / total

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((g * p * (w / total)[:, None]).astype(logits.data.dtype),)

    return _record(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy on raw logits."""
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    z = logits.data.astype(np.float64)
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size

    def bw(g):
        s = 1.0 / (1.0 + np.exp(-z))
        return ((g * (s - y) / n).astype(logits.data.dtype),)

    return _record(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


# -- modules ------------------------------------------------------------------

class Module:
    training = True

    def named_children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def parameters(self) -> dict[str, Tensor]:
        out = {k: v for k, v in vars(self).items() if isinstance(v, Tensor) and v.requires_grad}
        for cname, child in self.named_children():
            out.update({f"{cname}.{k}": v for k, v in child.parameters().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {k: v for k, v in getattr(self, "_buffers", {}).items()}
        for cname, child in self.named_children():
            out.update({f"{cname}.{k}": v for k, v in child.buffers().items()})
        return out

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.parameters().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True):
        params, bufs = self.parameters(), self.buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if strict and missing:
            raise KeyError(f"missing keys in state dict: {sorted(missing)}")
        for k, v in state.items():
            if k in params:
                if params[k].data.shape != v.shape:
                    raise ValueError(f"shape mismatch for {k}: {params[k].data.shape} vs {v.shape}")
                params[k].data = np.array(v, dtype=params[k].data.dtype)
            elif k in bufs:
                bufs[k][...] = v
            elif strict:
                raise KeyError(f"unexpected key {k}")

    def astype(self, dtype):
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        bufs = getattr(self, "_buffers", {})
        for k in bufs:
            bufs[k] = bufs[k].astype(dtype)
        for _, child in self.named_children():
            child.astype(dtype)
        return self

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=n_out))

    def forward(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(c_in * k ** 3)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(c_out, c_in, k, k, k)))
        self.bias = Parameter(rng.uniform(-bound, bound, size=c_out))

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self._buffers = {"running_mean": np.zeros(channels, _DTYPE), "running_var": np.ones(channels, _DTYPE)}
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x, self.weight, self.bias, self._buffers["running_mean"], self._buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


# -- gradient check ---------------------------------------------------------

def grad_check(f, params: dict[str, Tensor], eps: float = 1e-5, n_samples: int | None = None, rng=None,
               floor: float = 1e-8) -> float:
    """Max relative error between backprop and central differences.

    ``f`` re-runs the forward pass and returns a scalar Tensor.  With
    ``n_samples`` only that many random coordinates per parameter are probed.
    Gradients smaller than ``floor`` are compared in absolute terms, since
    the round-off in a central difference is about 1e-16 * |f| / eps.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    backward(f())
    worst = 0.0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if n_samples is not None and flat.size > n_samples:
            coords = rng.choice(flat.size, n_samples, replace=False)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + eps
                fp = float(f().data)
                flat[c] = orig - eps
                fm = float(f().data)
            flat[c] = orig
            cd = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - cd) / max(abs(a), abs(cd), floor)
            worst = max(worst, err)
    return worst


# -- optimiser --------------------------------------------------------------

@dataclass
class OptimState:
    lr0: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyper(self) -> dict:
        return {k: getattr(self, k) for k in ("lr0", "weight_decay", "beta1", "beta2", "eps", "t")}


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState, lr: float | None = None):
    """One AdamW update, in place on ``params``; weight decay is decoupled from the moments."""
    lr = state.lr0 if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"diverged: non-finite gradient for parameter {name}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * np.square(g, dtype=np.float64)
        p *= 1.0 - lr * state.weight_decay
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params


def cosine_lr(t: int, T: int, lr0: float, eta_min: float = 1e-5) -> float:
    if T <= 0:
        raise ValueError("cosine schedule needs T > 0")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1.0 + math.cos(math.pi * t / T))


# -- checkpoints --------------------------------------------------------------
# magic "CQCK", u32 version, u64 header length, UTF-8 JSON header, then the
# little-endian float32 payload of every tensor listed in the header.

_CK_MAGIC = b"CQCK"
_CK_HEAD = struct.Struct("<4sIQ")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None,
                    optim: OptimState | None = None) -> None:
    tensors = dict(tensors)
    header_meta = dict(meta or {})
    if optim is not None:
        header_meta["optim"] = optim.hyper()
        for k in optim.m:
            tensors[f"optim.m.{k}"] = optim.m[k]
            tensors[f"optim.v.{k}"] = optim.v[k]
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": table, "meta": _jsonable(header_meta)}, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_CK_HEAD.pack(_CK_MAGIC, 1, len(header)) + header + b"".join(blobs))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, OptimState | None]:
    raw = Path(path).read_bytes()
    magic, version, hlen = _CK_HEAD.unpack_from(raw, 0)
    if magic != _CK_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    start = _CK_HEAD.size
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=base + entry["offset"])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    meta = header["meta"]
    optim = None
    if "optim" in meta:
        optim = OptimState(**meta["optim"])
        for k in list(tensors):
            if k.startswith("optim.m."):
                optim.m[k[len("optim.m."):]] = tensors.pop(k).astype(np.float64)
            elif k.startswith("optim.v."):
                optim.v[k[len("optim.v."):]] = tensors.pop(k).astype(np.float64)
    return tensors, meta, optim
