"""CNN patch encoder + spline-kernel GNN processor + MLP decoder.

The encoder turns each node's 5x5x5 CT patch into a 16-vector, three
spline-convolution layers exchange information along mesh edges, and the
decoder predicts one of five distance classes per node.  The same encoder
with a 1x1x1 conv head and average pooling solves the boundary-patch
pretext task.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from . import autodiff as ad
from .autodiff import BatchNorm, Conv3d, Linear, Module, Parameter, Tensor
from .graphbuild import PATCH, GraphSample, HU_WINDOW, FILL_HU
from .grid import BinaryMask, Volume
from .perturb import make_rng

log = logging.getLogger(__name__)

N_CLASSES = 5


@dataclass(frozen=True)
class ModelConfig:
    conv_channels: tuple[int, int] = (8, 16)
    gnn_channels: tuple[int, ...] = (32, 32, 32)
    decoder_hidden: tuple[int, int] = (64, 32)
    n_classes: int = N_CLASSES
    spline_degree: int = 2
    kernel_size: int = 5
    leaky_slope: float = 0.01
    bn_momentum: float = 0.1
    use_gnn: bool = True

    def __post_init__(self):
        for name in ("conv_channels", "gnn_channels", "decoder_hidden"):
            object.__setattr__(self, name, tuple(int(c) for c in getattr(self, name)))
        if len(self.conv_channels) != 2:
            raise ValueError("encoder has exactly two conv layers")
        if self.spline_degree < 1 or self.kernel_size < self.spline_degree + 1:
            raise ValueError("need spline_degree >= 1 and kernel_size >= spline_degree + 1")
        if any(c <= 0 for c in self.conv_channels + self.gnn_channels + self.decoder_hidden):
            raise ValueError("channel counts must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    weight_decay: float = 1e-3
    eta_min: float = 1e-5
    batch_size: int = 16
    max_epochs: int = 50
    perturbations_per_image: int = 25
    pretext_batch_size: int = 64
    pretext_samples_per_epoch: int = 512
    pretext_max_epochs: int = 500
    pretext_time_limit_s: float = 600.0
    seed: int = 0
    class_weighting: str = "inverse_frequency"
    deterministic: bool = True

    def __post_init__(self):
        for name in ("lr0", "batch_size", "max_epochs", "perturbations_per_image",
                     "pretext_batch_size", "pretext_samples_per_epoch", "pretext_max_epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.eta_min < 0:
            raise ValueError("weight_decay and eta_min must be >= 0")
        if self.class_weighting not in ("inverse_frequency", "none"):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- B-spline kernel -----------------------------------------------------------

def open_uniform_knots(degree: int, n_ctrl: int) -> np.ndarray:
    """Clamped knot vector on [0, 1]: end knots repeated degree + 1 times."""
    inner = np.arange(1, n_ctrl - degree) / (n_ctrl - degree)
    return np.concatenate([np.zeros(degree + 1), inner, np.ones(degree + 1)])


def basis_1d(u, degree: int = 2, n_ctrl: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Nonzero B-spline basis values at ``u``.

    Returns (first control index (n,), values (n, degree + 1)); entry r of the
    values belongs to control point first + r.
    """
    u = np.asarray(u, dtype=np.float64)
    knots = open_uniform_knots(degree, n_ctrl)
    n_spans = n_ctrl - degree
    first = np.minimum(np.floor(u * n_spans).astype(np.int64), n_spans - 1)
    span = first + degree
    N = np.zeros(u.shape + (degree + 1,))
    N[..., 0] = 1.0
    left = np.zeros_like(N)
    right = np.zeros_like(N)
    for j in range(1, degree + 1):
        left[..., j] = u - knots[span + 1 - j]
        right[..., j] = knots[span + j] - u
        saved = np.zeros(u.shape)
        for r in range(j):
            tmp = N[..., r] / (right[..., r + 1] + left[..., j - r])
            N[..., r] = saved + right[..., r + 1] * tmp
            saved = left[..., j - r] * tmp
        N[..., j] = saved
    return first, N


def spline_basis(pseudo, degree: int = 2, kernel_size: int = 5, tol: float = 1e-9,
                 return_clamped: bool = False):
    """Tensor-product basis for 3D pseudo-coordinates.

    Returns (indices (E, (m+1)^3) into the kernel_size^3 control grid,
    weights of the same shape).  The flat control index is
    ``ix * k^2 + iy * k + iz``.  Coordinates up to ``tol`` outside [0, 1]
    are clamped; with ``return_clamped`` a third value reports whether that
    happened.
    """
    u = np.atleast_2d(np.asarray(pseudo, dtype=np.float64))
    if u.size and (u.min() < -tol or u.max() > 1 + tol):
        raise ValueError(f"pseudo-coordinates outside [0, 1]: range [{u.min():.3g}, {u.max():.3g}]")
    clamped = bool(u.size and (u.min() < 0 or u.max() > 1))
    u = np.clip(u, 0.0, 1.0)
    k = kernel_size
    m1 = degree + 1
    fx, bx = basis_1d(u[:, 0], degree, k)
    fy, by = basis_1d(u[:, 1], degree, k)
    fz, bz = basis_1d(u[:, 2], degree, k)
    r = np.arange(m1)
    ix = (fx[:, None] + r)[:, :, None, None]
    iy = (fy[:, None] + r)[:, None, :, None]
    iz = (fz[:, None] + r)[:, None, None, :]
    idx = (ix * k * k + iy * k + iz).reshape(len(u), m1 ** 3)
    w = (bx[:, :, None, None] * by[:, None, :, None] * bz[:, None, None, :]).reshape(len(u), m1 ** 3)
    return (idx, w, clamped) if return_clamped else (idx, w)


def spline_operator(edges: np.ndarray, pseudo: np.ndarray, n_nodes: int, degree: int = 2,
                    kernel_size: int = 5) -> sp.csr_matrix:
    """Sparse (N * K, N) matrix mapping node features to per-(target, control point) sums.

    Row ``i * K + c`` accumulates w_c(u_e) * x_src over edges e into node i.
    Duplicate edges add up.
    """
    K = kernel_size ** 3
    edges = np.asarray(edges, dtype=np.int64)
    if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
        raise IndexError("edge index out of range")
    idx, w = spline_basis(pseudo, degree, kernel_size)
    rows = (edges[:, 1, None] * K + idx).ravel()
    cols = np.repeat(edges[:, 0], idx.shape[1])
    return sp.csr_matrix((w.ravel(), (rows, cols)), shape=(n_nodes * K, n_nodes))


class SplineConv(Module):
    """out_i = x_i R + b + sum_{j->i} sum_c w_c(u_ji) x_j W_c."""

    def __init__(self, c_in: int, c_out: int, rng, degree: int = 2, kernel_size: int = 5):
        self.c_in, self.c_out = c_in, c_out
        self.degree, self.kernel_size = degree, kernel_size
        K = kernel_size ** 3
        bound = 1.0 / math.sqrt(c_in * (degree + 1) ** 3)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(K, c_in, c_out)))
        rb = 1.0 / math.sqrt(c_in)
        self.root = Parameter(rng.uniform(-rb, rb, size=(c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x: Tensor, S: sp.csr_matrix) -> Tensor:
        n = x.shape[0]
        if x.shape[1] != self.c_in:
            raise ValueError(f"SplineConv({self.c_in}->{self.c_out}) expects {self.c_in} input channels, got {x.shape[1]}")
        K = self.kernel_size ** 3
        z = ad.reshape(ad.spmm(S, x), (n, K * self.c_in))
        msg = ad.matmul(z, ad.reshape(self.weight, (K * self.c_in, self.c_out)))
        return ad.add(ad.add(msg, ad.matmul(x, self.root)), self.bias)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        c1, c2 = cfg.conv_channels
        self.slope = cfg.leaky_slope
        self.conv1 = Conv3d(1, c1, 3, rng)
        self.bn1 = BatchNorm(c1, cfg.bn_momentum)
        self.conv2 = Conv3d(c1, c2, 3, rng)
        self.bn2 = BatchNorm(c2, cfg.bn_momentum)
        self.out_channels = c2

    def feature_map(self, patches: Tensor) -> Tensor:
        """(B, 1, 5, 5, 5) -> (B, C, 1, 1, 1)."""
        h = self.bn1(ad.leaky_relu(self.conv1(patches), self.slope))
        return self.bn2(ad.leaky_relu(self.conv2(h), self.slope))

    def forward(self, patches: Tensor) -> Tensor:
        h = self.feature_map(patches)
        return ad.reshape(h, (h.shape[0], self.out_channels))


class ErrorNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = make_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.convs, self.norms = [], []
        width = self.encoder.out_channels
        if cfg.use_gnn:
            for c in cfg.gnn_channels:
                self.convs.append(SplineConv(width, c, rng, cfg.spline_degree, cfg.kernel_size))
                self.norms.append(BatchNorm(c, cfg.bn_momentum))
                width = c
        h1, h2 = cfg.decoder_hidden
        self.fc1 = Linear(width, h1, rng)
        self.fc2 = Linear(h1, h2, rng)
        self.fc3 = Linear(h2, cfg.n_classes, rng)

    def forward(self, batch: "GraphBatch") -> Tensor:
        s = self.cfg.leaky_slope
        if batch.patches.shape[1:] != (PATCH,) * 3:
            raise ValueError(f"encoder.conv1 expects (N, {PATCH}, {PATCH}, {PATCH}) patches, got {batch.patches.shape}")
        h = self.encoder(Tensor(batch.patches[:, None], dtype=ad.default_dtype()))
        for conv, norm in zip(self.convs, self.norms):
            h = norm(ad.leaky_relu(conv(h, batch.operator(self.cfg)), s))
        h = ad.leaky_relu(self.fc1(h), s)
        h = ad.leaky_relu(self.fc2(h), s)
        return self.fc3(h)


class PretextNet(Module):
    """Encoder + 1x1x1 conv + spatial average pooling -> one 'on boundary' logit."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = make_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.head = Conv3d(self.encoder.out_channels, 1, 1, rng)

    def forward(self, patches: Tensor) -> Tensor:
        h = self.head(self.encoder.feature_map(patches))
        return ad.reshape(ad.tmean(h, axis=(1, 2, 3, 4)), (h.shape[0],))


def encoder_state(model: Module) -> dict[str, np.ndarray]:
    return {k[len("encoder."):]: v for k, v in model.state_dict().items() if k.startswith("encoder.")}


def load_encoder(model: Module, state: dict[str, np.ndarray]) -> None:
    model.encoder.load_state_dict(state)


# -- batching -----------------------------------------------------------------

@dataclass
class GraphBatch:
    patches: np.ndarray  # (N, 5, 5, 5)
    edges: np.ndarray  # (E, 2) int64, offset per graph
    pseudo: np.ndarray  # (E, 3)
    labels: np.ndarray  # (N,)
    node_offsets: np.ndarray  # (G + 1,)
    _op: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.patches)

    def operator(self, cfg: ModelConfig) -> sp.csr_matrix:
        if self._op is None:
            self._op = spline_operator(self.edges, self.pseudo, self.n_nodes, cfg.spline_degree, cfg.kernel_size)
        return self._op

    def split(self, per_node: np.ndarray) -> list[np.ndarray]:
        o = self.node_offsets
        return [per_node[o[i] : o[i + 1]] for i in range(len(o) - 1)]


def make_batch(samples: list[GraphSample], blind_ct: bool = False) -> GraphBatch:
    counts = [s.n_nodes for s in samples]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    patches = np.concatenate([s.patches for s in samples]).astype(np.float32)
    if blind_ct:
        patches = np.zeros_like(patches)
    edges = np.concatenate([s.edges.astype(np.int64) + o for s, o in zip(samples, offsets)])
    return GraphBatch(
        patches=patches,
        edges=edges,
        pseudo=np.concatenate([s.pseudo for s in samples]),
        labels=np.concatenate([s.labels for s in samples]).astype(np.int64),
        node_offsets=offsets,
    )


# -- pretext data -------------------------------------------------------------

def boundary_voxels(mask: BinaryMask) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour."""
    struct = ndimage.generate_binary_structure(3, 1)
    return mask.data & ~ndimage.binary_erosion(mask.data, struct, border_value=0)


def off_boundary_voxels(mask: BinaryMask, min_dist: int = 3) -> np.ndarray:
    b = boundary_voxels(mask)
    dist = ndimage.distance_transform_cdt(~b, metric="taxicab")
    return (~b) & (dist >= min_dist)


def voxel_patches(ct: Volume, centres: np.ndarray) -> np.ndarray:
    """Patches centred on integer voxel indices, windowed like graph patches."""
    r = PATCH // 2
    padded = np.pad(ct.data, r, mode="constant", constant_values=FILL_HU)
    off = np.arange(PATCH)
    c = np.asarray(centres, dtype=np.int64)
    vals = padded[
        c[:, 0, None, None, None] + off[None, :, None, None],
        c[:, 1, None, None, None] + off[None, None, :, None],
        c[:, 2, None, None, None] + off[None, None, None, :],
    ].astype(np.float64)
    lo, hi = HU_WINDOW
    return ((np.clip(vals, lo, hi) - lo) / (hi - lo) * 2.0 - 1.0).astype(np.float32)


@dataclass
class PretextPool:
    """Candidate centres for one phantom, computed once."""

    ct: Volume
    on: np.ndarray  # (n_on, 3) voxel indices
    off: np.ndarray  # (n_off, 3)

    @classmethod
    def from_phantom(cls, ct: Volume, mask: BinaryMask) -> "PretextPool":
        if mask.count == 0 or mask.count == mask.data.size:
            raise ValueError("degenerate mask")
        return cls(ct, np.argwhere(boundary_voxels(mask)), np.argwhere(off_boundary_voxels(mask)))


def sample_pretext_patches(ct: Volume, mask: BinaryMask, n: int, seed: int, pool: PretextPool | None = None):
    """n patches, exactly n // 2 centred on boundary voxels and the rest off it.

    Returns (patches (n, 5, 5, 5), labels (n,), centres (n, 3), resampled flag);
    the flag is set when a class had fewer candidates than requested and was
    drawn with replacement.
    """
    pool = pool or PretextPool.from_phantom(ct, mask)
    rng = make_rng(seed)
    n_on = n // 2
    n_off = n - n_on
    flag = False
    picks = []
    for cand, k in ((pool.on, n_on), (pool.off, n_off)):
        replace = len(cand) < k
        flag |= replace
        picks.append(cand[rng.choice(len(cand), k, replace=replace)])
    centres = np.concatenate(picks)
    labels = np.concatenate([np.ones(n_on), np.zeros(n_off)]).astype(np.float32)
    return voxel_patches(ct, centres), labels, centres, flag


def _pretext_draw(pools: list[PretextPool], n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    owner = rng.integers(0, len(pools), size=n)
    patches, labels = [], []
    for i, pool in enumerate(pools):
        k = int((owner == i).sum())
        if k == 0:
            continue
        p, y, _, _ = sample_pretext_patches(pool.ct, None, k, int(rng.integers(2 ** 62)), pool=pool)
        patches.append(p)
        labels.append(y)
    return np.concatenate(patches), np.concatenate(labels)


def pretext_accuracy(model: PretextNet, patches: np.ndarray, labels: np.ndarray) -> float:
    model.eval()
    with ad.no_grad():
        logit = model(Tensor(patches[:, None])).data
    model.train()
    return float(((logit > 0) == (labels > 0.5)).mean())


def pretrain_encoder(train_pools: list[PretextPool], val_pools: list[PretextPool], model_cfg: ModelConfig,
                     train_cfg: TrainConfig, n_val: int = 1024):
    """Train the pretext model; returns (model, history, final held-out accuracy)."""
    rng = make_rng(train_cfg.seed)
    model = PretextNet(model_cfg, seed=train_cfg.seed)
    state = ad.OptimState(lr0=train_cfg.lr0, weight_decay=train_cfg.weight_decay)
    val_x, val_y = _pretext_draw(val_pools, n_val, make_rng(train_cfg.seed + 1))
    steps_per_epoch = max(1, train_cfg.pretext_samples_per_epoch // train_cfg.pretext_batch_size)
    total = steps_per_epoch * train_cfg.pretext_max_epochs
    history = []
    step = 0
    start = time.perf_counter()
    for epoch in range(train_cfg.pretext_max_epochs):
        x, y = _pretext_draw(train_pools, train_cfg.pretext_samples_per_epoch, rng)
        order = rng.permutation(len(y))
        losses = []
        for b in range(steps_per_epoch):
            sel = order[b * train_cfg.pretext_batch_size : (b + 1) * train_cfg.pretext_batch_size]
            lr = ad.cosine_lr(step + 1, total, train_cfg.lr0, train_cfg.eta_min)
            model.zero_grad()
            loss = ad.bce_with_logits(model(Tensor(x[sel][:, None])), y[sel])
            if not np.isfinite(loss.data):
                raise ad.DivergenceError("diverged: non-finite pretext loss", state=model.state_dict())
            ad.backward(loss)
            params = model.parameters()
            ad.adamw_step({k: p.data for k, p in params.items()},
                          {k: p.grad for k, p in params.items() if p.grad is not None}, state, lr)
            losses.append(float(loss.data))
            step += 1
        if epoch % 10 == 0 or epoch == train_cfg.pretext_max_epochs - 1:
            acc = pretext_accuracy(model, val_x, val_y)
            history.append({"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_acc": acc})
            log.info("stage=pretrain epoch=%d loss=%.4f val_acc=%.3f", epoch, np.mean(losses), acc)
        if time.perf_counter() - start > train_cfg.pretext_time_limit_s:
            log.info("stage=pretrain time limit reached at epoch=%d", epoch)
            break
    return model, history, pretext_accuracy(model, val_x, val_y)


# -- error-prediction training -----------------------------------------------

def class_weights(labels: np.ndarray, n_classes: int = N_CLASSES, lo: float = 0.2, hi: float = 5.0) -> np.ndarray:
    """Inverse class frequency, clipped to [lo, hi], then rescaled to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes).astype(np.float64)
    freq = counts / counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(freq > 0, 1.0 / (n_classes * freq), hi)
    w = np.clip(w, lo, hi)
    return w / w.mean()


def evaluate_loss(model: ErrorNet, samples: list[GraphSample], weights, batch_size: int = 16,
                  blind_ct: bool = False) -> tuple[float, float]:
    """Weighted CE and plain node accuracy in inference mode."""
    model.eval()
    tot_loss = tot_w = correct = n = 0.0
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = make_batch(samples[i : i + batch_size], blind_ct)
            logits = model(batch)
            w = np.asarray(weights)[batch.labels]
            loss = float(ad.softmax_cross_entropy(logits, batch.labels, weights).data)
            tot_loss += loss * w.sum()
            tot_w += w.sum()
            correct += float((logits.data.argmax(1) == batch.labels).sum())
            n += len(batch.labels)
    model.train()
    return tot_loss / tot_w, correct / n


def predict(model: ErrorNet, samples: list[GraphSample], batch_size: int = 16, blind_ct: bool = False) -> list[np.ndarray]:
    model.eval()
    out = []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = make_batch(samples[i : i + batch_size], blind_ct)
            out += batch.split(model(batch).data.argmax(axis=1))
    model.train()
    return out


@dataclass
class TrainResult:
    model: ErrorNet
    history: list[dict]
    best_val_loss: float
    weights: np.ndarray
    optim: ad.OptimState


def train_error_net(train: dict[int, list[GraphSample]], val: list[GraphSample], model_cfg: ModelConfig,
                    train_cfg: TrainConfig, encoder_init: dict | None = None, blind_ct: bool = False,
                    on_epoch=None, stop_after: int | None = None) -> TrainResult:
    """Train on ``train`` (structure id -> its perturbed samples), select by validation loss.

    Each epoch draws ``perturbations_per_image`` samples per structure.  The
    returned model holds the parameters of the best validation epoch.
    ``stop_after`` ends the run early without changing the learning-rate
    schedule, which is always laid out for ``max_epochs``.
    """
    if not train or not val:
        raise ValueError("need non-empty train and validation splits")
    rng = make_rng(train_cfg.seed)
    model = ErrorNet(model_cfg, seed=train_cfg.seed)
    if encoder_init is not None:
        load_encoder(model, encoder_init)

    all_labels = np.concatenate([s.labels for group in train.values() for s in group])
    if train_cfg.class_weighting == "inverse_frequency":
        weights = class_weights(all_labels, model_cfg.n_classes)
    else:
        weights = np.ones(model_cfg.n_classes)

    per_epoch = sum(min(train_cfg.perturbations_per_image, len(g)) for g in train.values())
    steps_per_epoch = math.ceil(per_epoch / train_cfg.batch_size)
    total = steps_per_epoch * train_cfg.max_epochs
    state = ad.OptimState(lr0=train_cfg.lr0, weight_decay=train_cfg.weight_decay)

    history = []
    best = (np.inf, None)
    step = 0
    last_good = model.state_dict()
    ids = sorted(train)
    n_epochs = train_cfg.max_epochs if stop_after is None else min(stop_after, train_cfg.max_epochs)
    for epoch in range(n_epochs):
        chosen = []
        for sid in ids:
            group = train[sid]
            k = min(train_cfg.perturbations_per_image, len(group))
            chosen += [group[j] for j in rng.choice(len(group), k, replace=False)]
        order = rng.permutation(len(chosen))
        losses = []
        t0 = time.perf_counter()
        for b in range(steps_per_epoch):
            sel = [chosen[j] for j in order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]]
            batch = make_batch(sel, blind_ct)
            model.zero_grad()
            loss = ad.softmax_cross_entropy(model(batch), batch.labels, weights)
            if not np.isfinite(loss.data):
                raise ad.DivergenceError(f"diverged: non-finite loss at epoch {epoch}", state=last_good)
            ad.backward(loss)
            lr = ad.cosine_lr(step + 1, total, train_cfg.lr0, train_cfg.eta_min)
            params = model.parameters()
            ad.adamw_step({k: p.data for k, p in params.items()},
                          {k: p.grad for k, p in params.items() if p.grad is not None}, state, lr)
            if not all(np.isfinite(p.data).all() for p in params.values()):
                raise ad.DivergenceError(f"diverged: non-finite parameters at epoch {epoch}", state=last_good)
            losses.append(float(loss.data))
            step += 1
        last_good = model.state_dict()
        val_loss, val_acc = evaluate_loss(model, val, weights, train_cfg.batch_size, blind_ct)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_loss": val_loss,
               "val_acc": val_acc}
        history.append(row)
        log.info("stage=train epoch=%d lr=%.2e train_loss=%.4f val_loss=%.4f val_acc=%.3f secs=%.1f",
                 epoch, lr, row["train_loss"], val_loss, val_acc, time.perf_counter() - t0)
        if val_loss < best[0]:
            best = (val_loss, model.state_dict())
        if on_epoch is not None:
            on_epoch(row, model)
    model.load_state_dict(best[1])
    return TrainResult(model, history, best[0], weights, state)
