"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is CPU numpy under the hood, double precision throughout. The
op set is deliberately small: exactly what the encoders, decoder heads and
training losses need. Each op records its inputs and a backward closure on
the output tensor; ``backward(loss)`` walks the recorded graph in reverse
topological order and accumulates gradients (summing over fan-out).

Conventions:
  * feature maps are shaped (C, H, W); vectors (N,); scalars ().
  * gradients only flow into tensors created with ``requires_grad=True``
    (or derived from one). Frozen parameter sets simply carry
    ``requires_grad=False`` and never enter the tape.
  * every forward op validates that its output is finite and raises
    ``TensorError`` otherwise.
"""

from __future__ import annotations

import math
import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TensorError(ValueError):
    """Shape mismatch, non-finite values, or misuse of the tape."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _guard_finite(arr: np.ndarray, op: str) -> None:
    # np.sum propagates NaN and +-inf in one pass, cheaper than isfinite().all()
    if not math.isfinite(float(np.sum(arr))):
        raise TensorError(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-dimensional float64 array participating in a gradient tape.

    ``data`` is the row-major value buffer, ``grad`` is populated (same
    shape) after a ``backward`` pass that reaches this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._bwd = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def custom_op(out_data, parents, bwd, name: str) -> Tensor:
    """Wire an externally computed forward result into the tape.

    ``bwd(grad_out)`` must return one gradient array (or None) per parent,
    in order. Used by ops that live outside this module (e.g. the BEV
    lifting gather in the encoders).
    """
    _guard_finite(out_data, name)
    out = Tensor(out_data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
        out._op = name
    return out


class Tape:
    """Topologically ordered record of the ops reachable from a root."""

    def __init__(self, nodes):
        self.nodes = nodes  # inputs always precede the tensors they feed

    @staticmethod
    def from_root(root: Tensor) -> "Tape":
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return Tape(order)


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss; gradients sum over fan-out."""
    if loss.data.shape != ():
        raise TensorError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise TensorError("backward on a tensor outside the tape")
    tape = Tape.from_root(loss)
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if node._bwd is None or node.grad is None:
            continue
        parent_grads = node._bwd(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            # grads are never mutated in place, so aliasing views is safe
            parent.grad = g if parent.grad is None else parent.grad + g


def zero_grad(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise TensorError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def bwd(g):
        return g, g

    return custom_op(out_data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise TensorError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def bwd(g):
        return g * b.data, g * a.data

    return custom_op(out_data, (a, b), bwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = x.data * c

    def bwd(g):
        return (g * c,)

    return custom_op(out_data, (x,), bwd, "scale")


def tsum(x: Tensor) -> Tensor:
    out_data = np.sum(x.data)

    def bwd(g):
        return (np.full(x.data.shape, float(g)),)

    return custom_op(out_data, (x,), bwd, "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out_data = np.where(mask, x.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return custom_op(out_data, (x,), bwd, "relu")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    mask = x.data > 0.0
    out_data = np.where(mask, x.data, slope * x.data)

    def bwd(g):
        return (g * np.where(mask, 1.0, slope),)

    return custom_op(out_data, (x,), bwd, "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return custom_op(y, (x,), bwd, "tanh")


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(in_shape),)

    return custom_op(out_data, (x,), bwd, "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op(out_data, tuple(tensors), bwd, "concat")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of a (C, H, W) map."""
    if x.data.ndim != 3:
        raise TensorError("upsample2x expects (C, H, W)")
    out_data = x.data.repeat(2, axis=1).repeat(2, axis=2)
    c, h, w = x.data.shape

    def bwd(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return custom_op(out_data, (x,), bwd, "upsample2x")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient routes to the argmax cell."""
    if x.data.ndim != 3:
        raise TensorError("maxpool2 expects (C, H, W)")
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise TensorError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    quads = x.data.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    idx = np.argmax(quads, axis=-1)
    out_data = np.take_along_axis(quads, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dq = np.zeros((c, h2, w2, 4))
        np.put_along_axis(dq, idx[..., None], g[..., None], axis=-1)
        return (dq.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w),)

    return custom_op(out_data, (x,), bwd, "maxpool2")


def spatial_mean(x: Tensor) -> Tensor:
    """(C, H, W) -> (C,) mean over spatial positions."""
    if x.data.ndim != 3:
        raise TensorError("spatial_mean expects (C, H, W)")
    c, h, w = x.data.shape
    out_data = x.data.mean(axis=(1, 2))

    def bwd(g):
        return (np.broadcast_to(g[:, None, None] / (h * w), (c, h, w)),)

    return custom_op(out_data, (x,), bwd, "spatial_mean")


def linear(x: Tensor, w: Tensor, b: Tensor = None) -> Tensor:
    """x @ w (+ b). x is (n,) or (N, n); w is (n, m); b is (m,)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise TensorError(f"linear shape mismatch {x.data.shape} @ {w.data.shape}")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        dx = g @ w.data.T
        if x.data.ndim == 1:
            dw = np.outer(x.data, g)
            db = g
        else:
            dw = x.data.T @ g
            db = g.sum(axis=0)
        if b is None:
            return dx, dw
        return dx, dw, db

    return custom_op(out_data, parents, bwd, "linear")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cin, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cin * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, k: Tensor, bias: Tensor = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a (Cin, H, W) map with (Cout, Cin, kh, kw) filters."""
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise TensorError("conv2d expects x (Cin,H,W) and k (Cout,Cin,kh,kw)")
    cin, h, w = x.data.shape
    cout, kcin, kh, kw = k.data.shape
    if kcin != cin:
        raise TensorError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    if bias is not None and bias.data.shape != (cout,):
        raise TensorError("conv2d bias must be (Cout,)")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise TensorError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    w2 = k.data.reshape(cout, cin * kh * kw)
    out_data = (w2 @ cols).reshape(cout, ho, wo)
    if bias is not None:
        out_data += bias.data[:, None, None]
    parents = (x, k) if bias is None else (x, k, bias)

    def bwd(g):
        gm = g.reshape(cout, ho * wo)
        dk = (gm @ cols.T).reshape(cout, cin, kh, kw)
        gcol = (w2.T @ gm).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros((cin, hp, wp))
        for r in range(kh):
            for c in range(kw):
                dxp[:, r:r + stride * ho:stride, c:c + stride * wo:stride] += gcol[:, r, c]
        dx = dxp[:, pad:pad + h, pad:pad + w] if pad else dxp
        db = gm.sum(axis=1) if bias is not None else None
        if bias is None:
            return dx, dk
        return dx, dk, db

    return custom_op(out_data, parents, bwd, "conv2d")


# ---------------------------------------------------------------------------
# normalization / adapter
# ---------------------------------------------------------------------------

def channel_normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over spatial positions of a (C, H, W) map."""
    if x.data.ndim != 3:
        raise TensorError("channel_normalize expects (C, H, W)")
    c, h, w = x.data.shape
    if h * w < 2:
        raise TensorError("channel_normalize needs at least 2 spatial positions")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def bwd(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gym = np.mean(g * y, axis=(1, 2), keepdims=True)
        return ((g - gm - y * gym) * inv,)

    return custom_op(y, (x,), bwd, "channel_normalize")


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift: out[i] = gamma[i] * x[i] + beta[i]."""
    if x.data.ndim != 3:
        raise TensorError("channel_affine expects (C, H, W)")
    c = x.data.shape[0]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise TensorError(f"channel_affine params must be ({c},)")
    out_data = gamma.data[:, None, None] * x.data + beta.data[:, None, None]

    def bwd(g):
        dx = g * gamma.data[:, None, None]
        dgamma = (g * x.data).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        return dx, dgamma, dbeta

    return custom_op(out_data, (x, gamma, beta), bwd, "channel_affine")


def soft_points(x: Tensor, coords) -> Tensor:
    """Soft-argmax readout: per-channel softmax over spatial positions,
    then the expectation of the constant ``coords`` (2, H, W) under it.

    Maps (C, H, W) attention logits to (C, 2) coordinates; every output
    lies inside the convex hull of the coordinate grid.
    """
    if x.data.ndim != 3:
        raise TensorError("soft_points expects (C, H, W) logits")
    c, h, w = x.data.shape
    coords = _as_f64(coords)
    if coords.shape != (2, h, w):
        raise TensorError(f"coords must be (2, {h}, {w}), got {coords.shape}")
    z = x.data.reshape(c, h * w)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    cc = coords.reshape(2, h * w)
    out_data = p @ cc.T  # (C, 2)

    def bwd(g):
        # d out[c,:] / d x[c,i] = p[c,i] * (coords[:,i] - out[c,:])
        inner = g @ cc - np.sum(g * out_data, axis=1, keepdims=True)
        return ((p * inner).reshape(c, h, w),)

    return custom_op(out_data, (x,), bwd, "soft_points")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all entries."""
    if a.data.shape != b.data.shape:
        raise TensorError(f"mse shape mismatch {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    n = diff.size
    out_data = np.float64(np.sum(diff * diff) / n)

    def bwd(g):
        d = (2.0 / n) * diff * g
        return d, -d

    return custom_op(out_data, (a, b), bwd, "mse")


def focal_loss(logits: Tensor, targets, alpha=0.25, gamma: float = 2.0) -> Tensor:
    """Softmax focal loss, mean over rows of -alpha_t (1 - p_t)^gamma log p_t.

    ``targets`` is an integer array of class indices, one per logits row.
    When ``alpha`` is a float the LAST class is treated as the negative
    (background) class and weighted 1 - alpha; ``alpha=None`` weights all
    classes uniformly (so gamma=0, alpha=None is plain cross-entropy).
    """
    z = logits.data
    if z.ndim != 2:
        raise TensorError("focal_loss expects (N, n_classes) logits")
    n, k = z.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise TensorError(f"targets must be ({n},)")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise TensorError(f"class index out of range [0, {k})")
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.sum(np.exp(zs), axis=1, keepdims=True))
    p = np.exp(logp)
    rows = np.arange(n)
    pt = p[rows, t]
    logpt = logp[rows, t]
    if alpha is None:
        w = np.ones(n)
    else:
        w = np.where(t == k - 1, 1.0 - float(alpha), float(alpha))
    one_m = 1.0 - pt
    focal = one_m ** gamma
    out_data = np.float64(np.mean(-w * focal * logpt))

    def bwd(g):
        # dL/dp_t, then chain through softmax: dp_t/dz_j = p_t (delta - p_j)
        term = focal / pt
        if gamma > 0.0:
            term = term - gamma * one_m ** (gamma - 1.0) * logpt
        dlpt = -w * term  # dL/dp_t per row (before the 1/n mean)
        coef = (dlpt * pt)[:, None] * (float(g) / n)
        dz = coef * (-p)
        dz[rows, t] += coef[:, 0]
        return (dz,)

    return custom_op(out_data, (logits,), bwd, "focal_loss")


def l1_line_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute coordinate error between (K, 2) point sequences,
    minimized over forward/reverse ordering of the target sequence."""
    if pred.data.shape != gt.data.shape or pred.data.ndim != 2 or pred.data.shape[1] != 2:
        raise TensorError(f"l1_line_loss expects matching (K, 2) inputs, got "
                          f"{pred.data.shape} vs {gt.data.shape}")
    d_fwd = np.mean(np.abs(pred.data - gt.data))
    d_rev = np.mean(np.abs(pred.data - gt.data[::-1]))
    reverse = d_rev < d_fwd
    sel = gt.data[::-1] if reverse else gt.data
    out_data = np.float64(d_rev if reverse else d_fwd)
    n = pred.data.size

    def bwd(g):
        s = np.sign(pred.data - sel) * (float(g) / n)
        sg = -s[::-1] if reverse else -s
        return s, sg

    return custom_op(out_data, (pred, gt), bwd, "l1_line_loss")


# ---------------------------------------------------------------------------
# optimizer: AdamW with cosine-annealed learning rate
# ---------------------------------------------------------------------------

class AdamW:
    """Decoupled weight decay Adam over a named parameter dict.

    The learning rate follows a cosine schedule over ``horizon`` steps and
    clamps to the ``min_lr`` floor afterwards.
    """

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.01,
                 horizon: int = 1000, min_lr: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.base_lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.horizon = int(horizon)
        self.min_lr = float(min_lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def lr(self) -> float:
        return cosine_lr(self)

    def step(self) -> float:
        return adamw_step(self)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def cosine_lr(state: AdamW) -> float:
    """base * 0.5 * (1 + cos(pi * step / horizon)), clamped past the horizon."""
    t = min(state.step_count, state.horizon)
    raw = state.base_lr * 0.5 * (1.0 + math.cos(math.pi * t / state.horizon))
    return max(raw, state.min_lr)


def adamw_step(state: AdamW) -> float:
    """Apply one AdamW update to every trainable parameter; returns the lr used."""
    lr = cosine_lr(state)
    b1, b2 = state.betas
    t = state.step_count + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in state.params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else 0.0
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - lr * (update + state.weight_decay * p.data)
    state.step_count = t
    return lr


# ---------------------------------------------------------------------------
# .ten binary tensor files
# ---------------------------------------------------------------------------

_TEN_MAGIC = b"TEN1"


def write_ten(path, arr) -> None:
    """Write an array as a .ten file (magic, dtype code, dims, f64 payload)."""
    arr = _as_f64(arr)
    with open(path, "wb") as f:
        f.write(_TEN_MAGIC)
        f.write(struct.pack("<BB", 0, arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.tobytes(order="C"))


def read_ten(path) -> np.ndarray:
    """Read a .ten file; raises TensorError naming the file on corruption."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _TEN_MAGIC:
        raise TensorError(f"{path}: bad magic, not a .ten file")
    if len(raw) < 6:
        raise TensorError(f"{path}: truncated header")
    dtype_code, ndim = struct.unpack("<BB", raw[4:6])
    if dtype_code != 0:
        raise TensorError(f"{path}: unsupported dtype code {dtype_code}")
    head = 6 + 4 * ndim
    if len(raw) < head:
        raise TensorError(f"{path}: truncated dims, expected {head} header bytes")
    dims = struct.unpack(f"<{ndim}I", raw[6:head]) if ndim else ()
    count = 1
    for d in dims:
        count *= d
    expected = head + 8 * count
    if len(raw) != expected:
        raise TensorError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw[head:], dtype="<f8").reshape(dims).copy()
