"""Minimal reverse-mode autodiff over dense numpy arrays.

Covers exactly the operations the change-detection pipeline needs:
elementwise arithmetic with broadcasting, 2-D matmul, conv2d, bilinear
upsampling, concatenation/slicing, reductions, relu/abs, softmax
cross-entropy, plus AdamW, finite-difference gradient checking and the
MFDC checkpoint format.

Float32 is the training precision; gradient checks run the same graph at
float64 because central differences are unreliable in single precision.
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, DivergenceError, FormatError


class Tensor:
    """A dense real array plus the tape bookkeeping for backward()."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise DivergenceError(f"non-finite values in {what}")
        return self

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ContractViolation("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (the reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def make_op(out_data, parents, backward):
    """Build a result tensor for a custom primitive.

    `backward(grad)` must call parent._accumulate for every parent that
    requires grad. Used by the wavelet module for its linear transforms.
    """
    return Tensor(out_data, _parents=tuple(parents), _backward=backward)


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation(
            f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def absolute(x):
    x = _as_tensor(x)
    out_data = np.abs(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * np.sign(x.data))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def tensor_sum(x, axis=None):
    x = _as_tensor(x)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.full_like(x.data, g))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return Tensor(out_data, _parents=(x,), _backward=backward)


def tensor_mean(x, axis=None):
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tensor_sum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    x = _as_tensor(x)
    old_shape = x.shape
    out_data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(old_shape))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    x = _as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = x.data[idx].copy()

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accumulate(full)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor(out_data, _parents=tuple(tensors), _backward=backward)


def concat_channels(*feature_maps):
    """Concatenate 4-D feature maps along the channel axis."""
    if not feature_maps:
        raise ContractViolation("concat_channels needs at least one input")
    ref = feature_maps[0]
    for fm in feature_maps[1:]:
        if fm.shape[0] != ref.shape[0] or fm.shape[2:] != ref.shape[2:]:
            raise ContractViolation(
                f"concat_channels batch/spatial mismatch: {ref.shape} vs {fm.shape}")
    if len(feature_maps) == 1:
        return feature_maps[0]
    return concat(feature_maps, axis=1)


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of a B×InC×H×W map with an OutC×InC×Kh×Kw kernel."""
    x = _as_tensor(x)
    w = _as_tensor(w, like=x)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ContractViolation(
            f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1:
        raise ContractViolation(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ContractViolation(f"conv2d padding must be non-negative, got {padding}")
    B, in_c, H, W = x.shape
    out_c, w_in_c, kh, kw = w.shape
    if in_c != w_in_c:
        raise ContractViolation(
            f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    ho = (H + 2 * padding - kh) // stride + 1
    wo = (W + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ContractViolation(
            f"conv2d output would be empty for input {x.shape}, kernel {w.shape}, "
            f"stride {stride}, padding {padding}")
    if b is not None:
        b = _as_tensor(b, like=x)
        if b.shape != (out_c,):
            raise ContractViolation(
                f"conv2d bias shape {b.shape} != ({out_c},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (B*Ho*Wo, InC*Kh*Kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * ho * wo, in_c * kh * kw)
    wmat = w.data.reshape(out_c, in_c * kh * kw)
    out = (cols @ wmat.T).reshape(B, ho, wo, out_c).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * ho * wo, out_c)
        if w.requires_grad:
            w._accumulate((gmat.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = gmat @ wmat  # (B*Ho*Wo, InC*Kh*Kw)
            gcols = gcols.reshape(B, ho, wo, in_c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, i, j]
            if padding:
                gx = gxp[:, :, padding:padding + H, padding:padding + W]
            else:
                gx = gxp
            x._accumulate(gx)

    return Tensor(out, _parents=parents, _backward=backward)


_UP_MATRICES: dict[tuple[int, int, str], np.ndarray] = {}


def _up_matrix(n, factor, dtype):
    """Dense (n*factor, n) interpolation matrix, half-pixel-center convention."""
    key = (n, factor, np.dtype(dtype).str)
    cached = _UP_MATRICES.get(key)
    if cached is not None:
        return cached
    src = (np.arange(n * factor, dtype=np.float64) + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    m = np.zeros((n * factor, n), dtype=np.float64)
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0c), 1.0 - frac)
    np.add.at(m, (rows, i1c), frac)
    m = m.astype(dtype)
    _UP_MATRICES[key] = m
    return m


def _apply_axis(mat, arr, axis):
    return np.moveaxis(np.tensordot(mat, arr, axes=([1], [axis])), 0, axis)


def upsample_bilinear(x, factor):
    """Integer-factor bilinear upsampling of a B×C×H×W map."""
    x = _as_tensor(x)
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ContractViolation(f"upsample factor must be a positive int, got {factor}")
    if x.data.ndim != 4:
        raise ContractViolation(f"upsample_bilinear expects 4-D input, got {x.shape}")
    if factor == 1:
        # still a node so gradients flow, but bit-identical data
        def backward_id(g):
            if x.requires_grad:
                x._accumulate(g)
        return Tensor(x.data.copy(), _parents=(x,), _backward=backward_id)
    H, W = x.shape[2], x.shape[3]
    mh = _up_matrix(H, factor, x.dtype)
    mw = _up_matrix(W, factor, x.dtype)
    out = _apply_axis(mw, _apply_axis(mh, x.data, 2), 3)

    def backward(g):
        if x.requires_grad:
            x._accumulate(_apply_axis(mh.T, _apply_axis(mw.T, g, 3), 2))

    return Tensor(out, _parents=(x,), _backward=backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy. logits: (K,) or (B,K,H,W); labels: int scalar or (B,H,W)."""
    logits = _as_tensor(logits)
    if logits.data.ndim == 1:
        k = logits.shape[0]
        lab = int(labels)
        if not 0 <= lab < k:
            raise ContractViolation(f"label {lab} out of range [0,{k})")
        z = logits.data - logits.data.max()
        logp = z - np.log(np.exp(z).sum())
        out = -logp[lab]
        p = np.exp(logp)

        def backward(g):
            if logits.requires_grad:
                grad = p.copy()
                grad[lab] -= 1.0
                logits._accumulate(g * grad)

        return Tensor(out, _parents=(logits,), _backward=backward)

    if logits.data.ndim != 4:
        raise ContractViolation(
            f"softmax_cross_entropy expects (K,) or (B,K,H,W) logits, got {logits.shape}")
    labels = np.asarray(labels)
    B, K, H, W = logits.shape
    if labels.shape != (B, H, W):
        raise ContractViolation(
            f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = (labels < 0) | (labels >= K)
    if bad.any():
        b, i, j = [int(v[0]) for v in np.nonzero(bad)]
        raise ContractViolation(
            f"label {int(labels[b, i, j])} out of range [0,{K}) at pixel "
            f"(batch={b}, y={i}, x={j})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = B * H * W
    picked = np.take_along_axis(logp, labels[:, None, :, :], axis=1)
    out = -picked.sum() / n

    def backward(g):
        if logits.requires_grad:
            grad = np.exp(logp)
            onehot = np.zeros_like(grad)
            np.put_along_axis(onehot, labels[:, None, :, :], 1.0, axis=1)
            logits._accumulate(g * (grad - onehot) / n)

    return Tensor(out, _parents=(logits,), _backward=backward)


class Parameter:
    """Named trainable tensor with AdamW moment state."""

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def data(self):
        return self.tensor.data

    def zero_grad(self):
        self.tensor.grad = None

    def astype(self, dtype):
        self.tensor.data = self.tensor.data.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)
        return self


def adamw_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One decoupled-weight-decay Adam step over all parameters with gradients."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            g = np.zeros_like(p.tensor.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter '{p.name}'")
        p.step += 1
        if weight_decay:
            p.tensor.data -= lr * weight_decay * p.tensor.data
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    """Fan-in-scaled uniform init, bound sqrt(1/fan_in)."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def grad_check(fn, tensors, h=1e-5, sample=None, rng=None):
    """Max relative error between reverse-mode and central-difference gradients.

    `fn(*tensors)` must return a scalar Tensor; tensors must be float64.
    `sample` limits the number of coordinates checked per tensor (for
    large models); None checks every coordinate.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise ContractViolation("grad_check requires float64 tensors")
        t.zero_grad()
    out = fn(*tensors)
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    if rng is None:
        rng = np.random.default_rng(0)
    max_err = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            coords = rng.choice(n, size=sample, replace=False)
        else:
            coords = range(n)
        ga_flat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*tensors).data)
            flat[i] = orig - h
            fm = float(fn(*tensors).data)
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            a = ga_flat[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            max_err = max(max_err, err)
    return max_err


CHECKPOINT_MAGIC = b"MFDC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params):
    """Write parameters in the MFDC binary format (f32 little-endian)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            shape = p.tensor.shape
            f.write(struct.pack("<B", len(shape)))
            for extent in shape:
                f.write(struct.pack("<I", extent))
            f.write(np.ascontiguousarray(
                p.tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path, params):
    """Load MFDC values into `params` in place; validates magic/version/shapes."""
    by_name = {p.name: p for p in params}
    with open(path, "rb") as f:
        raw = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"checkpoint truncated while reading {what}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic, expected 'MFDC'")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    if count != len(by_name):
        raise FormatError(
            f"checkpoint has {count} parameters, model expects {len(by_name)}")
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        if name not in by_name:
            raise FormatError(f"checkpoint parameter '{name}' not in model")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = tuple(struct.unpack("<I", take(4, "extent"))[0] for _ in range(rank))
        p = by_name[name]
        if shape != p.tensor.shape:
            raise FormatError(
                f"shape mismatch for '{name}': checkpoint {shape}, "
                f"model {p.tensor.shape}")
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(4 * n, f"values of '{name}'"), dtype="<f4")
        p.tensor.data = values.reshape(shape).astype(p.tensor.dtype)
    if off != len(raw):
        raise FormatError("trailing bytes after last checkpoint parameter")
