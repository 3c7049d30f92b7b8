"""
Dense tensor math and reverse-mode gradients for small networks.

Tensors wrap numpy arrays (float32 by default). Operations executed while a
GradTape is active are recorded together with a backward closure; calling
backward() replays the tape in reverse and returns one gradient per parameter.
"""

import logging
import threading
import zlib

import numpy as np

from errors import NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

# Constants
DTYPE = np.float32
RNG_ALGORITHM = "PCG64"

_tape_state = threading.local()


# ============================================================================
# Tensor and Rng
# ============================================================================

class Tensor:
    """
    Dense n-dimensional array with shape metadata.

    Args:
        data: array-like values (copied)
        requires_grad: True for trainable parameters
        name: optional label used in error messages and checkpoints
        dtype: floating dtype, float32 unless a caller asks for float64
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=DTYPE):
        arr = np.array(data, dtype=dtype)
        _ensure_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return int(self.data.size)

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype):
        """Detached copy with another floating dtype (keeps requires_grad)"""
        return Tensor(self.data, requires_grad=self.requires_grad, name=self.name, dtype=dtype)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{label} dtype={self.dtype})"


def constant(data, like=None, dtype=DTYPE):
    """Tensor that never receives gradients; dtype follows `like` when given"""
    return Tensor(data, dtype=like.dtype if like is not None else dtype)


class Rng:
    """
    Seeded generator. Draws come from numpy's PCG64 bit generator, whose
    stream is fixed for a given seed on every platform.

    Args:
        seed: unsigned 64-bit seed
    """

    def __init__(self, seed):
        seed = int(seed)
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.generator = np.random.Generator(np.random.PCG64(seed))

    def derive(self, tag):
        """Independent child generator for one purpose, e.g. 'data.train'"""
        sequence = np.random.SeedSequence([self.seed, zlib.crc32(tag.encode("utf-8"))])
        child_seed = int(sequence.generate_state(1, dtype=np.uint64)[0])
        return Rng(child_seed)

    def normal(self, shape, scale=1.0):
        return self.generator.normal(0.0, scale, size=shape)

    def uniform(self, shape, low=0.0, high=1.0):
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low, high, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, n, size, p=None):
        return self.generator.choice(n, size=size, p=p)


# ============================================================================
# Gradient tape
# ============================================================================

class GradTape:
    """
    Records operations executed inside a `with GradTape() as tape:` block.
    A tape belongs to a single thread.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        _active_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_stack().remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, parents, backward_fn):
        out.requires_grad = True
        out._tape = self
        self._records.append((out, parents, backward_fn))


def _active_stack():
    if not hasattr(_tape_state, "stack"):
        _tape_state.stack = []
    return _tape_state.stack


def _active_tape():
    stack = _active_stack()
    return stack[-1] if stack else None


def _result(array, parents, backward_fn, op_name):
    """Wrap an op result and record it when a parent needs gradients"""
    out = Tensor.__new__(Tensor)
    _ensure_finite(array, op_name)
    out.data = array
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._tape = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def backward(loss, tape, params):
    """
    Gradients of a scalar loss with respect to each parameter.

    Args:
        loss: single-element Tensor produced under `tape`
        tape: GradTape that recorded the forward computation
        params: list of parameter Tensors

    Returns:
        list of numpy arrays, one per parameter, each shaped like the parameter
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    if not loss.requires_grad:
        grads = [np.zeros_like(p.data) for p in params]
        for p, g in zip(params, grads):
            p.grad = g
        return grads

    if loss._tape is not tape:
        raise TapeError("loss was not recorded on the tape passed to backward")

    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, backward_fn in reversed(tape._records):
        g = grads.get(id(out))
        if g is None:
            continue
        parent_grads = backward_fn(g)
        for parent, pg in zip(parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    result = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        p.grad = g
        result.append(g)
    return result


def sgd_step(params, grads, alpha):
    """
    In-place update p <- p - alpha * g for every parameter.

    Args:
        params: list of parameter Tensors
        grads: list of gradient arrays (same order and shapes)
        alpha: learning rate, must not be negative

    Returns:
        list: the updated parameters

    Raises:
        NumericError: if any update is non-finite; no parameter is modified then
    """
    if alpha < 0:
        raise ValueError(f"learning rate must be non-negative, got {alpha}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    updates = []
    for p, g in zip(params, grads):
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        updated = p.data - np.asarray(alpha, dtype=p.dtype) * g.astype(p.dtype)
        _ensure_finite(updated, p.name or "parameter update")
        updates.append(updated)
    for p, updated in zip(params, updates):
        p.data = updated
    return params


# ============================================================================
# Elementwise and reduction ops
# ============================================================================

def _ensure_finite(array, what):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values produced by {what}")


def _dtype_of(*tensors):
    return np.result_type(*[t.dtype for t in tensors])


def add(a, b):
    """Elementwise a + b; b may also be a bias vector matching a's last axis"""
    bias = b.ndim == 1 and a.ndim > 1 and b.shape[0] == a.shape[-1]
    if a.shape != b.shape and not bias:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not agree")
    out = (a.data + b.data).astype(_dtype_of(a, b))

    def backward_fn(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g
        return g, gb

    return _result(out, (a, b), backward_fn, "add")


def sub(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not agree")
    out = (a.data - b.data).astype(_dtype_of(a, b))
    return _result(out, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not agree")
    out = (a.data * b.data).astype(_dtype_of(a, b))
    return _result(out, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, k):
    k = float(k)
    out = (a.data * np.asarray(k, dtype=a.dtype)).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * k,), "scale")


def add_scalar(a, k):
    out = (a.data + np.asarray(k, dtype=a.dtype)).astype(a.dtype)
    return _result(out, (a,), lambda g: (g,), "add_scalar")


def log(a):
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def relu(a):
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype)
    return _result(out, (a,), lambda g: (g * mask,), "relu")


def tensor_sum(a, axis=None):
    """Sum over one axis (or all elements when axis is None)"""
    out = np.asarray(a.data.astype(np.float64).sum(axis=axis), dtype=a.dtype)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(out, (a,), backward_fn, "sum")


def mean(a):
    n = a.size
    return scale(tensor_sum(a), 1.0 / n)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a):
    """Keep the leading batch axis and flatten the rest"""
    return reshape(a, (a.shape[0], -1))


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    out = a.data.T.copy()
    return _result(out, (a,), lambda g: (g.T.copy(),), "transpose")


def pick(a, index):
    """Row-wise gather a[b, index[b]] for a 2-D tensor"""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: tensor {a.shape} with index {index.shape}")
    if np.any(index < 0) or np.any(index >= a.shape[1]):
        raise ShapeError(f"pick: index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])
    out = a.data[rows, index]

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[rows, index] = g
        return (ga,)

    return _result(out, (a,), backward_fn, "pick")


def crop2d(x, rows, cols):
    """Spatial window x[..., r0:r1, c0:c1] of a [B, C, H, W] or [C, H, W] tensor"""
    r0, r1 = rows
    c0, c1 = cols
    h, w = x.shape[-2], x.shape[-1]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ShapeError(f"crop rows={rows} cols={cols} outside a {h}x{w} input")
    out = x.data[..., r0:r1, c0:c1].copy()

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[..., r0:r1, c0:c1] = g
        return (gx,)

    return _result(out, (x,), backward_fn, "crop2d")


# ============================================================================
# Linear algebra
# ============================================================================

def matmul(a, b):
    """
    Matrix product of a [r x k] and b [k x c]. Products accumulate in
    float64 and are rounded back to the inputs' dtype.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    dtype = _dtype_of(a, b)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = (a64 @ b64).astype(dtype)

    def backward_fn(g):
        g64 = g.astype(np.float64)
        return (g64 @ b64.T).astype(dtype), (a64.T @ g64).astype(dtype)

    return _result(out, (a, b), backward_fn, "matmul")


def conv2d(x, kernels, stride=1):
    """
    Valid (no padding) 2-D convolution.

    Args:
        x: input [C, H, W] or batch [B, C, H, W]
        kernels: filters [F, C, kh, kw]
        stride: step between windows (>= 1)

    Returns:
        Tensor [F, H', W'] (or [B, F, H', W']) with H' = (H - kh) // stride + 1
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernels {kernels.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, w = xd.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {kc}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")

    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    dtype = _dtype_of(x, kernels)
    x64 = xd.astype(np.float64)
    k64 = kernels.data.astype(np.float64)
    windows = np.lib.stride_tricks.sliding_window_view(x64, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.einsum("bchwij,fcij->bfhw", windows, k64).astype(dtype)
    if single:
        out = out[0]

    def backward_fn(g):
        g64 = (g[None] if single else g).astype(np.float64)
        gk = np.einsum("bfhw,bchwij->fcij", g64, windows)
        gx = np.zeros_like(x64)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + stride * (ho - 1) + 1, stride)
                cols = slice(j, j + stride * (wo - 1) + 1, stride)
                gx[:, :, rows, cols] += np.einsum("bfhw,fc->bchw", g64, k64[:, :, i, j])
        if single:
            gx = gx[0]
        return gx.astype(dtype), gk.astype(dtype)

    return _result(out, (x, kernels), backward_fn, "conv2d")


# ============================================================================
# Probability ops and losses
# ============================================================================

def softmax(a):
    """Softmax over the final axis"""
    z = a.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s64 = e / e.sum(axis=-1, keepdims=True)
    s = s64.astype(a.dtype)

    def backward_fn(g):
        g64 = g.astype(np.float64)
        inner = (g64 * s64).sum(axis=-1, keepdims=True)
        return ((s64 * (g64 - inner)).astype(a.dtype),)

    return _result(s, (a,), backward_fn, "softmax")


def log_softmax(a):
    z = a.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out64 = z - lse
    probs = np.exp(out64)

    def backward_fn(g):
        g64 = g.astype(np.float64)
        return ((g64 - probs * g64.sum(axis=-1, keepdims=True)).astype(a.dtype),)

    return _result(out64.astype(a.dtype), (a,), backward_fn, "log_softmax")


def l2_normalize(a, allow_zero=False):
    """
    Scale every vector along the final axis to unit L2 norm.

    A zero vector raises NumericError unless allow_zero is set; then it
    stays a zero vector and receives no gradient.
    """
    x64 = a.data.astype(np.float64)
    norm = np.sqrt((x64 * x64).sum(axis=-1, keepdims=True))
    zero = norm == 0
    if np.any(zero) and not allow_zero:
        raise NumericError("l2_normalize: zero-norm vector")
    safe = np.where(zero, 1.0, norm)
    y64 = x64 / safe

    def backward_fn(g):
        g64 = g.astype(np.float64)
        inner = (g64 * y64).sum(axis=-1, keepdims=True)
        gx = np.where(zero, 0.0, (g64 - y64 * inner) / safe)
        return (gx.astype(a.dtype),)

    return _result(y64.astype(a.dtype), (a,), backward_fn, "l2_normalize")


def cross_entropy(logits, labels):
    """
    Mean of -log softmax(logits)[label] over the batch.

    Args:
        logits: [B, C] batch or a single [C] vector
        labels: integer class indices ([B] or scalar), or one-hot rows

    Returns:
        scalar Tensor
    """
    single = logits.ndim == 1
    batch = reshape(logits, (1, logits.shape[0])) if single else logits
    num_classes = batch.shape[1]
    labels = np.asarray(labels)
    if labels.dtype.kind == "f":
        # one-hot rows
        if labels.ndim == 0 or labels.shape[-1] != num_classes:
            raise ShapeError(f"cross_entropy: one-hot labels {labels.shape} for {num_classes} classes")
        labels = labels.reshape(-1, num_classes).argmax(axis=-1)
    labels = np.atleast_1d(labels).astype(np.int64)
    if labels.shape != (batch.shape[0],):
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {batch.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ShapeError(f"cross_entropy: label out of range for {num_classes} classes")
    picked = pick(log_softmax(batch), labels)
    return scale(mean(picked), -1.0)


def one_hot(labels, num_classes, dtype=DTYPE):
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def weighted_mix(weights, probs):
    """
    Per-row mixture sum_i weights[b, i] * probs[b, i, :].

    Args:
        weights: [B, N]
        probs: [B, N, C]

    Returns:
        Tensor [B, C]
    """
    if weights.ndim != 2 or probs.ndim != 3 or probs.shape[:2] != weights.shape:
        raise ShapeError(f"weighted_mix: weights {weights.shape} and probs {probs.shape}")
    dtype = _dtype_of(weights, probs)
    w64 = weights.data.astype(np.float64)
    p64 = probs.data.astype(np.float64)
    out = np.einsum("bn,bnc->bc", w64, p64).astype(dtype)

    def backward_fn(g):
        g64 = g.astype(np.float64)
        gw = np.einsum("bc,bnc->bn", g64, p64).astype(dtype)
        gp = np.einsum("bc,bn->bnc", g64, w64).astype(dtype)
        return gw, gp

    return _result(out, (weights, probs), backward_fn, "weighted_mix")


# ============================================================================
# Gradient checking
# ============================================================================

def numeric_gradient(fn, params, eps=1e-6):
    """
    Central finite-difference gradient of a scalar function.

    Args:
        fn: callable returning a scalar Tensor, evaluated with the current params
        params: list of parameter Tensors (perturbed in place, then restored)
        eps: perturbation size

    Returns:
        list of numpy arrays shaped like the parameters
    """
    grads = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            # the stored steps, which float32 rounds away from +-eps
            flat[idx] = original + eps
            high = float(flat[idx])
            plus = fn().item()
            flat[idx] = original - eps
            low = float(flat[idx])
            minus = fn().item()
            flat[idx] = original
            g.reshape(-1)[idx] = (plus - minus) / (high - low)
        grads.append(g)
    return grads


def gradient_check(fn, params, eps=1e-6, floor=1e-5, tensorwise=False):
    """
    Max relative error between tape gradients and central differences.

    Elementwise by default: |a - n| / max(|a|, |n|, floor). With tensorwise
    set, each parameter is compared as a whole: ||a - n|| / max(||a||, ||n||, floor),
    which is the meaningful measure for float32 parameters.
    """
    with GradTape() as tape:
        loss = fn()
    analytic = backward(loss, tape, params)
    numeric = numeric_gradient(fn, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if not a.size:
            continue
        a = a.astype(np.float64)
        if tensorwise:
            denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
            error = float(np.linalg.norm(a - n) / denom)
        else:
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            error = float(np.max(np.abs(a - n) / denom))
        worst = max(worst, error)
    logger.debug("gradient check max relative error %.3e", worst)
    return worst
