"""Reverse-mode automatic differentiation over dense numpy tensors.

A dynamic tape: every operation that touches a tensor requiring gradients
records its parents and a backward closure on the result. ``backward`` on a
scalar walks the DAG once in reverse topological order, accumulating into
``.grad`` buffers (repeated calls accumulate additively).

Design constraints kept deliberately small:
  - tensors have at most 4 dims (batch, channel, height, width);
  - elementwise ops require equal shapes; all shape adaptation is explicit
    via ``reshape`` / ``expand`` / ``concat`` / ``pad2d`` / ``crop2d``
    (the one exception is the conv/FC bias add);
  - a tape is single-threaded; independent tapes may run concurrently.

Float32 is the working precision; pass float64 arrays (or call
``set_default_dtype``) for gradient-check builds.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """Switch the dtype used when wrapping plain python/list data."""
    global _default_dtype
    if dtype not in (np.float32, np.float64):
        raise ValueError("supported dtypes are float32 and float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


class Tensor:
    """Dense N-d array (N <= 4) participating in gradient recording."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        if arr.ndim > 4:
            raise ValueError(f"tensors support at most 4 dims, got {arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)


def _result(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording the tape edge only when needed."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits each recorded node exactly once in reverse topological order and
    accumulates gradients on every reachable tensor with requires_grad.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    order: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and (p.requires_grad or p._backward is not None):
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                _accumulate(node, g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if not (p.requires_grad or p._backward is not None):
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b)
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)
    return _result(root, (a,), lambda g: (g * 0.5 / root,))


def sum_axes(a: Tensor, axes: tuple, keepdims: bool = True) -> Tensor:
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape),)

    return _result(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _result(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast: each source dim must equal the target or be 1."""
    shape = tuple(shape)
    src = a.data.shape
    if len(src) != len(shape):
        raise ValueError(f"expand requires equal rank, got {src} -> {shape}")
    axes = []
    for i, (s, t) in enumerate(zip(src, shape)):
        if s == t:
            continue
        if s != 1:
            raise ValueError(f"cannot expand dim {i} from {s} to {t}")
        axes.append(i)
    axes = tuple(axes)

    def bwd(g):
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), bwd)


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slices = []
        for i in range(len(datas)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            slices.append(g[tuple(idx)])
        return tuple(slices)

    return _result(out, tuple(tensors), bwd)


def pad2d(x: Tensor, pads) -> Tensor:
    """Zero-pad the two spatial dims of an (N,C,H,W) tensor: (top,bottom,left,right)."""
    pt, pb, pl, pr = pads
    out = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    h, w = x.data.shape[2], x.data.shape[3]

    def bwd(g):
        return (g[:, :, pt:pt + h, pl:pl + w],)

    return _result(out, (x,), bwd)


def crop2d(x: Tensor, crops) -> Tensor:
    """Inverse of pad2d: drop (top,bottom,left,right) rows/cols."""
    ct, cb, cl, cr = crops
    h, w = x.data.shape[2], x.data.shape[3]
    out = x.data[:, :, ct:h - cb, cl:w - cr]

    def bwd(g):
        return (np.pad(g, ((0, 0), (0, 0), (ct, cb), (cl, cr))),)

    return _result(np.ascontiguousarray(out), (x,), bwd)


# ---------------------------------------------------------------------------
# Neural network layers
# ---------------------------------------------------------------------------

def _corr2d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Plain cross-correlation of (N,Cin,H,W) with (Cout,Cin,k,k)."""
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin} vs kernel {cin_w}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]  # (N,Cin,Ho,Wo,kh,kw)
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    out = cols @ w.reshape(cout, -1).T
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def _corr2d_grad_w(x: np.ndarray, g: np.ndarray, k: tuple, stride: int, pad: int) -> np.ndarray:
    kh, kw = k
    n, cin, _, _ = x.shape
    _, cout, ho, wo = g.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    return (gm.T @ cols).reshape(cout, cin, kh, kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with optional per-output-channel bias add.

    Accepts any kernel size >= 1 (even sizes are required to realize the
    patch discriminator's receptive field exactly).
    """
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d expects (N,Cin,H,W) input and (Cout,Cin,k,k) weight")
    kh, kw = weight.data.shape[2], weight.data.shape[3]
    if kh != kw:
        raise ValueError("only square kernels are supported")
    if pad > kh - 1:
        raise ValueError("pad must be at most k-1")
    out = _corr2d(x.data, weight.data, stride, pad)
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ValueError("bias must be (Cout,)")
        out = out + bias.data[None, :, None, None]

    n, cin, h, w_in = x.data.shape
    _, cout, ho, wo = out.shape

    def bwd(g):
        g = np.ascontiguousarray(g)
        gw = _corr2d_grad_w(x.data, g, (kh, kw), stride, pad)
        # dx: zero-stuff the output gradient by the stride, then correlate
        # with the kernel flipped spatially and swapped in/out; padding k-1-pad
        # aligns the result with the unpadded input. Strided convs that do not
        # cover the last rows/cols come back short and are zero-padded.
        gs = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1),
                      dtype=g.dtype)
        gs[:, :, ::stride, ::stride] = g
        w_flip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _corr2d(gs, np.ascontiguousarray(w_flip), 1, kh - 1 - pad)
        if gx.shape[2] < h or gx.shape[3] < w_in:
            gx = np.pad(gx, ((0, 0), (0, 0),
                             (0, h - gx.shape[2]), (0, w_in - gx.shape[3])))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bwd)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Dense 2x bilinear interpolation matrix (2n x n), align-corners-false."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n - 1)
        hi_c = min(max(lo + 1, 0), n - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double both spatial dims with bilinear weights (align-corners-false)."""
    if x.data.ndim != 4:
        raise ValueError("bilinear_upsample_2x expects (N,C,H,W)")
    n, c, h, w = x.data.shape
    uh = _upsample_matrix(h, x.data.dtype)
    uw = _upsample_matrix(w, x.data.dtype)
    flat = x.data.reshape(n * c, h, w)
    out = np.einsum("ij,bjk,lk->bil", uh, flat, uw, optimize=True)
    out = out.reshape(n, c, 2 * h, 2 * w)

    def bwd(g):
        gf = g.reshape(n * c, 2 * h, 2 * w)
        gx = np.einsum("ij,bik,kl->bjl", uh, gf, uw, optimize=True)
        return (gx.reshape(n, c, h, w),)

    return _result(out, (x,), bwd)


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 (requires even spatial dims)."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2x requires even spatial dims")
    r = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = r.mean(axis=(3, 5))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return _result(out, (x,), bwd)


def _channel_axis(shape) -> int:
    if len(shape) == 1:
        return 0
    if len(shape) == 4:
        return 1
    raise ValueError(f"expected a (C,) vector or (N,C,H,W) map, got shape {shape}")


def pixel_norm(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each spatial location's channel vector by its RMS magnitude."""
    if eps <= 0:
        raise ValueError("pixel_norm eps must be positive")
    ax = _channel_axis(x.data.shape)
    c = x.data.shape[ax]
    ms = np.mean(x.data * x.data, axis=ax, keepdims=True)
    r = np.sqrt(ms + eps)
    out = x.data / r

    def bwd(g):
        dot = np.sum(g * x.data, axis=ax, keepdims=True)
        gx = g / r - x.data * dot / (c * r ** 3)
        return (gx,)

    return _result(out, (x,), bwd)


def prelu(x: Tensor, slopes: Tensor) -> Tensor:
    """Learnable ReLU: identity for x >= 0, slope[c] * x otherwise."""
    ax = _channel_axis(x.data.shape)
    c = x.data.shape[ax]
    if slopes.data.shape != (c,):
        raise ValueError(f"slopes must be ({c},), got {slopes.data.shape}")
    if ax == 0:
        s = slopes.data
    else:
        s = slopes.data[None, :, None, None]
    negmask = x.data < 0
    out = np.where(negmask, x.data * s, x.data)

    def bwd(g):
        gx = np.where(negmask, g * s, g)
        gneg = g * x.data * negmask
        if ax == 0:
            gs = gneg
        else:
            gs = gneg.sum(axis=(0, 2, 3))
        return (gx, gs)

    return _result(out, (x, slopes), bwd)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map of a vector: (in,) -> (out,) with weight (out,in)."""
    if x.data.ndim != 1 or weight.data.ndim != 2:
        raise ValueError("fully_connected expects a 1-D input and 2-D weight")
    if weight.data.shape[1] != x.data.shape[0] or bias.data.shape != (weight.data.shape[0],):
        raise ValueError(f"shape mismatch: x{x.data.shape} W{weight.data.shape} b{bias.data.shape}")
    out = weight.data @ x.data + bias.data

    def bwd(g):
        return (weight.data.T @ g, np.outer(g, x.data), g)

    return _result(out, (x, weight, bias), bwd)


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference, as a scalar tensor."""
    _check_same_shape(a, b)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=a.data.dtype)

    def bwd(g):
        s = np.sign(diff) * (g / n)
        return (s, -s)

    return _result(out, (a, b), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference, as a scalar tensor."""
    _check_same_shape(a, b)
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)

    def bwd(g):
        s = diff * (2.0 * g / n)
        return (s, -s)

    return _result(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction over named parameters.

    ``params`` maps name -> Tensor; ``grads`` maps name -> ndarray (missing or
    None entries leave that parameter untouched this step).
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * scale
    return norm


# ---------------------------------------------------------------------------
# Checkpoint container: named tensors in a versioned binary file
# ---------------------------------------------------------------------------

_CONTAINER_MAGIC = b"DLTC"
CONTAINER_VERSION_MAJOR = 1
CONTAINER_VERSION_MINOR = 0


def save_container(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata block, little-endian throughout."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].data if isinstance(tensors[name], Tensor)
                                   else tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({
            "name": name,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": [CONTAINER_VERSION_MAJOR, CONTAINER_VERSION_MINOR],
        "entries": entries,
        "meta": meta or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(str(path), "wb") as f:
        f.write(_CONTAINER_MAGIC)
        f.write(struct.pack("<II", CONTAINER_VERSION_MAJOR, CONTAINER_VERSION_MINOR))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for raw in blobs:
            f.write(raw)


def load_container(path):
    """Read a container; returns (tensors: dict[str, ndarray], meta: dict)."""
    with open(str(path), "rb") as f:
        magic = f.read(4)
        if magic != _CONTAINER_MAGIC:
            raise ValueError(f"not a tensor container: {path}")
        major, _minor = struct.unpack("<II", f.read(8))
        if major != CONTAINER_VERSION_MAJOR:
            raise ValueError(f"unsupported container major version {major}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        body = f.read()
    tensors = {}
    for e in header["entries"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]))
    return tensors, header.get("meta", {})
