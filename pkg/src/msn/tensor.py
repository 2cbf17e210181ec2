"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The graph is rebuilt on every forward pass: each produced tensor remembers
its parent tensors and a gradient closure.  ``backward`` walks the graph in
reverse topological order and accumulates gradients into ``.grad`` (a plain
numpy array) for every tensor with ``requires_grad`` that is reachable from
the loss.  Closures capture numpy arrays, never the output tensor itself, so
graphs are acyclic and freed by reference counting as soon as the caller
drops the loss.  Live-tensor byte accounting rides on that determinism.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = [
    "ParameterError",
    "Rng",
    "ShapeError",
    "Tensor",
    "add",
    "batch_norm_1d",
    "concat",
    "gather_rows",
    "gelu",
    "l2_normalize",
    "layer_norm",
    "live_tensor_bytes",
    "log",
    "matmul",
    "mean",
    "mul",
    "narrow",
    "peak_tensor_bytes",
    "repeat_rows",
    "reset_peak_tensor_bytes",
    "scale",
    "softmax",
    "tensor",
    "tsum",
    "zeros",
]

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class ParameterError(ValueError):
    """Scalar argument outside its legal range."""


# ---------------------------------------------------------------------------
# Live-storage accounting (used by the profiler's memory column)
# ---------------------------------------------------------------------------

_live_bytes = 0
_peak_bytes = 0


def _account(delta: int) -> None:
    global _live_bytes, _peak_bytes
    _live_bytes += delta
    if _live_bytes > _peak_bytes:
        _peak_bytes = _live_bytes


def live_tensor_bytes() -> int:
    """Bytes of tensor storage (values + grads) currently alive."""
    return _live_bytes


def peak_tensor_bytes() -> int:
    """High-water mark of live storage since the last reset."""
    return _peak_bytes


def reset_peak_tensor_bytes() -> None:
    global _peak_bytes
    _peak_bytes = _live_bytes


_mac_count = 0


def mac_count() -> int:
    """GEMM multiply-accumulates executed since the last reset.

    Counts matmul and affine, forward and backward; elementwise work is
    excluded.  FLOPs are conventionally twice this."""
    return _mac_count


def reset_mac_count() -> None:
    global _mac_count
    _mac_count = 0


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        # crc32 is stable across runs and platforms, unlike hash().
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"rng key must be int or str, got {type(key).__name__}")


class Rng:
    """Counter-based random stream: state is exactly (seed, counter).

    Every draw derives a fresh generator from ``SeedSequence(seed, (counter,))``
    and bumps the counter, so equal (seed, counter) pairs always produce the
    same stream and resuming from a checkpoint needs only those two integers.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _gen(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.counter,))
        self.counter += 1
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys) -> "Rng":
        """Independent stream keyed by (seed, keys); does not touch the counter."""
        ints = tuple(_key_to_int(k) for k in keys)
        ss = np.random.SeedSequence(self.seed, spawn_key=(0x5EED,) + ints)
        return Rng(int(ss.generate_state(1, np.uint64)[0]))

    def generator(self) -> np.random.Generator:
        """One generator for a burst of sequential draws (advances the counter
        once); cheaper than per-draw construction in hot loops."""
        return self._gen()

    def normal(self, shape, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self._gen().normal(mean, std, size=shape)

    def truncated_normal(self, shape, std: float, clip_sigmas: float = 2.0) -> np.ndarray:
        """Normal(0, std) with rejection outside clip_sigmas standard deviations."""
        g = self._gen()
        out = g.normal(0.0, std, size=shape)
        bound = clip_sigmas * std
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = g.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > bound
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        return self._gen().uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen().integers(low, high, size=shape)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen().choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen().permutation(n)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A contiguous float64 array plus an optional spot in the current graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn",
                 "_consumed", "_accounted", "__weakref__")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _grad_fn=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._consumed = False
        self._accounted = arr.nbytes
        _account(arr.nbytes)

    def __del__(self):
        _account(-self._accounted)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def _set_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            if not g.flags.owndata:  # views may alias another node's storage
                g = g.copy()
            self.grad = g
            self._accounted += g.nbytes
            _account(g.nbytes)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self._accounted -= self.grad.nbytes
            _account(-self.grad.nbytes)
            self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return _transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _make(data, parents, grad_fn) -> Tensor:
    """Wrap an op result; the graph is only recorded when a parent needs it."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _grad_fn=grad_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; broadcasting follows numpy rules.

    `b` may be a Tensor, a numpy array, or a scalar; non-Tensor operands are
    constants and receive no gradient.
    """
    if isinstance(b, Tensor):
        out = a.data + b.data
        ash, bsh = a.data.shape, b.data.shape

        def grad_fn(g):
            return _unbroadcast(g, ash), _unbroadcast(g, bsh)

        return _make(out, (a, b), grad_fn)
    const = np.asarray(b, dtype=np.float64)
    out = a.data + const
    ash = a.data.shape

    def grad_fn(g):
        return (_unbroadcast(g, ash),)

    return _make(out, (a,), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; non-Tensor `b` is a constant (scalar or array)."""
    if isinstance(b, Tensor):
        out = a.data * b.data
        ad, bd = a.data, b.data

        def grad_fn(g):
            return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

        return _make(out, (a, b), grad_fn)
    const = np.asarray(b, dtype=np.float64)
    out = a.data * const
    ash = a.data.shape

    def grad_fn(g):
        return (_unbroadcast(g * const, ash),)

    return _make(out, (a,), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def grad_fn(g):
        return (g * s,)

    return _make(a.data * s, (a,), grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  2-D x 2-D, batched N-D x N-D (equal batch dims), or
    N-D x 2-D (shared right operand, e.g. a linear layer's weight)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} vs {bd.shape}")
    if ad.ndim != bd.ndim and bd.ndim != 2:
        raise ShapeError(f"unsupported matmul broadcast: {ad.shape} vs {bd.shape}")
    if ad.ndim == bd.ndim and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {ad.shape} vs {bd.shape}")
    inner = ad.shape[-1]
    if bd.ndim == 2 and ad.ndim > 2:
        # Shared right operand (linear layer): collapse the batch axes into
        # one GEMM instead of a strided loop of small ones.
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(lead + (bd.shape[1],))

        def grad_fn(g):
            global _mac_count
            _mac_count += 2 * out.size * inner
            g2 = g.reshape(-1, bd.shape[1])
            ga = g2 @ bd.T
            ga.shape = ad.shape  # fresh GEMM output, restride in place
            gb = a2.T @ g2
            return ga, gb
    else:
        out = ad @ bd

        def grad_fn(g):
            global _mac_count
            _mac_count += 2 * out.size * inner
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
            return ga, gb

    global _mac_count
    _mac_count += out.size * inner
    return _make(out, (a, b), grad_fn)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused linear layer: x @ w + b with a 2-D weight and 1-D bias.

    One GEMM and a broadcast add into its output, one graph node; equivalent
    to add(matmul(x, w), b) but without the intermediate activation copy."""
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2:
        raise ShapeError(f"affine weight must be 2-D, got {wd.shape}")
    if bd.shape != (wd.shape[1],):
        raise ShapeError(f"affine bias {bd.shape} does not match weight {wd.shape}")
    if xd.ndim < 2 or xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"affine input {xd.shape} does not match weight {wd.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    out += bd
    out.shape = lead + (wd.shape[1],)
    global _mac_count
    _mac_count += out.size * xd.shape[-1]
    need_x, need_w, need_b = x.requires_grad, w.requires_grad, b.requires_grad

    def grad_fn(g):
        global _mac_count
        g2 = g.reshape(-1, wd.shape[1])
        gx = gw = gb = None
        if need_x:
            _mac_count += out.size * xd.shape[-1]
            gx = g2 @ wd.T
            gx.shape = xd.shape
        if need_w:
            _mac_count += out.size * xd.shape[-1]
            gw = x2.T @ g2
        if need_b:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _make(out, (x, w, b), grad_fn)


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)

    def grad_fn(g):
        if not g.flags.c_contiguous:
            g = np.ascontiguousarray(g)
        g.shape = old  # in place: this grad is exclusively ours to restride
        return (g,)

    return _make(out, (a,), grad_fn)


def _transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = np.argsort(axes)
    out = a.data.transpose(axes)

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(out, (a,), grad_fn)


def concat(parts: list, axis: int = 0) -> Tensor:
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]
    full = a.data.shape

    def grad_fn(g):
        ga = np.zeros(full)
        ga[idx] = g
        return (ga,)

    return _make(np.ascontiguousarray(out), (a,), grad_fn)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """out[..., :] = table[indices[...], :]; gradient scatter-adds into the table."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"gather index out of range for table with {table.data.shape[0]} rows")
    out = table.data[idx]
    tshape = table.data.shape

    def grad_fn(g):
        gt = np.zeros(tshape)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), grad_fn)


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Vector [d] -> [n, 1, d]; gradient sums the copies back."""
    d = a.data.shape[-1]
    out = np.broadcast_to(a.data.reshape(1, 1, d), (n, 1, d)).copy()

    def grad_fn(g):
        return (g.sum(axis=(0, 1)),)

    return _make(out, (a,), grad_fn)


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """softmax(x / temperature) along the last axis."""
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    y = x.data / temperature
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner) / temperature,)

    return _make(y, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    xd = x.data
    out = np.log(xd)

    def grad_fn(g):
        return (g / xd,)

    return _make(out, (x,), grad_fn)


def xlogx(x: Tensor) -> Tensor:
    """x * log(x) extended continuously with 0 log 0 = 0; needs x >= 0.

    Entropy terms want this extension rather than a floor epsilon inside the
    log: identities like H(uniform) = ln K then hold to rounding error
    instead of K * eps.  The derivative log(x) + 1 reuses the zero guard, so
    exact zeros report a finite placeholder on a set that softmax outputs
    never touch.
    """
    xd = x.data
    if (xd < 0.0).any():
        raise ParameterError(f"xlogx needs non-negative input, min {xd.min()}")
    lg = np.log(np.where(xd > 0.0, xd, 1.0))
    out = xd * lg

    def grad_fn(g):
        return (g * (lg + 1.0),)

    return _make(out, (x,), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh formulation:
    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))."""
    # In-place arithmetic throughout: these run on the widest activations in
    # the network, where temporary allocation dominates the math.
    xd = x.data
    t = xd * xd
    t *= _GELU_A
    t += 1.0
    t *= xd  # x + 0.044715 x^3
    t *= _GELU_C
    np.tanh(t, out=t)
    out = 1.0 + t
    out *= xd
    out *= 0.5

    def grad_fn(g):
        w = xd * xd
        w *= 3.0 * _GELU_A
        w += 1.0
        w *= _GELU_C  # d/dx of the tanh argument
        s = t * t
        np.subtract(1.0, s, out=s)
        w *= s
        w *= xd
        w *= 0.5  # 0.5 x (1 - t^2) du
        np.multiply(t, 0.5, out=s)
        s += 0.5
        w += s  # + 0.5 (1 + t)
        w *= g
        return (w,)

    return _make(out, (x,), grad_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    out = xd.mean(axis=axis)
    shape = xd.shape

    if axis is None:
        n = xd.size

        def grad_fn(g):
            return (np.full(shape, float(g.reshape(())) / n),)
    else:
        n = shape[axis]

        def grad_fn(g):
            return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _make(out, (x,), grad_fn)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    out = xd.sum(axis=axis)
    shape = xd.shape

    if axis is None:
        def grad_fn(g):
            return (np.full(shape, float(g.reshape(()))),)
    else:
        def grad_fn(g):
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(out, (x,), grad_fn)


_ZERO_NORM_FLOOR = 1e-12


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / ||x|| along `axis`; slices with norm < 1e-12 map to the zero vector
    and propagate zero gradient (keeps cosine similarity NaN-free at init)."""
    xd = x.data
    norm = np.linalg.norm(xd, axis=axis, keepdims=True)
    safe = np.where(norm < _ZERO_NORM_FLOOR, 1.0, norm)
    y = np.where(norm < _ZERO_NORM_FLOOR, 0.0, xd / safe)

    def grad_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        gx = (g - y * inner) / safe
        return (np.where(norm < _ZERO_NORM_FLOOR, 0.0, gx),)

    return _make(y, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match normalized width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = np.einsum("...d,...d->...", xhat, xhat)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv  # centered copy normalized in place
    out = xhat * gain.data
    out += bias.data
    gd = gain.data

    def grad_fn(g):
        ggain = np.einsum("nd,nd->d", g.reshape(-1, d), xhat.reshape(-1, d))
        gbias = g.sum(axis=tuple(range(g.ndim - 1)))
        gx = g * gd
        proj = np.einsum("...d,...d->...", gx, xhat)[..., None]
        proj /= d
        gx -= gx.mean(axis=-1, keepdims=True)
        gx -= proj * xhat
        gx *= inv
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), grad_fn)


def batch_norm_1d(x: Tensor, gain: Tensor, bias: Tensor,
                  running_mean: np.ndarray, running_var: np.ndarray,
                  mode: str, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """1-D batch norm over axis 0 of a [B, d] tensor.

    Train mode normalizes by batch statistics (population variance) and
    updates the running buffers in place; eval mode normalizes by the
    running buffers.  The buffers are plain arrays outside the graph.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm_1d expects [B, d], got {x.data.shape}")
    if mode == "train":
        b = x.data.shape[0]
        if b < 2:
            raise ParameterError(
                f"batch_norm_1d train mode needs a batch of >= 2 rows, got {b}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = gain.data * xhat + bias.data
        gd = gain.data

        def grad_fn(g):
            ggain = (g * xhat).sum(axis=0)
            gbias = g.sum(axis=0)
            gxhat = g * gd
            gx = inv * (gxhat
                        - gxhat.mean(axis=0)
                        - xhat * (gxhat * xhat).mean(axis=0))
            return gx, ggain, gbias

        return _make(out, (x, gain, bias), grad_fn)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        out = gain.data * xhat + bias.data
        gd = gain.data

        def grad_fn(g):
            return g * gd * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _make(out, (x, gain, bias), grad_fn)
    raise ParameterError(f"batch_norm_1d mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from `loss`.

    The loss must be scalar.  The graph is released afterwards; a second call
    on the same loss raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild it first")
    loss._consumed = True

    # Iterative topological order (post-order DFS); recursion would overflow
    # on deep per-step graphs.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss._set_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._grad_fn is None or node.grad is None:
            continue
        grads = node._grad_fn(node.grad)
        delivered: set[int] = set()
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                if g.shape != parent.data.shape:
                    g = g.reshape(parent.data.shape)
                if id(g) in delivered:  # same array fanned out to two parents
                    g = g.copy()
                delivered.add(id(g))
                parent._set_grad(g)
        # Free the closure (and this interior grad) so intermediate arrays
        # drop with the graph; leaf grads are what backward is for.
        node._grad_fn = None
        node._parents = ()
        if node is not loss:
            node.zero_grad()
