"""Dense tensors with reverse-mode differentiation.

Only the handful of operations the twin-chain retrieval network needs are
provided: convolution, ReLU, spatial max-pooling, fully connected layers,
batch slicing/concatenation, element-wise view pooling and a few scalar
helpers used to combine losses.

Every op records its inputs and a backward rule on the output tensor.
``backward`` collects the recorded nodes reachable from a scalar root,
replays their rules in reverse recording order and then drops the graph.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DiagnosticError, UsageError

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense array plus gradient bookkeeping.

    Image tensors use the (N, K, H, W) layout; vectors batches are (N, D).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[Tensor], None]) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray, index=None, owned: bool = False) -> None:
    """Add ``g`` into ``t.grad`` (or its ``index`` region); ``owned`` lets a fresh array be adopted."""
    if not t.requires_grad:
        return
    if index is None:
        if t.grad is None:
            if owned and g.dtype == t.data.dtype and g.shape == t.data.shape:
                t.grad = g
            else:
                t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad += g
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad[index] += g


class GradTape:
    """Recorded ops reachable from a root, in recording order."""

    def __init__(self, root: Tensor):
        seen = {id(root)}
        stack = [root]
        nodes = []
        while stack:
            t = stack.pop()
            if t._backward is not None:
                nodes.append(t)
            for p in t._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._seq)
        self.nodes = nodes
        self.leaves = []
        leaf_ids = set()
        for t in nodes:
            for p in t._parents:
                if p.requires_grad and p._backward is None and id(p) not in leaf_ids:
                    leaf_ids.add(id(p))
                    self.leaves.append(p)

    def replay(self) -> None:
        for t in reversed(self.nodes):
            if t.grad is not None:
                t._backward(t)
        for t in self.nodes:
            t._parents = ()
            t._backward = None


def backward(loss: Tensor) -> dict:
    """Populate ``.grad`` on every tensor that requires it; return leaf grads."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    tape = GradTape(loss)
    loss.grad = np.ones_like(loss.data)
    tape.replay()
    return {t: t.grad for t in tape.leaves}


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation, weights shaped (K_out, K_in, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4D input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k_out, k_in, kh, kw = weight.shape
    if c != k_in:
        raise ConfigurationError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if bias.shape != (k_out,):
        raise ConfigurationError(f"conv2d bias shape {bias.shape} does not match kernel {weight.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv2d output would be empty: input {x.shape} with kernel {weight.shape}")

    # im2col in (kh, kw, K_in) column order over an NHWC copy of the padded input
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.concatenate(
        [xp[:, i:i + span_h:stride, j:j + span_w:stride, :] for i in range(kh) for j in range(kw)],
        axis=3,
    ).reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, k_out)
    out = cols @ wmat
    out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k_out).transpose(0, 3, 1, 2))

    def _back(o: Tensor) -> None:
        g = o.grad.transpose(0, 2, 3, 1).reshape(-1, k_out)
        if weight.requires_grad:
            dw = (cols.T @ g).reshape(kh, kw, c, k_out).transpose(3, 2, 0, 1)
            _accumulate(weight, dw)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            dcols = (g @ wmat.T).reshape(n, ho, wo, kh * kw, c)
            dxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + span_h:stride, j:j + span_w:stride, :] += dcols[:, :, :, i * kw + j, :]
            _accumulate(x, dxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))

    return _make(out, (x, weight, bias), _back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def _back(o: Tensor) -> None:
        _accumulate(x, o.grad * mask, owned=True)

    return _make(out, (x,), _back)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Spatial max-pool; ties resolve to the first element in row-major order."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"maxpool2d expects a 4D tensor, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ConfigurationError(f"maxpool2d needs window, stride >= 1, got {window}, {stride}")
    if h < window or w < window:
        raise ConfigurationError(f"maxpool2d window {window} larger than spatial dims {(h, w)}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    if stride == window:
        # non-overlapping windows: reduce over the window's strided sub-grids in row-major order
        subs = [
            x.data[:, :, a:a + ho * window:window, b:b + wo * window:window]
            for a in range(window)
            for b in range(window)
        ]
        out = subs[0].copy()
        for s in subs[1:]:
            np.maximum(out, s, out=out)

        def _back(o: Tensor) -> None:
            if not x.requires_grad:
                return
            g = np.zeros_like(x.data)
            taken = np.zeros(out.shape, dtype=bool)
            for pos, s in enumerate(subs):
                a, b = divmod(pos, window)
                hit = s == out
                hit &= ~taken
                taken |= hit
                g[:, :, a:a + ho * window:window, b:b + wo * window:window] = o.grad * hit
            _accumulate(x, g, owned=True)

        return _make(out, (x,), _back)

    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win[:, :, :ho, :wo].reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _back(o: Tensor) -> None:
        if not x.requires_grad:
            return
        rows = np.arange(ho)[:, None] * stride + arg // window
        cols = np.arange(wo)[None, :] * stride + arg % window
        plane = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None, None]
        idx = ((plane * h + rows) * w + cols).reshape(-1)
        g = np.zeros(n * c * h * w, dtype=x.data.dtype)
        np.add.at(g, idx, o.grad.reshape(-1))
        _accumulate(x, g.reshape(x.shape), owned=True)

    return _make(out, (x,), _back)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape

    def _back(o: Tensor) -> None:
        _accumulate(x, o.grad.reshape(shape))

    return _make(x.data.reshape(shape[0], -1), (x,), _back)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight shaped (in, out)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ConfigurationError(f"fully_connected expects 2D input and weights, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"fully_connected width mismatch: input {x.shape} vs weights {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ConfigurationError(f"fully_connected bias {bias.shape} does not match weights {weight.shape}")
    out = x.data @ weight.data + bias.data

    def _back(o: Tensor) -> None:
        g = o.grad
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _make(out, (x, weight, bias), _back)


def slice_batch(x: Tensor, sizes: Sequence[int]) -> list:
    """Split along N into contiguous parts of the given sizes."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[0]:
        raise ConfigurationError(f"slice sizes {sizes} do not partition N={x.shape[0]}")
    parts = []
    start = 0
    for s in sizes:
        sl = slice(start, start + s)

        def _back(o: Tensor, sl=sl) -> None:
            _accumulate(x, o.grad, sl)

        parts.append(_make(x.data[sl], (x,), _back))
        start += s
    return parts


def concat_batch(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along N, preserving order."""
    if not parts:
        raise ConfigurationError("concat_batch needs at least one part")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ConfigurationError(f"concat_batch shape mismatch: {parts[0].shape} vs {p.shape}")
    out = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def _back(o: Tensor) -> None:
        for p, a, b in zip(parts, bounds[:-1], bounds[1:]):
            _accumulate(p, o.grad[a:b])

    return _make(out, tuple(parts), _back)


def view_pool(views: Sequence[Tensor]) -> Tensor:
    """Element-wise maximum over views; ties go to the lowest view index."""
    if not views:
        raise ConfigurationError("view_pool needs at least one view")
    shape = views[0].shape
    for v in views:
        if v.shape != shape:
            raise ConfigurationError(f"view_pool shape mismatch: {shape} vs {v.shape}")
    stacked = np.stack([v.data for v in views])
    arg = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def _back(o: Tensor) -> None:
        for i, v in enumerate(views):
            if v.requires_grad:
                _accumulate(v, o.grad * (arg == i))

    return _make(out, tuple(views), _back)


# ---------------------------------------------------------------------------
# scalar helpers


def add(*terms: Tensor) -> Tensor:
    shape = terms[0].shape
    for t in terms:
        if t.shape != shape:
            raise ConfigurationError(f"add shape mismatch: {shape} vs {t.shape}")
    out = terms[0].data.copy()
    for t in terms[1:]:
        out = out + t.data

    def _back(o: Tensor) -> None:
        for t in terms:
            _accumulate(t, o.grad)

    return _make(out, terms, _back)


def scale(x: Tensor, c: float) -> Tensor:
    def _back(o: Tensor) -> None:
        _accumulate(x, o.grad * c)

    return _make(x.data * c, (x,), _back)


def sum_all(x: Tensor) -> Tensor:
    def _back(o: Tensor) -> None:
        _accumulate(x, np.broadcast_to(o.grad, x.shape))

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), _back)


def half_sq_norm(x: Tensor) -> Tensor:
    """0.5 * ||x||^2 as a scalar tensor."""
    def _back(o: Tensor) -> None:
        _accumulate(x, o.grad * x.data)

    return _make(np.asarray(0.5 * np.sum(x.data * x.data), dtype=x.data.dtype), (x,), _back)


# ---------------------------------------------------------------------------
# verification


def grad_check(
    build: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    probes: int | None = 20,
    seed: int = 0,
    kink_tol: float | None = 1e-4,
    stats: dict | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build`` must rebuild the scalar loss from the current ``.data`` of
    ``params`` on every call. ``probes`` random coordinates of each
    parameter are checked (all of them when ``probes`` is None or larger).
    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.

    A probe whose forward and backward one-sided slopes differ by more than
    ``kink_tol * max(1, |numeric|)`` straddles a ReLU/max/hinge kink, where
    central differences are meaningless; it is replaced by another random
    coordinate. The decision uses loss values only, never the analytic
    gradient. ``kink_tol=None`` keeps every probe. Counts go to ``stats``.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigurationError("grad_check requires float64 parameters")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.grad = None

    def _value() -> float:
        with no_grad():
            v = float(build().data)
        if not np.isfinite(v):
            raise DiagnosticError(f"non-finite loss {v} at a probe point")
        return v

    loss = build()
    if not np.isfinite(loss.data).all():
        raise DiagnosticError(f"non-finite loss {loss.data} at the base point")
    base = float(loss.data)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        size = flat.size
        if probes is None or size <= probes:
            candidates, want = np.arange(size), size
        else:
            candidates, want = rng.permutation(size), probes
        ga_flat = ga.reshape(-1)
        accepted = 0
        for i in candidates:
            if accepted == want:
                break
            orig = flat[i]
            flat[i] = orig + eps
            lp = _value()
            flat[i] = orig - eps
            lm = _value()
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            scale_ = max(1.0, abs(fd))
            if kink_tol is not None and abs((lp - base) - (base - lm)) / eps > kink_tol * scale_:
                skipped += 1
                continue
            accepted += 1
            worst = max(worst, abs(ga_flat[i] - fd) / scale_)
        if accepted == 0 and size:
            raise DiagnosticError(f"every probe of a {p.shape} parameter straddles a kink")
        checked += accepted
    if stats is not None:
        stats.update(checked=checked, skipped=skipped)
    return worst
