"""Minimal reverse-mode autodiff over numpy arrays.

Supplies exactly the differentiable operations the two-scale ensemble and
its losses need: 2-D convolution, ReLU, 2x2 average pooling, global average
pooling, channel concatenation, dense layers, and a handful of elementwise
helpers used by tests and the gradient checker.

Operations record onto the innermost active ``Tape`` (a ``with Tape():``
block) whenever any input requires gradients.  ``Tape.backward`` replays the
recorded operations in reverse, accumulating adjoints.  Distinct tapes are
independent; forward/backward on one tape is single-threaded by design.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "Tensor",
    "Tape",
    "backward",
    "add",
    "multiply",
    "scale",
    "tensor_sum",
    "relu",
    "conv2d",
    "avg_pool2",
    "global_average_pool",
    "concat_channels",
    "dense",
    "external_grad_op",
    "grad_check",
]

# When enabled (test builds, CLI selftest), every forward op asserts that its
# output is finite.
CHECK_FINITE = False


class AutodiffError(ValueError):
    """Raised on shape mismatches or misuse of the tape."""


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def _current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations, replayable in reverse."""

    def __init__(self):
        # Each record: (output, inputs, backward_fn).  backward_fn maps the
        # adjoint of the output to a tuple of adjoints aligned with inputs.
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        output.requires_grad = True
        output.tape = self
        self._records.append((output, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every tensor the loss depends on.

        Replays the tape in reverse, visiting every recorded operation
        exactly once; operations whose output the loss does not reach are
        skipped, so gradients of unreachable tensors stay untouched.
        """
        if loss.data.size != 1:
            raise AutodiffError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss.tape is not self:
            raise AutodiffError("loss tensor is not recorded on this tape")

        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}

        for output, inputs, backward_fn in reversed(self._records):
            out_adj = adjoints.pop(id(output), None)
            if out_adj is None:
                continue
            # The adjoint of `output` is complete here: every consumer of
            # `output` was recorded later and has already been replayed.
            output.grad = out_adj
            holders.pop(id(output), None)
            input_adjs = backward_fn(out_adj)
            for tensor, adj in zip(inputs, input_adjs):
                if adj is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + adj
                else:
                    adjoints[key] = np.asarray(adj, dtype=np.float64)
                    holders[key] = tensor
        # Whatever is left are leaves (parameters and inputs).
        for key, adj in adjoints.items():
            holders[key].grad = adj


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation for a scalar loss on its tape."""
    if loss.tape is None:
        raise AutodiffError("loss tensor was not recorded on any tape")
    loss.tape.backward(loss)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise AutodiffError("non-finite value produced by a forward operation")
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise AutodiffError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise AutodiffError(
            f"multiply: shape mismatch {a.data.shape} vs {b.data.shape}"
        )
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _emit(x.data * factor, (x,), lambda g: (g * factor,))


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.data.shape
    return _emit(
        np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    x = _as_tensor(x)
    xd = x.data
    return _emit(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0.0),))


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------


def _conv_windows(
    padded: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int
) -> np.ndarray:
    """Gather sliding windows into a GEMM-ready (C*kh*kw, N*out_h*out_w)
    matrix (one strided fill; reshapes of it are free)."""
    n, c = padded.shape[:2]
    cols = np.empty((c * kh * kw, n * out_h * out_w), dtype=padded.dtype)
    view = cols.reshape(c, kh, kw, n, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            view[:, i, j] = padded[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ].transpose(1, 0, 2, 3)
    return cols


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation with zero padding and unit dilation.

    ``x`` is N x C x H x W, ``kernel`` is O x C x Kh x Kw, ``bias`` is O.
    Output spatial size is floor((H + 2*padding - Kh) / stride) + 1.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise AutodiffError(
            f"conv2d expects 4-d input and kernel, got input {x.shape} "
            f"and kernel {kernel.shape}"
        )
    n, c, h, w = x.shape
    out_c, kc, kh, kw = kernel.shape
    if kc != c:
        raise AutodiffError(
            f"conv2d: input channels {c} (input {x.shape}) do not match "
            f"kernel channels {kc} (kernel {kernel.shape})"
        )
    if bias.shape != (out_c,):
        raise AutodiffError(
            f"conv2d: bias shape {bias.shape} does not match {out_c} output channels"
        )
    if stride < 1 or padding < 0:
        raise AutodiffError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise AutodiffError(
            f"conv2d: kernel {kernel.shape} larger than padded input {x.shape} "
            f"with padding {padding}"
        )

    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if padding:
        padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        padded[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        padded = x.data
    cols = _conv_windows(padded, kh, kw, stride, out_h, out_w)
    w_mat = kernel.data.reshape(out_c, c * kh * kw)
    # (O, C*Kh*Kw) @ (C*Kh*Kw, N*H'*W') -> (N, O, H', W')
    out = (w_mat @ cols).reshape(out_c, n, out_h, out_w).transpose(1, 0, 2, 3)
    out = out + bias.data[None, :, None, None]

    def backward_fn(g: np.ndarray):
        grad_bias = g.sum(axis=(0, 2, 3))
        g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(
            out_c, n * out_h * out_w
        )
        grad_kernel = (g_mat @ cols.T).reshape(out_c, c, kh, kw)
        if not x.requires_grad:
            return None, grad_kernel, grad_bias
        grad_cols = (w_mat.T @ g_mat).reshape(c, kh, kw, n, out_h, out_w)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[
                    :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                ] += grad_cols[:, i, j].transpose(1, 0, 2, 3)
        if padding:
            grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w]
        else:
            grad_x = grad_padded
        return grad_x, grad_kernel, grad_bias

    return _emit(out, (x, kernel, bias), backward_fn)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial extents must be even."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise AutodiffError(f"avg_pool2 expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise AutodiffError(f"avg_pool2 requires even spatial extents, got {h}x{w}")
    view = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = view.mean(axis=(3, 5))

    def backward_fn(g: np.ndarray):
        spread = np.empty((n, c, h // 2, 2, w // 2, 2))
        spread[:] = (0.25 * g)[:, :, :, None, :, None]
        return (spread.reshape(n, c, h, w),)

    return _emit(out, (x,), backward_fn)


def global_average_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: C x H x W -> C, or N x C x H x W -> N x C."""
    x = _as_tensor(x)
    if x.ndim not in (3, 4):
        raise AutodiffError(f"global_average_pool expects rank 3 or 4, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if h < 1 or w < 1:
        raise AutodiffError("global_average_pool: empty spatial extent")
    out = x.data.mean(axis=(-2, -1))
    inv = 1.0 / (h * w)
    shape = x.shape

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g[..., None, None] * inv, shape).copy(),)

    return _emit(out, (x,), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate feature vectors: (m,)+(n,) -> (m+n,), batched along axis 1."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (1, 2):
        raise AutodiffError(
            f"concat_channels expects two rank-1 or two rank-2 tensors, "
            f"got {a.shape} and {b.shape}"
        )
    if a.ndim == 2 and a.shape[0] != b.shape[0]:
        raise AutodiffError(
            f"concat_channels: batch extents differ, {a.shape} vs {b.shape}"
        )
    axis = a.ndim - 1
    split = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def backward_fn(g: np.ndarray):
        if axis == 0:
            return g[:split], g[split:]
        return g[:, :split], g[:, split:]

    return _emit(out, (a, b), backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map weight @ x + bias; ``x`` is (m,) or batched (B, m)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2:
        raise AutodiffError(f"dense: weight must be rank 2, got {weight.shape}")
    k, m = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != m:
        raise AutodiffError(
            f"dense: input {x.shape} does not match weight {weight.shape}"
        )
    if bias.shape != (k,):
        raise AutodiffError(f"dense: bias {bias.shape} does not match {k} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def backward_fn(g: np.ndarray):
        if xd.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _emit(out, (x, weight, bias), backward_fn)


def external_grad_op(
    x: Tensor, value: float, grad_wrt_x: np.ndarray, inputs: Sequence[Tensor] = ()
) -> Tensor:
    """Record a scalar whose gradient w.r.t. ``x`` was computed externally.

    Used to attach loss functions that return analytic logit gradients.
    """
    x = _as_tensor(x)
    grad_wrt_x = np.asarray(grad_wrt_x, dtype=np.float64)
    if grad_wrt_x.shape != x.data.shape:
        raise AutodiffError(
            f"external gradient shape {grad_wrt_x.shape} does not match "
            f"input shape {x.data.shape}"
        )

    def backward_fn(g: np.ndarray):
        return (float(g) * grad_wrt_x,)

    return _emit(np.asarray(float(value)), (x,), backward_fn)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``params``.  The
    relative error per coordinate is |analytic - difference| divided by
    max(|analytic|, |difference|, floor).  When ``max_coords_per_param`` is
    set, a random subset of coordinates is probed per parameter.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    for p in params:
        p.zero_grad()
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords_per_param, replace=False)
        for idx in coords:
            saved = flat[idx]
            flat[idx] = saved + step
            f_plus = float(f().data)
            flat[idx] = saved - step
            f_minus = float(f().data)
            flat[idx] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise AutodiffError(
                    "grad_check: non-finite function value at a perturbed point"
                )
            diff = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(gflat[idx]), abs(diff), floor)
            worst = max(worst, abs(gflat[idx] - diff) / denom)
    return worst
