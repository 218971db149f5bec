"""Dense float32 tensors with reverse-mode automatic differentiation.

Every value is a numpy float32 array wrapped in a :class:`Tensor`. Operations
build a computation graph on the fly; calling ``backward()`` on a scalar loss
walks that graph once in reverse topological order and accumulates gradients
into ``.grad``. The heavy kernels (conv2d and its transpose) are written in
im2col/col2im form so the inner loops run as BLAS matmuls with a fixed
summation order. Reductions accumulate in float64 and round the result back
to float32.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def _as_f32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if any(d == 0 for d in arr.shape):
        raise ShapeError(f"zero-sized dimension in shape {arr.shape}")
    return arr


def _accumulate(node: "Tensor", grad: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(grad, dtype=np.float32, copy=True)
    else:
        node.grad += grad


class Tensor:
    """A float32 array plus the bookkeeping needed for backpropagation.

    Leaf tensors (inputs and parameters) start with a zero gradient buffer;
    intermediate nodes get theirs lazily during ``backward()``. Data buffers
    are treated as immutable once an op has consumed them, with two sanctioned
    exceptions: the optimizer updates parameter ``.data`` between steps, and
    ``.grad`` is written during backward.
    """

    __slots__ = ("data", "grad", "_parents", "_op", "_backward_fn")

    def __init__(self, data, parents=(), op="leaf", backward_fn=None):
        self.data = _as_f32(data)
        self._parents = tuple(parents)
        self._op = op
        self._backward_fn = backward_fn
        # Leaves get a zero grad up front so an unused parameter reads as
        # gradient zero without a reachability check.
        self.grad = np.zeros_like(self.data) if not self._parents else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    # -- graph walk ---------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the whole graph.

        Deterministic: the topological order and every accumulation order are
        fixed by graph construction order, so repeated runs on the same graph
        produce bit-identical gradients.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- elementwise algebra -------------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(np.asarray(value, dtype=np.float32))

    @staticmethod
    def _check_elementwise(a: "Tensor", b: "Tensor", op: str) -> None:
        # No implicit broadcasting: shapes must match exactly unless one side
        # is a single element.
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")

    @staticmethod
    def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
        if grad.shape == shape:
            return grad
        # The operand was a single element broadcast across the other shape.
        return np.asarray(grad.sum(dtype=np.float64), dtype=np.float32).reshape(shape)

    def __add__(self, other):
        other = Tensor._lift(other)
        Tensor._check_elementwise(self, other, "add")
        out = Tensor(self.data + other.data, (self, other), "add")

        def bwd(g):
            _accumulate(self, Tensor._reduce_to(g, self.shape))
            _accumulate(other, Tensor._reduce_to(g, other.shape))

        out._backward_fn = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,), "neg")

        def bwd(g):
            _accumulate(self, -g)

        out._backward_fn = bwd
        return out

    def __sub__(self, other):
        other = Tensor._lift(other)
        Tensor._check_elementwise(self, other, "sub")
        out = Tensor(self.data - other.data, (self, other), "sub")

        def bwd(g):
            _accumulate(self, Tensor._reduce_to(g, self.shape))
            _accumulate(other, Tensor._reduce_to(-g, other.shape))

        out._backward_fn = bwd
        return out

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        Tensor._check_elementwise(self, other, "mul")
        out = Tensor(self.data * other.data, (self, other), "mul")

        def bwd(g):
            _accumulate(self, Tensor._reduce_to(g * other.data, self.shape))
            _accumulate(other, Tensor._reduce_to(g * self.data, other.shape))

        out._backward_fn = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        Tensor._check_elementwise(self, other, "div")
        out = Tensor(self.data / other.data, (self, other), "div")

        def bwd(g):
            _accumulate(self, Tensor._reduce_to(g / other.data, self.shape))
            _accumulate(other, Tensor._reduce_to(-g * self.data / (other.data * other.data), other.shape))

        out._backward_fn = bwd
        return out

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, int):
            return self.pow_int(exponent)
        return self.pow_scalar(float(exponent))

    def pow_int(self, q: int) -> "Tensor":
        """Elementwise integer power, q >= 1."""
        if not isinstance(q, (int, np.integer)) or q < 1:
            raise ValueError(f"pow_int requires an integer power >= 1, got {q!r}")
        q = int(q)
        out = Tensor(self.data ** q, (self,), f"pow{q}")

        def bwd(g):
            if q == 1:
                _accumulate(self, g)
            else:
                _accumulate(self, g * (q * self.data ** (q - 1)))

        out._backward_fn = bwd
        return out

    def pow_scalar(self, p: float) -> "Tensor":
        """Elementwise real power for strictly positive inputs."""
        out = Tensor(self.data ** np.float32(p), (self,), f"pow{p}")

        def bwd(g):
            _accumulate(self, g * (np.float32(p) * self.data ** np.float32(p - 1.0)))

        out._backward_fn = bwd
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), (self,), "log")

        def bwd(g):
            _accumulate(self, g / self.data)

        out._backward_fn = bwd
        return out

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clamp values into [lo, hi]; gradient flows only strictly inside."""
        out = Tensor(np.clip(self.data, lo, hi), (self,), "clip")
        mask = ((self.data > lo) & (self.data < hi)).astype(np.float32)

        def bwd(g):
            _accumulate(self, g * mask)

        out._backward_fn = bwd
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None) -> "Tensor":
        value = self.data.sum(axis=axis, dtype=np.float64)
        out = Tensor(np.asarray(value, dtype=np.float32), (self,), "sum")

        def bwd(g):
            if axis is None:
                _accumulate(self, np.broadcast_to(g.reshape(()), self.shape))
            else:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                expanded = np.expand_dims(g, axes)
                _accumulate(self, np.broadcast_to(expanded, self.shape))

        out._backward_fn = bwd
        return out

    def mean(self, axis=None) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis) * (1.0 / count)

    # -- activations ---------------------------------------------------------

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor(y, (self,), "tanh")

        def bwd(g):
            _accumulate(self, g * (1.0 - y * y))

        out._backward_fn = bwd
        return out

    def sigmoid(self) -> "Tensor":
        x = self.data
        # Piecewise form avoids exp overflow for large |x|.
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(np.float32)
        out = Tensor(y, (self,), "sigmoid")

        def bwd(g):
            _accumulate(self, g * (y * (1.0 - y)))

        out._backward_fn = bwd
        return out


# -- convolution kernels ------------------------------------------------------


def _same_pads(extent: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(out_extent, pad_before, pad_after) for same padding; extra pad trails."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    before = total // 2
    return out, before, total - before


def _im2col(padded: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> contiguous columns (N, C, k, k, h_out, w_out)."""
    n, c = padded.shape[:2]
    cols = np.empty((n, c, k, k, h_out, w_out), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, ky, kx] = padded[:, :, ky:ky + (h_out - 1) * stride + 1:stride,
                                        kx:kx + (w_out - 1) * stride + 1:stride]
    return cols


def _col2im(cols: np.ndarray, n: int, c: int, h_pad: int, w_pad: int,
            k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back into a padded buffer."""
    buf = np.zeros((n, c, h_pad, w_pad), dtype=np.float32)
    for ky in range(k):
        for kx in range(k):
            buf[:, :, ky:ky + (h_out - 1) * stride + 1:stride,
                kx:kx + (w_out - 1) * stride + 1:stride] += cols[:, :, ky, kx]
    return buf


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        h_out, pt, pb = _same_pads(h, k, stride)
        w_out, pl, pr = _same_pads(w, k, stride)
    elif padding == "valid":
        if h < k or w < k:
            raise ShapeError(f"valid conv: kernel {k} exceeds input extent {h}x{w}")
        h_out = (h - k) // stride + 1
        w_out = (w - k) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if h + pt + pb < k or w + pl + pr < k:
        raise ShapeError(f"kernel {k} exceeds padded input extent")
    return h_out, w_out, pt, pb, pl, pr


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """Batched 2-D cross-correlation.

    x: (N, Cin, H, W); kernels: (Cout, Cin, k, k); bias: (Cout,) or None.
    Same padding keeps H/stride (ceil) with the extra pad on the bottom/right.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernels, got {x.shape} and {kernels.shape}")
    n, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"conv2d supports square kernels only, got {kh}x{kw}")
    if cin != cin_k:
        raise ShapeError(f"conv2d: input has {cin} channels but kernels expect {cin_k} "
                         f"(input {x.shape}, kernels {kernels.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    k = kh
    h_out, w_out, pt, pb, pl, pr = _conv_geometry(h, w, k, stride, padding)

    padded = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(padded, k, stride, h_out, w_out)
    cols3 = cols.reshape(n, cin * k * k, h_out * w_out)
    w2 = kernels.data.reshape(cout, cin * k * k)
    y = np.matmul(w2, cols3).reshape(n, cout, h_out, w_out)
    if bias is not None:
        y = y + bias.data.reshape(1, cout, 1, 1)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    out = Tensor(y, parents, "conv2d")

    def bwd(g):
        g3 = g.reshape(n, cout, h_out * w_out)
        dw = np.matmul(g3, cols3.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
        _accumulate(kernels, dw.astype(np.float32).reshape(kernels.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))
        dcols = np.matmul(w2.T, g3).reshape(n, cin, k, k, h_out, w_out)
        dpad = _col2im(dcols, n, cin, h + pt + pb, w + pl + pr, k, stride, h_out, w_out)
        _accumulate(x, dpad[:, :, pt:pt + h, pl:pl + w])

    out._backward_fn = bwd
    return out


def conv2d_transpose(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
                     stride: int = 1) -> Tensor:
    """Transposed convolution: the exact adjoint of a same-padded strided conv2d.

    x: (N, Cin, H, W); kernels: (Cin, Cout, k, k); output is (N, Cout, stride*H,
    stride*W). Each input element scatters value * kernel into its output
    window; overlaps sum.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D input and kernels, got {x.shape} and {kernels.shape}")
    n, cin, h, w = x.shape
    cin_k, cout, kh, kw = kernels.shape
    if kh != kw:
        raise ShapeError(f"conv2d_transpose supports square kernels only, got {kh}x{kw}")
    if cin != cin_k:
        raise ShapeError(f"conv2d_transpose: input has {cin} channels but kernels expect {cin_k} "
                         f"(input {x.shape}, kernels {kernels.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d_transpose: bias shape {bias.shape} does not match {cout} output channels")
    k = kh
    h_up, w_up = stride * h, stride * w
    # Geometry of the forward conv this op is the adjoint of: (h_up -> h).
    h_chk, pt, pb = _same_pads(h_up, k, stride)
    w_chk, pl, pr = _same_pads(w_up, k, stride)
    assert (h_chk, w_chk) == (h, w)

    w2 = kernels.data.reshape(cin, cout * k * k)
    x3 = x.data.reshape(n, cin, h * w)
    cols = np.matmul(w2.T, x3).reshape(n, cout, k, k, h, w)
    buf = _col2im(cols, n, cout, h_up + pt + pb, w_up + pl + pr, k, stride, h, w)
    y = buf[:, :, pt:pt + h_up, pl:pl + w_up]
    if bias is not None:
        y = y + bias.data.reshape(1, cout, 1, 1)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    out = Tensor(y, parents, "conv2d_transpose")

    def bwd(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        gcols = _im2col(gp, k, stride, h, w).reshape(n, cout * k * k, h * w)
        _accumulate(x, np.matmul(w2, gcols).reshape(n, cin, h, w))
        dw = np.matmul(x3, gcols.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
        _accumulate(kernels, dw.astype(np.float32).reshape(kernels.shape))
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32))

    out._backward_fn = bwd
    return out


def power_expand(x: Tensor, q_order: int) -> Tensor:
    """Stack elementwise powers y, y^2, ..., y^Q along channels.

    Input (N, C, H, W) becomes (N, C*Q, H, W) with the Q powers of source
    channel c occupying output channels [c*Q, c*Q + Q).  Q=1 returns the
    input node unchanged.
    """
    if not isinstance(q_order, (int, np.integer)) or q_order < 1:
        raise ValueError(f"power order must be an integer >= 1, got {q_order!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"power_expand expects a 4-D tensor, got {x.shape}")
    q_order = int(q_order)
    if q_order == 1:
        return x
    n, c, h, w = x.shape
    pows = np.empty((n, c, q_order, h, w), dtype=np.float32)
    pows[:, :, 0] = x.data
    for q in range(1, q_order):
        pows[:, :, q] = pows[:, :, q - 1] * x.data
    out = Tensor(pows.reshape(n, c * q_order, h, w), (x,), "power_expand")

    def bwd(g):
        g5 = g.reshape(n, c, q_order, h, w)
        dx = g5[:, :, 0].copy()
        for q in range(1, q_order):
            dx += (q + 1) * pows[:, :, q - 1] * g5[:, :, q]
        _accumulate(x, dx)

    out._backward_fn = bwd
    return out


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              momentum: float, eps: float, training: bool) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running buffers in place; inference mode uses the running
    statistics only. Zero-variance batches are handled by the eps floor.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm expects a 4-D tensor, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta shape must be ({c},), got {gamma.shape}/{beta.shape}")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = ((x.data.astype(np.float64) - mu.reshape(1, c, 1, 1)) ** 2).mean(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu.astype(np.float32)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.astype(np.float32)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)

    inv = (1.0 / np.sqrt(var + eps)).astype(np.float32).reshape(1, c, 1, 1)
    xhat = (x.data - mu.astype(np.float32).reshape(1, c, 1, 1)) * inv
    y = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)
    out = Tensor(y, (x, gamma, beta), "batchnorm")

    def bwd(g):
        _accumulate(gamma, (g * xhat).sum(axis=axes, dtype=np.float64).astype(np.float32))
        _accumulate(beta, g.sum(axis=axes, dtype=np.float64).astype(np.float32))
        gs = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            mean_gs = gs.mean(axis=axes, dtype=np.float64).astype(np.float32).reshape(1, c, 1, 1)
            mean_gs_xhat = (gs * xhat).mean(axis=axes, dtype=np.float64).astype(np.float32).reshape(1, c, 1, 1)
            _accumulate(x, inv * (gs - mean_gs - xhat * mean_gs_xhat))
        else:
            _accumulate(x, inv * gs)

    out._backward_fn = bwd
    return out


def finite_diff_grad(f, x: Tensor, eps: float) -> Tensor:
    """Central-difference gradient estimate of a scalar-valued f at x.

    Independent oracle for ``backward()``: perturbs one element at a time and
    never touches the autodiff machinery of the function under test.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = x.data.copy()
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.reshape(-1).copy()
        minus = base.reshape(-1).copy()
        plus[i] += np.float32(eps)
        minus[i] -= np.float32(eps)
        # The realized step differs from eps by float32 rounding; divide by it.
        h = float(plus[i]) - float(minus[i])
        f_plus = float(f(Tensor(plus.reshape(base.shape))))
        f_minus = float(f(Tensor(minus.reshape(base.shape))))
        flat[i] = (f_plus - f_minus) / h
    return Tensor(grad.astype(np.float32))
