"""Forward/backward kernels for every primitive the network uses.

Activations are NCHW. Filter layouts:

* standard conv  ``[W, W, M, N]``  (kernel rows, kernel cols, in, out)
* depthwise      ``[W, W, M]``
* pointwise      ``[M, N]``

All spatial convolutions use SAME zero padding of ``(W - 1) // 2`` on each
side, so the output size is ``ceil(H / stride)``. Kernels are
cross-correlations (no flip).

Each layer object caches what its backward pass needs for exactly one
``backward`` call; a second call without a fresh ``forward`` raises
:class:`StateError`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, ShapeError, StateError

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

# JIT kernels for the depthwise loops; the NumPy path is kept as a fallback
# and is what the tests compare the kernels against.
HAVE_NUMBA = _numba is not None
USE_JIT = True

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_size(n: int, stride: int) -> int:
    return -(-n // stride)


def _check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise InvalidArgumentError(f"stride must be 1 or 2, got {stride}")


def _check_kernel(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"kernel size must be odd and >= 1, got {k}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    """Zero-pad the two spatial axes; always returns a C-contiguous array."""
    if p == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    return xp


def _tap(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


# --------------------------------------------------------------------------
# functional forwards

def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, m, h, w = x.shape
    ho, wo = _out_size(h, stride), _out_size(w, stride)
    xp = _pad(x, (k - 1) // 2)
    cols = np.empty((n, ho, wo, k, k, m), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = _tap(xp, i, j, stride, ho, wo).transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, k * k * m), ho, wo


def conv2d_forward(x: np.ndarray, weights: np.ndarray, stride: int = 1) -> np.ndarray:
    _check_stride(stride)
    k, k2, m, nout = weights.shape
    _check_kernel(k)
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}x{k2}")
    if x.ndim != 4 or x.shape[1] != m:
        raise ShapeError(f"conv2d: input {x.shape} does not match filter in-channels {m}")
    cols, ho, wo = _im2col(x, k, stride)
    out = cols @ weights.reshape(k * k * m, nout)
    return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, nout).transpose(0, 3, 1, 2))


def _depthwise_numpy(xp, weights, stride, ho, wo):
    n, m = xp.shape[:2]
    k = weights.shape[0]
    out = np.zeros((n, m, ho, wo), dtype=np.result_type(xp, weights))
    tmp = np.empty_like(out)
    for i in range(k):
        for j in range(k):
            np.multiply(_tap(xp, i, j, stride, ho, wo), weights[i, j][None, :, None, None], out=tmp)
            out += tmp
    return out


def _depthwise_grads_numpy(xp, weights, grad, stride, param_grads):
    k = weights.shape[0]
    ho, wo = grad.shape[2:]
    dxp = np.zeros(xp.shape, dtype=np.result_type(grad, weights))
    dw = np.empty_like(weights)
    for i in range(k):
        for j in range(k):
            if param_grads:
                dw[i, j] = np.einsum("nmhw,nmhw->m", grad, _tap(xp, i, j, stride, ho, wo))
            _tap(dxp, i, j, stride, ho, wo)[...] += grad * weights[i, j][None, :, None, None]
    return dxp, dw


if _numba is not None:
    @_numba.njit(cache=True)
    def _depthwise_jit(xp, weights, stride, ho, wo):
        n, m = xp.shape[0], xp.shape[1]
        k = weights.shape[0]
        out = np.zeros((n, m, ho, wo), dtype=xp.dtype)
        for b in range(n):
            for c in range(m):
                o = out[b, c]
                plane = xp[b, c]
                for i in range(k):
                    for j in range(k):
                        wij = weights[i, j, c]
                        for r in range(ho):
                            row = plane[r * stride + i]
                            orow = o[r]
                            if stride == 1:
                                for q in range(wo):
                                    orow[q] += wij * row[q + j]
                            else:
                                for q in range(wo):
                                    orow[q] += wij * row[q * stride + j]
        return out

    @_numba.njit(cache=True)
    def _depthwise_grads_jit(xp, weights, grad, stride, param_grads):
        n, m = xp.shape[0], xp.shape[1]
        k = weights.shape[0]
        ho, wo = grad.shape[2], grad.shape[3]
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        dw = np.zeros(weights.shape, dtype=weights.dtype)
        # per-lane partial sums keep the reduction vectorizable without reassociation
        lanes = np.zeros((k, k, wo), dtype=xp.dtype)
        for c in range(m):
            lanes[:] = 0
            for b in range(n):
                plane = xp[b, c]
                dplane = dxp[b, c]
                g = grad[b, c]
                for r in range(ho):
                    grow = g[r]
                    for i in range(k):
                        rr = r * stride + i
                        xrow = plane[rr]
                        drow = dplane[rr]
                        for j in range(k):
                            wij = weights[i, j, c]
                            if stride == 1:
                                for q in range(wo):
                                    drow[q + j] += grow[q] * wij
                                    lanes[i, j, q] += grow[q] * xrow[q + j]
                            else:
                                for q in range(wo):
                                    drow[q * stride + j] += grow[q] * wij
                                    lanes[i, j, q] += grow[q] * xrow[q * stride + j]
            if param_grads:
                for i in range(k):
                    for j in range(k):
                        dw[i, j, c] = lanes[i, j].sum()
        return dxp, dw

    @_numba.njit(cache=True)
    def _bn_stats_jit(x):
        n, c, h, w = x.shape
        count = n * h * w
        mean = np.zeros(c, dtype=np.float64)
        var = np.zeros(c, dtype=np.float64)
        for ch in range(c):
            acc = 0.0
            for b in range(n):
                acc += x[b, ch].sum()
            mu = acc / count
            acc2 = 0.0
            for b in range(n):
                plane = x[b, ch]
                for r in range(h):
                    for q in range(w):
                        d = plane[r, q] - mu
                        acc2 += d * d
            mean[ch] = mu
            var[ch] = acc2 / count
        return mean, var

    @_numba.njit(cache=True)
    def _bn_apply_jit(x, mean, invstd, scale, shift):
        n, c, h, w = x.shape
        xhat = np.empty_like(x)
        out = np.empty_like(x)
        for b in range(n):
            for ch in range(c):
                mu = mean[ch]
                s = invstd[ch]
                g = scale[ch]
                t = shift[ch]
                xp = x[b, ch]
                xh = xhat[b, ch]
                o = out[b, ch]
                for r in range(h):
                    for q in range(w):
                        v = (xp[r, q] - mu) * s
                        xh[r, q] = v
                        o[r, q] = v * g + t
        return out, xhat

    @_numba.njit(cache=True)
    def _bn_backward_jit(grad, xhat, k, train):
        n, c, h, w = grad.shape
        count = n * h * w
        dshift = np.zeros(c, dtype=grad.dtype)
        dscale = np.zeros(c, dtype=grad.dtype)
        dx = np.empty_like(grad)
        for ch in range(c):
            a1 = 0.0
            a2 = 0.0
            for b in range(n):
                gp = grad[b, ch]
                xp = xhat[b, ch]
                for r in range(h):
                    for q in range(w):
                        a1 += gp[r, q]
                        a2 += gp[r, q] * xp[r, q]
            dshift[ch] = a1
            dscale[ch] = a2
            kc = k[ch]
            m1 = a1 / count if train else 0.0
            m2 = a2 / count if train else 0.0
            for b in range(n):
                gp = grad[b, ch]
                xp = xhat[b, ch]
                dp = dx[b, ch]
                for r in range(h):
                    for q in range(w):
                        dp[r, q] = kc * (gp[r, q] - m1 - xp[r, q] * m2)
        return dx, dscale, dshift


def _use_jit(*arrays) -> bool:
    return _numba is not None and USE_JIT and len({a.dtype for a in arrays}) == 1


def depthwise_forward(x: np.ndarray, weights: np.ndarray, stride: int = 1) -> np.ndarray:
    _check_stride(stride)
    k, k2, m = weights.shape
    _check_kernel(k)
    if k != k2:
        raise ShapeError(f"kernel must be square, got {k}x{k2}")
    if x.ndim != 4 or x.shape[1] != m:
        raise ShapeError(f"depthwise: input {x.shape} does not match filter channels {m}")
    ho, wo = _out_size(x.shape[2], stride), _out_size(x.shape[3], stride)
    xp = _pad(x, (k - 1) // 2)
    if _use_jit(x, weights):
        return _depthwise_jit(xp, np.ascontiguousarray(weights), stride, ho, wo)
    return _depthwise_numpy(xp, weights, stride, ho, wo)


def pointwise_forward(x: np.ndarray, weights: np.ndarray, stride: int = 1) -> np.ndarray:
    """1x1 convolution; ``stride`` subsamples the input (used by shortcut projections)."""
    _check_stride(stride)
    m, nout = weights.shape
    if x.ndim != 4 or x.shape[1] != m:
        raise ShapeError(f"pointwise: input {x.shape} does not match filter rows {m}")
    if stride > 1:
        x = x[:, :, ::stride, ::stride]
    n, _, h, w = x.shape
    out = np.matmul(weights.T, np.ascontiguousarray(x).reshape(n, m, h * w))
    return out.reshape(n, nout, h, w)


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))


def batchnorm_forward(x: np.ndarray, params: BatchNormParams, train: bool) -> np.ndarray:
    return BatchNorm().forward(x, params, train)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {x.shape}")
    return x.mean(axis=(2, 3))


def linear_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f"linear: input {x.shape}, weights {weights.shape}, bias {bias.shape} do not agree")
    return x @ weights + bias


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    return SoftmaxXent().forward(logits, labels)


# --------------------------------------------------------------------------
# cached layer objects

class Layer:
    """Base for the cached layers; ``backward`` returns ``(input_grad, {param: grad})``."""

    def __init__(self):
        self._cache = None

    def _take(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a cached forward pass")
        c, self._cache = self._cache, None
        return c

    @property
    def cached(self) -> bool:
        return self._cache is not None


class Conv2d(Layer):
    def __init__(self, stride: int = 1):
        super().__init__()
        self.stride = stride

    def forward(self, x, weights):
        _check_stride(self.stride)
        k, _, m, nout = weights.shape
        _check_kernel(k)
        if x.ndim != 4 or x.shape[1] != m:
            raise ShapeError(f"conv2d: input {x.shape} does not match filter in-channels {m}")
        cols, ho, wo = _im2col(x, k, self.stride)
        out = cols @ weights.reshape(k * k * m, nout)
        self._cache = (x.shape, cols, weights, ho, wo)
        return np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, nout).transpose(0, 3, 1, 2))

    def backward(self, grad, param_grads=True):
        xshape, cols, weights, ho, wo = self._take()
        k, _, m, nout = weights.shape
        n, _, h, w = xshape
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, nout)
        grads = {}
        if param_grads:
            grads["weights"] = (cols.T @ g2).reshape(weights.shape)
        dcols = (g2 @ weights.reshape(k * k * m, nout).T).reshape(n, ho, wo, k, k, m)
        p = (k - 1) // 2
        dxp = np.zeros((n, m, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        s = self.stride
        for i in range(k):
            for j in range(k):
                _tap(dxp, i, j, s, ho, wo)[...] += dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w], grads


class Depthwise(Layer):
    def __init__(self, stride: int = 1):
        super().__init__()
        self.stride = stride

    def forward(self, x, weights):
        out = depthwise_forward(x, weights, self.stride)
        self._cache = (x, weights)
        return out

    def backward(self, grad, param_grads=True):
        x, weights = self._take()
        p = (weights.shape[0] - 1) // 2
        h, w = x.shape[2:]
        xp = _pad(x, p)
        if _use_jit(x, weights, grad):
            dxp, dw = _depthwise_grads_jit(xp, np.ascontiguousarray(weights),
                                           np.ascontiguousarray(grad), self.stride, param_grads)
        else:
            dxp, dw = _depthwise_grads_numpy(xp, weights, grad, self.stride, param_grads)
        dx = dxp[:, :, p:p + h, p:p + w]
        grads = {"weights": dw} if param_grads else {}
        return dx, grads


class Pointwise(Layer):
    def __init__(self, stride: int = 1):
        super().__init__()
        self.stride = stride

    def forward(self, x, weights):
        out = pointwise_forward(x, weights, self.stride)
        self._cache = (x.shape, np.ascontiguousarray(x[:, :, ::self.stride, ::self.stride]), weights)
        return out

    def backward(self, grad, param_grads=True):
        xshape, xs, weights = self._take()
        n, m, h, w = xs.shape
        nout = weights.shape[1]
        g3 = grad.reshape(n, nout, h * w)
        grads = {}
        if param_grads:
            grads["weights"] = np.tensordot(xs.reshape(n, m, h * w), g3, axes=([0, 2], [0, 2]))
        dxs = np.matmul(weights, g3).reshape(n, m, h, w)
        if self.stride == 1:
            return dxs, grads
        dx = np.zeros(xshape, dtype=dxs.dtype)
        dx[:, :, ::self.stride, ::self.stride] = dxs
        return dx, grads


class BatchNorm(Layer):
    """Per-channel batch norm. Train mode uses batch statistics and updates the
    running estimates in place (running variance uses the unbiased estimate)."""

    def forward(self, x, params: BatchNormParams, train: bool, update_stats: bool = True):
        axes = (0, 2, 3)
        count = x.shape[0] * x.shape[2] * x.shape[3]
        jit = _use_jit(x, params.scale, params.shift)
        if train:
            if count < 2:
                raise ShapeError("batchnorm: train mode needs at least 2 values per channel")
            if jit:
                mean, var = _bn_stats_jit(np.ascontiguousarray(x))
                mean, var = mean.astype(x.dtype), var.astype(x.dtype)
            else:
                mean, var = x.mean(axis=axes), x.var(axis=axes)
            if update_stats:
                mom = params.momentum
                params.running_mean *= 1 - mom
                params.running_mean += mom * mean
                params.running_var *= 1 - mom
                params.running_var += mom * var * (count / (count - 1))
        else:
            mean, var = params.running_mean, params.running_var
        invstd = (1.0 / np.sqrt(var + params.epsilon)).astype(x.dtype)
        if jit:
            out, xhat = _bn_apply_jit(np.ascontiguousarray(x), mean.astype(x.dtype), invstd,
                                      params.scale, params.shift)
        else:
            xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
            out = xhat * params.scale[None, :, None, None] + params.shift[None, :, None, None]
        self._cache = (xhat, invstd, params.scale, train)
        return out

    def backward(self, grad, param_grads=True):
        xhat, invstd, scale, train = self._take()
        k = scale * invstd
        if _use_jit(grad, xhat, k):
            dx, dscale, dshift = _bn_backward_jit(np.ascontiguousarray(grad), xhat, k, train)
        else:
            axes = (0, 2, 3)
            dshift = grad.sum(axis=axes)
            dscale = (grad * xhat).sum(axis=axes)
            kb = k[None, :, None, None]
            if train:
                count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
                dx = kb * (grad - (dshift / count)[None, :, None, None] - xhat * (dscale / count)[None, :, None, None])
            else:
                dx = grad * kb
        grads = {"scale": dscale, "shift": dshift} if param_grads else {}
        return dx, grads


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad, param_grads=True):
        return grad * self._take(), {}


class GlobalAvgPool(Layer):
    def forward(self, x):
        out = global_avg_pool(x)
        self._cache = x.shape
        return out

    def backward(self, grad, param_grads=True):
        n, c, h, w = self._take()
        dx = np.broadcast_to((grad / (h * w))[:, :, None, None], (n, c, h, w))
        return np.ascontiguousarray(dx), {}


class Linear(Layer):
    def forward(self, x, weights, bias):
        out = linear_forward(x, weights, bias)
        self._cache = (x, weights)
        return out

    def backward(self, grad, param_grads=True):
        x, weights = self._take()
        grads = {"weights": x.T @ grad, "bias": grad.sum(axis=0)} if param_grads else {}
        return grad @ weights.T, grads


class SoftmaxXent(Layer):
    """Mean softmax cross-entropy over the batch. ``backward`` takes the scalar
    upstream gradient (1.0 for a loss at the top of the graph)."""

    def forward(self, logits, labels):
        labels = np.asarray(labels, dtype=np.int64)
        n, nclass = logits.shape
        if labels.shape != (n,):
            raise ShapeError(f"softmax_xent: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
        if n and (labels.min() < 0 or labels.max() >= nclass):
            raise InvalidArgumentError(f"softmax_xent: labels must lie in [0, {nclass})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        probs = np.exp(logp)
        loss = float(-logp[np.arange(n), labels].mean())
        self._cache = (probs, labels)
        return loss, probs

    def backward(self, grad=1.0, param_grads=True):
        probs, labels = self._take()
        n = probs.shape[0]
        d = probs.copy()
        d[np.arange(n), labels] -= 1
        return d * (grad / n), {}

