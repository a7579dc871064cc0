"""Neural net layers with hand-written forward and backward passes.

Everything operates on plain numpy arrays.  Each layer caches what its
backward pass needs during ``forward(..., cache=True)``; calling
``backward`` without a cached forward raises.  Backward passes accumulate
into ``ParamTensor.grad`` and return the gradient w.r.t. the layer input,
so whole models can be checked against finite differences.

Conventions:
  - conv inputs are [B, C, T, F] (batch, channels, time, frequency)
  - recurrent inputs are [B, T, D]
  - convolutions are 3x3, stride 1, zero same-padding (pad 1): pooling is
    the only operation allowed to change spatial extents
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigError, ParamTensor, ShapeError, glorot_uniform

__all__ = [
    "Conv2d",
    "BatchNorm2d",
    "AvgPool2d",
    "ReLU",
    "Sigmoid",
    "Dropout",
    "Linear",
    "BiGru",
    "sigmoid",
    "relu",
]


def sigmoid(x):
    """Numerically safe logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0)


class _NoCache(RuntimeError):
    pass


def _need(cache, name):
    if cache is None:
        raise _NoCache(f"{name}: backward before forward (no cached activations)")
    return cache


class Conv2d:
    """3x3 convolution, stride 1, zero same-padding of 1 on both spatial axes."""

    KERNEL = 3

    def __init__(self, in_channels, out_channels, rng=None, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        k = self.KERNEL
        fan_in = in_channels * k * k
        fan_out = out_channels * k * k
        if rng is None:
            w = np.zeros((out_channels, in_channels, k, k), dtype=dtype)
        else:
            w = glorot_uniform(rng, (out_channels, in_channels, k, k), fan_in, fan_out, dtype)
        self.weight = ParamTensor(w)
        self.bias = ParamTensor(np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, cache=True):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv2d: expected input [B,{self.in_channels},T,F], got {list(x.shape)}"
            )
        b, c, t, f = x.shape
        k = self.KERNEL
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # [B,C,T,F,k,k] view over the padded map, one window per output pixel
        win = sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * t * f, c * k * k)
        w2 = self.weight.value.reshape(self.out_channels, c * k * k)
        out = cols @ w2.T + self.bias.value
        out = out.reshape(b, t, f, self.out_channels).transpose(0, 3, 1, 2)
        self._cache = (cols, x.shape) if cache else None
        return np.ascontiguousarray(out)

    def backward(self, grad_out):
        cols, xshape = _need(self._cache, "conv2d")
        b, c, t, f = xshape
        k = self.KERNEL
        if grad_out.shape != (b, self.out_channels, t, f):
            raise ShapeError(
                f"conv2d backward: grad shape {list(grad_out.shape)} does not match "
                f"forward output [{b},{self.out_channels},{t},{f}]"
            )
        gmat = grad_out.transpose(0, 2, 3, 1).reshape(b * t * f, self.out_channels)
        self.weight.grad += (gmat.T @ cols).reshape(self.weight.shape)
        self.bias.grad += gmat.sum(axis=0)
        dcols = (gmat @ self.weight.value.reshape(self.out_channels, c * k * k))
        dwin = dcols.reshape(b, t, f, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        gpad = np.zeros((b, c, t + 2, f + 2), dtype=grad_out.dtype)
        for ki in range(k):
            for kj in range(k):
                gpad[:, :, ki:ki + t, kj:kj + f] += dwin[:, :, :, :, ki, kj]
        return gpad[:, :, 1:t + 1, 1:f + 1]


class BatchNorm2d:
    """Per-channel batch normalization over the (batch, time, frequency) axes.

    Train mode normalizes with biased batch statistics and, when ``track``
    is set, folds them into the running estimates.  Eval mode is a fixed
    affine map from the running statistics (initialized to mean 0, var 1,
    so an eval pass before any training is well defined).
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"batchnorm momentum must be in (0,1), got {momentum}")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = ParamTensor(np.ones(channels, dtype=dtype))
        self.beta = ParamTensor(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffers(self, running_mean, running_var):
        self.running_mean = np.asarray(running_mean, dtype=self.running_mean.dtype).copy()
        self.running_var = np.asarray(running_var, dtype=self.running_var.dtype).copy()

    def forward(self, x, train, cache=True, track=True):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm: expected [B,{self.channels},T,F], got {list(x.shape)}")
        g = self.gamma.value[None, :, None, None]
        b = self.beta.value[None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
            if track:
                m = self.momentum
                self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(
                    self.running_mean.dtype)
                self.running_var = ((1 - m) * self.running_var + m * var).astype(
                    self.running_var.dtype)
            self._cache = (xhat, inv_std, True) if cache else None
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
            self._cache = (xhat, inv_std, False) if cache else None
        return g * xhat + b

    def backward(self, grad_out):
        xhat, inv_std, was_train = _need(self._cache, "batchnorm")
        axes = (0, 2, 3)
        self.gamma.grad += (grad_out * xhat).sum(axis=axes)
        self.beta.grad += grad_out.sum(axis=axes)
        dxhat = grad_out * self.gamma.value[None, :, None, None]
        if not was_train:
            return dxhat * inv_std[None, :, None, None]
        n = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        mean_d = dxhat.mean(axis=axes)[None, :, None, None]
        mean_dx = (dxhat * xhat).mean(axis=axes)[None, :, None, None]
        return (dxhat - mean_d - xhat * mean_dx) * inv_std[None, :, None, None]


class AvgPool2d:
    """Non-overlapping average pooling; kernel equals stride."""

    def __init__(self, kt, kf):
        self.kt = kt
        self.kf = kf
        self._cache = None

    def forward(self, x, cache=True):
        b, c, t, f = x.shape
        if t % self.kt or f % self.kf:
            raise ShapeError(
                f"avgpool: extents ({t},{f}) not divisible by kernel ({self.kt},{self.kf})"
            )
        out = x.reshape(b, c, t // self.kt, self.kt, f // self.kf, self.kf).mean(axis=(3, 5))
        self._cache = x.shape if cache else None
        return out

    def backward(self, grad_out):
        b, c, t, f = _need(self._cache, "avgpool")
        scale = 1.0 / (self.kt * self.kf)
        g = grad_out[:, :, :, None, :, None] * scale
        g = np.broadcast_to(g, (b, c, t // self.kt, self.kt, f // self.kf, self.kf))
        return g.reshape(b, c, t, f).copy()


class ReLU:
    def __init__(self):
        self._cache = None

    def forward(self, x, cache=True):
        out = np.maximum(x, 0)
        self._cache = (x > 0) if cache else None
        return out

    def backward(self, grad_out):
        mask = _need(self._cache, "relu")
        return grad_out * mask


class Sigmoid:
    def __init__(self):
        self._cache = None

    def forward(self, x, cache=True):
        out = sigmoid(x)
        self._cache = out if cache else None
        return out

    def backward(self, grad_out):
        out = _need(self._cache, "sigmoid")
        return grad_out * out * (1.0 - out)


class Dropout:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
        self.rate = rate
        self._cache = None

    def forward(self, x, train, rng=None, cache=True):
        if not train or self.rate == 0.0:
            self._cache = None if not cache else 1.0
            return x
        if rng is None:
            raise ConfigError("dropout in train mode needs an rng")
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / keep
        self._cache = mask if cache else None
        return x * mask

    def backward(self, grad_out):
        mask = _need(self._cache, "dropout")
        return grad_out * mask


class Linear:
    """Affine map over the trailing dimension."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            w = glorot_uniform(rng, (out_features, in_features), in_features, out_features, dtype)
        self.weight = ParamTensor(w)
        self.bias = ParamTensor(np.zeros(out_features, dtype=dtype))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, cache=True):
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"linear: trailing dim {x.shape[-1]} != in_features {self.in_features}"
            )
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.in_features)
        out = x2 @ self.weight.value.T + self.bias.value
        self._cache = (x2, lead) if cache else None
        return out.reshape(*lead, self.out_features)

    def backward(self, grad_out):
        x2, lead = _need(self._cache, "linear")
        g2 = grad_out.reshape(-1, self.out_features)
        self.weight.grad += g2.T @ x2
        self.bias.grad += g2.sum(axis=0)
        return (g2 @ self.weight.value).reshape(*lead, self.in_features)


class _GruDirection:
    """One scan direction of one GRU layer.

    Gate order inside the stacked [3H, .] matrices is (z, r, n): update,
    reset, candidate.  The candidate uses the reset gate on the hidden
    projection: n = tanh(Wn x + bxn + r * (Un h + bhn)).
    """

    def __init__(self, input_size, hidden_size, rng=None, dtype=np.float32):
        h = hidden_size
        if rng is None:
            w = np.zeros((3 * h, input_size), dtype=dtype)
            u = np.zeros((3 * h, h), dtype=dtype)
        else:
            w = glorot_uniform(rng, (3 * h, input_size), input_size, h, dtype)
            u = glorot_uniform(rng, (3 * h, h), h, h, dtype)
        self.W = ParamTensor(w)
        self.U = ParamTensor(u)
        self.bx = ParamTensor(np.zeros(3 * h, dtype=dtype))
        self.bh = ParamTensor(np.zeros(3 * h, dtype=dtype))
        self.hidden_size = h

    def params(self):
        return [self.W, self.U, self.bx, self.bh]

    def scan(self, x, reverse, cache=True):
        b, t, _ = x.shape
        hdim = self.hidden_size
        gi_all = x @ self.W.value.T + self.bx.value  # [B,T,3H]
        order = range(t - 1, -1, -1) if reverse else range(t)
        h = np.zeros((b, hdim), dtype=x.dtype)
        out = np.empty((b, t, hdim), dtype=x.dtype)
        if cache:
            Z = np.empty((b, t, hdim), dtype=x.dtype)
            R = np.empty_like(Z)
            N = np.empty_like(Z)
            GHN = np.empty_like(Z)
            HPREV = np.empty_like(Z)
        for step in order:
            gh = h @ self.U.value.T + self.bh.value
            z = sigmoid(gi_all[:, step, :hdim] + gh[:, :hdim])
            r = sigmoid(gi_all[:, step, hdim:2 * hdim] + gh[:, hdim:2 * hdim])
            ghn = gh[:, 2 * hdim:]
            n = np.tanh(gi_all[:, step, 2 * hdim:] + r * ghn)
            if cache:
                Z[:, step] = z
                R[:, step] = r
                N[:, step] = n
                GHN[:, step] = ghn
                HPREV[:, step] = h
            h = (1.0 - z) * n + z * h
            out[:, step] = h
        self._cache = (x, Z, R, N, GHN, HPREV, reverse) if cache else None
        return out

    def backprop(self, grad_out):
        x, Z, R, N, GHN, HPREV, reverse = _need(self._cache, "gru")
        b, t, _ = x.shape
        hdim = self.hidden_size
        order = range(t - 1, -1, -1) if reverse else range(t)
        dgi_all = np.empty((b, t, 3 * hdim), dtype=x.dtype)
        dgh_all = np.empty_like(dgi_all)
        dh = np.zeros((b, hdim), dtype=x.dtype)
        for step in reversed(list(order)):
            dh = dh + grad_out[:, step]
            z, r, n, ghn, h_prev = (Z[:, step], R[:, step], N[:, step],
                                    GHN[:, step], HPREV[:, step])
            dz = dh * (h_prev - n)
            dn = dh * (1.0 - z)
            dh_prev = dh * z
            dn_pre = dn * (1.0 - n * n)
            dghn = dn_pre * r
            dr = dn_pre * ghn
            dr_pre = dr * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            dgi_all[:, step, :hdim] = dz_pre
            dgi_all[:, step, hdim:2 * hdim] = dr_pre
            dgi_all[:, step, 2 * hdim:] = dn_pre
            dgh_all[:, step, :hdim] = dz_pre
            dgh_all[:, step, hdim:2 * hdim] = dr_pre
            dgh_all[:, step, 2 * hdim:] = dghn
            dh = dh_prev + dgh_all[:, step] @ self.U.value
        flat_gi = dgi_all.reshape(b * t, 3 * hdim)
        flat_gh = dgh_all.reshape(b * t, 3 * hdim)
        self.W.grad += flat_gi.T @ x.reshape(b * t, -1)
        self.U.grad += flat_gh.T @ HPREV.reshape(b * t, hdim)
        self.bx.grad += flat_gi.sum(axis=0)
        self.bh.grad += flat_gh.sum(axis=0)
        return dgi_all @ self.W.value


class BiGru:
    """Stacked bidirectional GRU; each layer concatenates forward and
    backward hidden sequences, so the output feature size is 2*hidden."""

    def __init__(self, input_size, hidden_size, num_layers=2, rng=None, dtype=np.float32):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.layers = []
        for layer in range(num_layers):
            d = input_size if layer == 0 else 2 * hidden_size
            fwd = _GruDirection(d, hidden_size, rng, dtype)
            bwd = _GruDirection(d, hidden_size, rng, dtype)
            self.layers.append((fwd, bwd))

    def params(self):
        out = []
        for fwd, bwd in self.layers:
            out.extend(fwd.params())
            out.extend(bwd.params())
        return out

    def forward(self, x, cache=True):
        if x.ndim != 3 or x.shape[-1] != self.input_size:
            raise ShapeError(f"bigru: expected [B,T,{self.input_size}], got {list(x.shape)}")
        if x.shape[1] == 0:
            raise ShapeError("bigru: empty time axis")
        h = x
        for fwd, bwd in self.layers:
            hf = fwd.scan(h, reverse=False, cache=cache)
            hb = bwd.scan(h, reverse=True, cache=cache)
            h = np.concatenate([hf, hb], axis=-1)
        return h

    def backward(self, grad_out):
        hdim = self.hidden_size
        g = grad_out
        for fwd, bwd in reversed(self.layers):
            gf = fwd.backprop(np.ascontiguousarray(g[..., :hdim]))
            gb = bwd.backprop(np.ascontiguousarray(g[..., hdim:]))
            g = gf + gb
        return g
