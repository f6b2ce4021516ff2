"""Small differentiable layer stack with hand-written backward passes.

Everything runs in float64. Images are laid out (batch, channels, height, width).
"""

from __future__ import annotations

import io
import struct

import numpy as np


class NetError(ValueError):
    pass


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Layer:
    code = 0
    param_names: tuple = ()
    state_names: tuple = ()  # params plus non-trainable buffers, in file order

    def __init__(self):
        self.params = {}

    def config(self) -> tuple:
        return ()

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, cache, dout):
        raise NotImplementedError

    def out_shape(self, in_shape):
        return in_shape

    def __repr__(self):
        return f"{type(self).__name__}{self.config()}"


class Affine(Layer):
    code = 1
    param_names = ("W", "b")
    state_names = ("W", "b")

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.n_in, self.n_out = int(n_in), int(n_out)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {"W": _glorot(rng, (self.n_in, self.n_out), self.n_in, self.n_out),
                       "b": np.zeros(self.n_out)}

    def config(self):
        return (self.n_in, self.n_out)

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise NetError(f"affine expects (batch, {self.n_in}), got {x.shape}")
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, x, dout):
        return dout @ self.params["W"].T, {"W": x.T @ dout, "b": dout.sum(axis=0)}

    def out_shape(self, in_shape):
        return (self.n_out,)


class ReLU(Layer):
    code = 2

    def forward(self, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, dout):
        return dout * mask, {}


class BatchNorm(Layer):
    """Per-feature normalization; for 4D input the features are channels."""

    code = 3
    param_names = ("gamma", "beta")
    state_names = ("gamma", "beta", "running_mean", "running_var")

    def __init__(self, features, momentum=0.9, eps=1e-5):
        super().__init__()
        self.features = int(features)
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": np.ones(self.features), "beta": np.zeros(self.features)}
        self.running_mean = np.zeros(self.features)
        self.running_var = np.ones(self.features)

    def config(self):
        return (self.features,)

    def _flat(self, x):
        if x.ndim == 4:
            return x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
        return x

    def _unflat(self, y, shape):
        if len(shape) == 4:
            b, c, h, w = shape
            return y.reshape(b, h, w, c).transpose(0, 3, 1, 2)
        return y

    def forward(self, x, train):
        xf = self._flat(x)
        if xf.shape[1] != self.features:
            raise NetError(f"batch_norm expects {self.features} features, got {xf.shape[1]}")
        if train:
            mu = xf.mean(axis=0)
            var = xf.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xf - mu) * inv
        y = xhat * self.params["gamma"] + self.params["beta"]
        return self._unflat(y, x.shape), (xhat, inv, x.shape, train)

    def backward(self, cache, dout):
        xhat, inv, shape, train = cache
        df = self._flat(dout)
        grads = {"gamma": np.sum(df * xhat, axis=0), "beta": df.sum(axis=0)}
        dxhat = df * self.params["gamma"]
        if train:
            m = df.shape[0]
            dx = inv / m * (m * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dx = dxhat * inv
        return self._unflat(dx, shape), grads

    def state(self, name):
        return getattr(self, name) if name.startswith("running") else self.params[name]


class Conv2d(Layer):
    """Stride-1 convolution with zero 'same' padding (odd kernels)."""

    code = 4
    param_names = ("W", "b")
    state_names = ("W", "b")

    def __init__(self, in_ch, out_ch, k, rng=None):
        super().__init__()
        self.in_ch, self.out_ch, self.k = int(in_ch), int(out_ch), int(k)
        if self.k % 2 != 1:
            raise NetError("conv2d kernels must have odd size")
        rng = rng if rng is not None else np.random.default_rng(0)
        kk = self.k * self.k
        self.params = {"W": _glorot(rng, (self.out_ch, self.in_ch, self.k, self.k),
                                    self.in_ch * kk, self.out_ch * kk),
                       "b": np.zeros(self.out_ch)}

    def config(self):
        return (self.in_ch, self.out_ch, self.k)

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise NetError(f"conv2d expects (batch, {self.in_ch}, h, w), got {x.shape}")
        b, c, h, w = x.shape
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, -1)
        out = cols @ self.params["W"].reshape(self.out_ch, -1).T + self.params["b"]
        return out.reshape(b, h, w, self.out_ch).transpose(0, 3, 1, 2), (cols, x.shape)

    def backward(self, cache, dout):
        cols, (b, c, h, w) = cache
        k, p = self.k, self.k // 2
        d = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        grads = {"W": (d.T @ cols).reshape(self.params["W"].shape), "b": d.sum(axis=0)}
        dcols = (d @ self.params["W"].reshape(self.out_ch, -1)).reshape(b, h, w, c, k, k)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w], grads

    def out_shape(self, in_shape):
        return (self.out_ch,) + tuple(in_shape[1:])


class MaxPool2d(Layer):
    """Non-overlapping k x k max pooling; trailing rows/columns are dropped."""

    code = 5

    def __init__(self, k):
        super().__init__()
        self.k = int(k)

    def config(self):
        return (self.k,)

    def forward(self, x, train):
        b, c, h, w = x.shape
        k = self.k
        ho, wo = h // k, w // k
        if ho == 0 or wo == 0:
            raise NetError(f"maxpool {k} on {h}x{w} maps leaves nothing")
        blocks = x[:, :, :ho * k, :wo * k].reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(b, c, ho, wo, k * k)
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return out, (arg, x.shape)

    def backward(self, cache, dout):
        arg, (b, c, h, w) = cache
        k = self.k
        ho, wo = dout.shape[2], dout.shape[3]
        blocks = np.zeros((b, c, ho, wo, k * k))
        np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
        blocks = blocks.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
        dx = np.zeros((b, c, h, w))
        dx[:, :, :ho * k, :wo * k] = blocks
        return dx, {}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.k, w // self.k)


class GlobalAvgPool(Layer):
    code = 6

    def forward(self, x, train):
        if x.ndim != 4:
            raise NetError(f"global_avg_pool expects 4D input, got {x.shape}")
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, shape, dout):
        b, c, h, w = shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).copy(), {}

    def out_shape(self, in_shape):
        return (in_shape[0],)


_LAYER_TYPES = {cls.code: cls for cls in (Affine, ReLU, BatchNorm, Conv2d, MaxPool2d, GlobalAvgPool)}


class NetStack:
    """Ordered layers applied in sequence."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, mode="train"):
        if mode not in ("train", "eval"):
            raise NetError(f"mode must be 'train' or 'eval', got {mode!r}")
        train = mode == "train"
        caches = []
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out, c = layer.forward(out, train)
            caches.append(c)
        if not np.all(np.isfinite(out)):
            raise NetError("non-finite activation")
        return out, (id(self), len(self.layers), caches)

    def __call__(self, x):
        return self.forward(x, "eval")[0]

    def backward(self, cache, dout):
        owner, n, caches = cache
        if owner != id(self) or n != len(self.layers):
            raise NetError("cache does not belong to this network")
        grads = [None] * n
        d = np.asarray(dout, dtype=np.float64)
        for i in range(n - 1, -1, -1):
            d, grads[i] = self.layers[i].backward(caches[i], d)
        return d, grads

    def parameters(self):
        """Trainable arrays in a fixed order, paired with their (layer, name) keys."""
        return [(i, name, layer.params[name]) for i, layer in enumerate(self.layers) for name in layer.param_names]

    def param_count(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def flat_grads(self, grads):
        return [grads[i][name] for i, name, _ in self.parameters()]

    def copy(self) -> "NetStack":
        return unpack_stack(io.BytesIO(pack_stack(self)))


def mlp(sizes, rng, final_relu=False) -> NetStack:
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(Affine(sizes[i], sizes[i + 1], rng))
        if i < len(sizes) - 2 or final_relu:
            layers.append(ReLU())
    return NetStack(layers)


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# optimizers


def _check_grads(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NetError("non-finite gradient")


class SGD:
    def __init__(self, lr=0.01):
        self.lr = lr

    def step(self, params, grads):
        _check_grads(grads)
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr=1e-3, beta1=0.93, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        _check_grads(grads)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, lr):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise NetError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic, numeric, floor=1e-4):
    """Coordinate-wise relative error; magnitudes below ``floor`` are compared
    on an absolute scale, since central differences carry ~1e-11 roundoff."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(net: NetStack, batch, loss_fn=None, target=None, h=1e-5, max_params=200,
               include_input=True, mode="train") -> dict:
    """Compare backprop gradients with central differences, coordinate by coordinate.

    ``loss_fn(output) -> (loss, dloss/doutput)``; defaults to MSE against
    ``target`` (zeros when not given). At most ``max_params`` parameter
    coordinates are probed, spread evenly across the network.
    """
    x = np.array(batch, dtype=np.float64)
    if loss_fn is None:
        def loss_fn(out):
            return mse_loss(out, np.zeros_like(out) if target is None else target)

    def total_loss():
        out, _ = net.forward(x, mode)
        return loss_fn(out)[0]

    snapshot = _buffers(net)
    out, cache = net.forward(x, mode)
    _, dout = loss_fn(out)
    dx, grads = net.backward(cache, dout)

    analytic, numeric = [], []
    params = net.parameters()
    coords = [(k, j) for k, (_, _, p) in enumerate(params) for j in range(p.size)]
    if len(coords) > max_params:
        pick = np.linspace(0, len(coords) - 1, max_params).round().astype(int)
        coords = [coords[i] for i in pick]
    for k, j in coords:
        li, name, p = params[k]
        flat = p.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        lp = total_loss()
        flat[j] = orig - h
        lm = total_loss()
        flat[j] = orig
        numeric.append((lp - lm) / (2 * h))
        analytic.append(grads[li][name].reshape(-1)[j])
    if include_input:
        xf = x.reshape(-1)
        step = max(1, xf.size // 50)
        for j in range(0, xf.size, step):
            orig = xf[j]
            xf[j] = orig + h
            lp = total_loss()
            xf[j] = orig - h
            lm = total_loss()
            xf[j] = orig
            numeric.append((lp - lm) / (2 * h))
            analytic.append(dx.reshape(-1)[j])
    _restore_buffers(net, snapshot)
    rel = relative_error(np.array(analytic), np.array(numeric))
    return {"max_rel_error": float(rel.max()) if rel.size else 0.0,
            "mean_rel_error": float(rel.mean()) if rel.size else 0.0,
            "checked": int(rel.size),
            "grad_norm": float(np.sqrt(sum(np.sum(g * g) for g in net.flat_grads(grads))))}


def _buffers(net):
    return [(l.running_mean.copy(), l.running_var.copy()) if isinstance(l, BatchNorm) else None for l in net.layers]


def _restore_buffers(net, snap):
    for layer, s in zip(net.layers, snap):
        if s is not None:
            layer.running_mean, layer.running_var = s


# ---------------------------------------------------------------------------
# model container: "RNET", version, stacks (layer table + f64 state), sections

MAGIC = b"RNET"
VERSION = 1


def _layer_state(layer):
    if isinstance(layer, BatchNorm):
        return [layer.state(n) for n in layer.state_names]
    return [layer.params[n] for n in layer.state_names]


def pack_stack(net: NetStack) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        cfg = layer.config()
        buf.write(struct.pack(f"<BI{len(cfg)}i", layer.code, len(cfg), *cfg))
        for arr in _layer_state(layer):
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def unpack_stack(fh) -> NetStack:
    (n,) = struct.unpack("<I", fh.read(4))
    layers = []
    for _ in range(n):
        code, nc = struct.unpack("<BI", fh.read(5))
        cfg = struct.unpack(f"<{nc}i", fh.read(4 * nc))
        if code not in _LAYER_TYPES:
            raise NetError(f"unknown layer code {code}")
        layer = _LAYER_TYPES[code](*cfg)
        for name, arr in zip(layer.state_names, _layer_state(layer)):
            data = np.frombuffer(fh.read(8 * arr.size), dtype="<f8").astype(np.float64).reshape(arr.shape)
            if name.startswith("running"):
                setattr(layer, name, data)
            else:
                layer.params[name] = data
        layers.append(layer)
    return NetStack(layers)


def write_model(path, stacks, sections=()) -> None:
    """Write networks plus tagged binary sections (4-byte tag, payload)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(stacks)))
        for net in stacks:
            fh.write(pack_stack(net))
        fh.write(struct.pack("<I", len(sections)))
        for tag, payload in sections:
            if len(tag) != 4:
                raise NetError("section tags are 4 bytes")
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def read_model(path):
    with open(path, "rb") as f:
        fh = io.BytesIO(f.read())
    if fh.read(4) != MAGIC:
        raise NetError(f"{path}: not an RNET model file")
    version, n = struct.unpack("<II", fh.read(8))
    if version != VERSION:
        raise NetError(f"{path}: unsupported model version {version}")
    stacks = [unpack_stack(fh) for _ in range(n)]
    (ns,) = struct.unpack("<I", fh.read(4))
    sections = {}
    for _ in range(ns):
        tag = fh.read(4)
        (length,) = struct.unpack("<Q", fh.read(8))
        sections[tag] = fh.read(length)
    return stacks, sections
