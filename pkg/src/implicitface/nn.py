"""Minimal trainable-network substrate: dense / conv2d / conv3d layers with
manual backpropagation, RMSprop updates, and a finite-difference gradient checker.

All training arithmetic is float32; the gradient checker promotes a copy of the
network to float64 so truncation error does not mask implementation error.
"""

import logging

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
LAYER_KINDS = ("dense", "conv2d", "conv3d")


class NetworkError(ValueError):
    pass


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0)
    if kind == "sigmoid":
        # exp overflow for very negative z saturates to exactly 0, which is
        # the right limit; suppress the spurious warning
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-z))
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def glorot(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """One trainable layer. Weight layouts:

    dense  -- (fan_in, fan_out), input (..., fan_in)
    conv2d -- (kh, kw, cin, cout), input (H, W, cin), zero-padded same, stride s
    conv3d -- (kd, kh, kw, cin, cout), input (D, H, W, cin)
    """

    def __init__(self, kind, weights, bias, activation="relu", stride=1):
        if kind not in LAYER_KINDS:
            raise NetworkError(f"unknown layer kind {kind!r}")
        if activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {activation!r}")
        if kind == "dense" and weights.ndim != 2:
            raise NetworkError("dense weights must be 2-d")
        if kind == "conv2d" and weights.ndim != 4:
            raise NetworkError("conv2d weights must be 4-d")
        if kind == "conv3d" and weights.ndim != 5:
            raise NetworkError("conv3d weights must be 5-d")
        if bias.shape != (weights.shape[-1],):
            raise NetworkError("bias shape inconsistent with weights")
        if stride < 1:
            raise NetworkError("stride must be positive")
        self.kind = kind
        self.weights = weights
        self.bias = bias
        self.activation = activation
        self.stride = stride

    def astype(self, dtype):
        return Layer(self.kind, self.weights.astype(dtype),
                     self.bias.astype(dtype), self.activation, self.stride)


def dense(rng, fan_in, fan_out, activation="relu"):
    w = glorot(rng, (fan_in, fan_out), fan_in, fan_out)
    return Layer("dense", w, np.zeros(fan_out, np.float32), activation)


def conv2d(rng, cin, cout, k=3, activation="relu", stride=1):
    fan_in, fan_out = k * k * cin, k * k * cout
    w = glorot(rng, (k, k, cin, cout), fan_in, fan_out)
    return Layer("conv2d", w, np.zeros(cout, np.float32), activation, stride)


def conv3d(rng, cin, cout, k=3, activation="relu", stride=1):
    fan_in, fan_out = k * k * k * cin, k * k * k * cout
    w = glorot(rng, (k, k, k, cin, cout), fan_in, fan_out)
    return Layer("conv3d", w, np.zeros(cout, np.float32), activation, stride)


def _conv_windows(xp, ksizes, stride):
    # sliding windows over the leading spatial axes, channel axis last
    nsp = len(ksizes)
    win = np.lib.stride_tricks.sliding_window_view(xp, ksizes, axis=tuple(range(nsp)))
    win = win[(slice(None, None, stride),) * nsp]
    # (spatial..., C, k...) -> (spatial..., k..., C)
    order = tuple(range(nsp)) + tuple(nsp + 1 + i for i in range(nsp)) + (nsp,)
    return np.transpose(win, order)


def _forward_conv(layer, x):
    nsp = layer.weights.ndim - 2
    if x.ndim != nsp + 1 or x.shape[-1] != layer.weights.shape[-2]:
        raise NetworkError(
            f"{layer.kind} input shape {x.shape} does not match weights "
            f"{layer.weights.shape}")
    ksizes = layer.weights.shape[:nsp]
    pads = tuple((k // 2, k // 2) for k in ksizes) + ((0, 0),)
    xp = np.pad(x, pads)
    win = _conv_windows(xp, ksizes, layer.stride)
    out_spatial = win.shape[:nsp]
    cols = win.reshape(-1, int(np.prod(ksizes)) * x.shape[-1])
    wmat = layer.weights.reshape(-1, layer.weights.shape[-1])
    z = cols @ wmat + layer.bias
    z = z.reshape(out_spatial + (layer.weights.shape[-1],))
    return z, (xp, cols)


def _backward_conv(layer, cache, x_shape, dz):
    xp, cols = cache
    nsp = layer.weights.ndim - 2
    ksizes = layer.weights.shape[:nsp]
    cout = layer.weights.shape[-1]
    dz_flat = dz.reshape(-1, cout)
    dw = (cols.T @ dz_flat).reshape(layer.weights.shape)
    db = dz_flat.sum(axis=0)
    wmat = layer.weights.reshape(-1, cout)
    dcols = dz_flat @ wmat.T
    dcols = dcols.reshape(dz.shape[:nsp] + ksizes + (x_shape[-1],))
    dxp = np.zeros(xp.shape, dz.dtype)
    s = layer.stride
    out_spatial = dz.shape[:nsp]
    if nsp == 2:
        ho, wo = out_spatial
        for i in range(ksizes[0]):
            for j in range(ksizes[1]):
                dxp[i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
    else:
        do, ho, wo = out_spatial
        for i in range(ksizes[0]):
            for j in range(ksizes[1]):
                for k in range(ksizes[2]):
                    dxp[i:i + s * do:s, j:j + s * ho:s, k:k + s * wo:s] += \
                        dcols[:, :, :, i, j, k]
    # strip padding
    slc = tuple(slice(k // 2, k // 2 + x_shape[i]) for i, k in enumerate(ksizes))
    return dw, db, dxp[slc]


def forward_layer(layer, x):
    if layer.kind == "dense":
        if x.shape[-1] != layer.weights.shape[0]:
            raise NetworkError(
                f"dense input width {x.shape[-1]} != fan_in {layer.weights.shape[0]}")
        z = x @ layer.weights + layer.bias
        cache = x
    else:
        z, cache = _forward_conv(layer, x)
    a = _activate(z, layer.activation)
    return a, (z, a, cache, x.shape)


def backward_layer(layer, cache, da):
    z, a, inner, x_shape = cache
    dz = da * _activation_grad(z, a, layer.activation)
    if layer.kind == "dense":
        x = inner
        x2 = x.reshape(-1, x.shape[-1])
        dz2 = dz.reshape(-1, dz.shape[-1])
        dw = x2.T @ dz2
        db = dz2.sum(axis=0)
        dx = (dz2 @ layer.weights.T).reshape(x.shape)
        return dw, db, dx
    return _backward_conv(layer, inner, x_shape, dz)


class Network:
    """Ordered stack of layers with manual forward/backward."""

    def __init__(self, name, layers):
        self.name = name
        self.layers = list(layers)

    def forward(self, x):
        caches = []
        for i, layer in enumerate(self.layers):
            try:
                x, cache = forward_layer(layer, x)
            except NetworkError as exc:
                raise NetworkError(f"{self.name}: layer {i}: {exc}") from None
            caches.append(cache)
        return x, caches

    def backward(self, caches, dout):
        if len(caches) != len(self.layers):
            raise NetworkError(f"{self.name}: cache does not match network")
        grads = [None] * len(self.layers)
        dx = dout
        for i in range(len(self.layers) - 1, -1, -1):
            if caches[i][1].shape != dx.shape:
                raise NetworkError(
                    f"{self.name}: layer {i}: gradient shape {dx.shape} does "
                    f"not match cached output {caches[i][1].shape}")
            dw, db, dx = backward_layer(self.layers[i], caches[i], dx)
            grads[i] = (dw, db)
        return grads, dx

    def parameters(self):
        for i, layer in enumerate(self.layers):
            yield f"{self.name}/layer{i}/weights", layer.weights
            yield f"{self.name}/layer{i}/bias", layer.bias

    def astype(self, dtype):
        return Network(self.name, [l.astype(dtype) for l in self.layers])

    def copy(self):
        return self.astype(np.float32)


class RMSprop:
    """theta <- theta - lr * g / sqrt(acc + eps), acc <- rho*acc + (1-rho)*g^2."""

    def __init__(self, lr, rho=0.9, eps=1e-8):
        if not (lr > 0 and 0 < rho < 1 and eps > 0):
            raise ValueError("invalid optimizer hyperparameters")
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.acc = {}

    def step(self, net, grads):
        """Apply one update to `net` given `grads` from Network.backward.

        A non-finite gradient anywhere rejects the whole step and leaves both
        the network and the accumulators untouched.
        """
        if len(grads) != len(net.layers):
            raise NetworkError(f"{net.name}: gradient list does not match network")
        for i, (dw, db) in enumerate(grads):
            layer = net.layers[i]
            if dw.shape != layer.weights.shape or db.shape != layer.bias.shape:
                raise NetworkError(f"{net.name}: layer {i}: gradient shape mismatch")
            if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                log.warning("non-finite gradient for %s layer %d; step rejected",
                            net.name, i)
                return False
        for i, (dw, db) in enumerate(grads):
            layer = net.layers[i]
            for key, theta, g in ((f"{net.name}/{i}/w", layer.weights, dw),
                                  (f"{net.name}/{i}/b", layer.bias, db)):
                g = g.astype(np.float32)
                acc = self.acc.get(key)
                if acc is None:
                    acc = np.zeros_like(theta)
                acc = self.rho * acc + (1.0 - self.rho) * g * g
                self.acc[key] = acc
                theta -= self.lr * g / np.sqrt(acc + self.eps)
        return True

    def step_many(self, nets_grads):
        """All-or-nothing update over a list of (net, grads) pairs."""
        for net, grads in nets_grads:
            for dw, db in grads:
                if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
                    log.warning("non-finite gradient for %s; step rejected", net.name)
                    return False
        for net, grads in nets_grads:
            self.step(net, grads)
        return True


def gradient_check(net, x, h=1e-4, max_tries=10, rng=None):
    """Max relative error between analytic and central-difference gradients.

    Uses loss L = 0.5*sum(y^2) in float64. Inputs landing within 10*h of a relu
    kink make central differences meaningless, so the input is jittered until
    every pre-activation is clear of the kink.
    """
    rng = rng or np.random.default_rng(0)
    net64 = net.astype(np.float64)
    x = x.astype(np.float64)
    for _ in range(max_tries):
        _, caches = net64.forward(x)
        near_kink = any(
            l.activation == "relu" and np.any(np.abs(c[0]) < 10 * h)
            for l, c in zip(net64.layers, caches))
        if not near_kink:
            break
        x = x + rng.normal(0, 0.05, x.shape)
    y, caches = net64.forward(x)
    grads, dx = net64.backward(caches, y)

    def loss(inp):
        out, _ = net64.forward(inp)
        return 0.5 * float(np.sum(out * out))

    worst = 0.0
    for i, layer in enumerate(net64.layers):
        for theta, analytic in ((layer.weights, grads[i][0]),
                                (layer.bias, grads[i][1])):
            flat = theta.reshape(-1)
            idxs = range(flat.size) if flat.size <= 64 else \
                rng.choice(flat.size, 64, replace=False)
            for j in idxs:
                old = flat[j]
                flat[j] = old + h
                lp = loss(x)
                flat[j] = old - h
                lm = loss(x)
                flat[j] = old
                numeric = (lp - lm) / (2 * h)
                a = analytic.reshape(-1)[j]
                denom = max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, abs(a - numeric) / denom)
    # input gradient too
    xf = x.reshape(-1)
    idxs = range(xf.size) if xf.size <= 64 else rng.choice(xf.size, 64, replace=False)
    for j in idxs:
        old = xf[j]
        xf[j] = old + h
        lp = loss(x)
        xf[j] = old - h
        lm = loss(x)
        xf[j] = old
        numeric = (lp - lm) / (2 * h)
        a = dx.reshape(-1)[j]
        denom = max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, abs(a - numeric) / denom)
    return worst
