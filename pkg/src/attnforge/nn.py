"""Minimal differentiable numerics: parameters, layer forward/backward
passes, Adam, dropout, and finite-difference gradient verification.

Everything is float64. Layers are plain functions returning a cache for
the matching backward function; gradients accumulate into a ParamStore.
"""

from dataclasses import dataclass, field

import numpy as np

from .rng import named_rng


class NonFiniteError(ValueError):
    """A tensor that must be finite contained NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)


class ParamStore:
    """Ordered name -> Param map. Iteration order is registration order;
    the checkpoint blob layout depends on it."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self._flat: dict[str, np.ndarray] | None = None

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        if self._flat is not None:
            raise RuntimeError("cannot add parameters after consolidation")
        p = Param(value)
        self._params[name] = p
        return p

    def consolidate(self):
        """Re-back all tensors with views into four flat buffers so the
        optimizer can update everything in one vectorized pass."""
        n = self.total_size()
        self._flat = {k: np.zeros(n) for k in ("value", "grad", "m", "v")}
        offset = 0
        for p in self._params.values():
            size = p.value.size
            shape = p.value.shape
            sl = slice(offset, offset + size)
            self._flat["value"][sl] = p.value.reshape(-1)
            p.value = self._flat["value"][sl].reshape(shape)
            p.grad = self._flat["grad"][sl].reshape(shape)
            p.adam_m = self._flat["m"][sl].reshape(shape)
            p.adam_v = self._flat["v"][sl].reshape(shape)
            offset += size

    @property
    def flat(self):
        return self._flat

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    def total_size(self) -> int:
        return sum(p.value.size for p in self._params.values())


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0.0:
            raise ValueError("eps must be positive")


def _adam_apply(value, grad, m, v, config: AdamConfig, bc1: float, bc2: float):
    m *= config.beta1
    m += (1.0 - config.beta1) * grad
    v *= config.beta2
    grad *= grad
    v += (1.0 - config.beta2) * grad
    denom = np.sqrt(v / bc2)
    denom += config.eps
    value -= config.lr * (m / bc1) / denom
    grad[...] = 0.0


def adam_update(store: ParamStore, config: AdamConfig):
    """Bias-corrected Adam step in place; gradients are zeroed afterward."""
    config.step += 1
    t = config.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    if store.flat is not None:
        check_finite(store.flat["grad"], "gradients")
        _adam_apply(store.flat["value"], store.flat["grad"], store.flat["m"],
                    store.flat["v"], config, bc1, bc2)
        return
    for name, p in store:
        check_finite(p.grad, f"gradient of {name}")
        _adam_apply(p.value, p.grad, p.adam_m, p.adam_v, config, bc1, bc2)


# ---------------------------------------------------------------- activations

def sigmoid(x):
    # exp overflow for very negative x saturates to inf -> output exactly 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def softmax(x: np.ndarray) -> np.ndarray:
    """Stable softmax along the last axis; output is a strict simplex."""
    x = np.asarray(x, dtype=np.float64)
    check_finite(x, "softmax input")
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    out = z / np.sum(z, axis=-1, keepdims=True)
    # keep the simplex strict even when exp underflows for huge spreads
    return np.maximum(out, 1e-300)


def softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # dL/dx = y * (dy - y.dy)
    dot = np.sum(y * dy, axis=-1, keepdims=True)
    return y * (dy - dot)


# ---------------------------------------------------------------------- loss

def cross_entropy_loss(logits: np.ndarray, targets, pad_mask=None):
    """Mean -log softmax(logits_t)[target_t] over non-pad rows.

    Returns (loss, dlogits). Gradient rows for pad positions are zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    T, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if pad_mask is None:
        pad_mask = np.ones(T, dtype=bool)
    else:
        pad_mask = np.asarray(pad_mask, dtype=bool)
    count = int(pad_mask.sum())
    if count == 0:
        raise ValueError("all positions are padding")
    if np.any(targets[pad_mask] >= V) or np.any(targets[pad_mask] < 0):
        raise ValueError("target id out of vocabulary range")
    probs = softmax(logits)
    picked = probs[np.arange(T), targets]
    loss = -np.sum(np.log(picked[pad_mask])) / count
    dlogits = probs.copy()
    dlogits[np.arange(T), targets] -= 1.0
    dlogits /= count
    dlogits[~pad_mask] = 0.0
    return loss, dlogits


# -------------------------------------------------------------------- layers

def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    return x @ W + b, (x, W)


def affine_backward(dout: np.ndarray, cache):
    x, W = cache
    dx = dout @ W.T
    dW = np.outer(x, dout) if x.ndim == 1 else x.T @ dout
    db = dout if dout.ndim == 1 else dout.sum(axis=0)
    return dx, dW, db


def lstm_step(x: np.ndarray, h: np.ndarray, c: np.ndarray, W: np.ndarray, b: np.ndarray):
    """One LSTM cell step. Gate layout along the 4H axis: input, forget,
    output, candidate. Returns (h', c', cache)."""
    H = h.shape[0]
    if W.shape != (x.shape[0] + H, 4 * H):
        raise ValueError(f"weight shape {W.shape} does not match inputs")
    xh = np.concatenate([x, h])
    gates = xh @ W + b
    i = sigmoid(gates[:H])
    f = sigmoid(gates[H:2 * H])
    o = sigmoid(gates[2 * H:3 * H])
    g = np.tanh(gates[3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache = (xh, c, i, f, o, g, tc, W)
    return h_new, c_new, cache


def lstm_step_backward_gates(dh: np.ndarray, dc: np.ndarray, cache):
    """Backward pass deferring the weight gradient: returns
    (dx, dh_prev, dc_prev, dgates); dW is xh^T dgates, summable over steps."""
    xh, c_prev, i, f, o, g, tc, W = cache
    H = i.shape[0]
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc ** 2)
    di = dc_total * g
    df = dc_total * c_prev
    dg = dc_total * i
    dgates = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g ** 2),
    ])
    dxh = W @ dgates
    dx = dxh[:-H]
    dh_prev = dxh[-H:]
    dc_prev = dc_total * f
    return dx, dh_prev, dc_prev, dgates


def lstm_step_backward(dh: np.ndarray, dc: np.ndarray, cache):
    """Returns (dx, dh_prev, dc_prev, dW, db)."""
    xh = cache[0]
    dx, dh_prev, dc_prev, dgates = lstm_step_backward_gates(dh, dc, cache)
    return dx, dh_prev, dc_prev, np.outer(xh, dgates), dgates


def _im2col(x: np.ndarray, k: int = 3, stride: int = 2):
    """k x k patches with zero padding k//2. x is (H, W, C); returns
    (Ho*Wo, k*k*C) plus the output dims."""
    H, W, C = x.shape
    p = k // 2
    Ho = (H + 2 * p - k) // stride + 1
    Wo = (W + 2 * p - k) // stride + 1
    xp = np.zeros((H + 2 * p, W + 2 * p, C))
    xp[p:p + H, p:p + W] = x
    cols = np.empty((Ho, Wo, k * k * C))
    for dy in range(k):
        for dx in range(k):
            patch = xp[dy:dy + stride * (Ho - 1) + 1:stride,
                       dx:dx + stride * (Wo - 1) + 1:stride]
            cols[:, :, (dy * k + dx) * C:(dy * k + dx + 1) * C] = patch
    return cols.reshape(Ho * Wo, k * k * C), Ho, Wo


def convs2_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, k: int = 3):
    """k x k convolution (k odd), stride 2, zero padding k//2.
    x: (H, W, Cin), W: (k*k*Cin, Cout), b: (Cout,). Returns (out, cache)."""
    cols, Ho, Wo = _im2col(x, k)
    out = (cols @ W + b).reshape(Ho, Wo, -1)
    return out, (cols, x.shape, W, k)


def convs2_backward(dout: np.ndarray, cache):
    cols, x_shape, W, k = cache
    H, Wd, C = x_shape
    p = k // 2
    Ho, Wo, Cout = dout.shape
    dflat = dout.reshape(Ho * Wo, Cout)
    dW = cols.T @ dflat
    db = dflat.sum(axis=0)
    dcols = (dflat @ W.T).reshape(Ho, Wo, k * k * C)
    dxp = np.zeros((H + 2 * p, Wd + 2 * p, C))
    for dy in range(k):
        for dx in range(k):
            dxp[dy:dy + 2 * (Ho - 1) + 1:2,
                dx:dx + 2 * (Wo - 1) + 1:2] += \
                dcols[:, :, (dy * k + dx) * C:(dy * k + dx + 1) * C]
    return dxp[p:p + H, p:p + Wd], dW, db


def conv3x3s2_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """3x3 convolution, stride 2, zero padding 1 (see convs2_forward)."""
    return convs2_forward(x, W, b, 3)


def conv3x3s2_backward(dout: np.ndarray, cache):
    return convs2_backward(dout, cache)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0.0)


# ------------------------------------------------------------------- dropout

def dropout_mask(shape, rate: float, seed: int) -> np.ndarray:
    """Inverted-dropout mask of {0, 1/(1-rate)}; deterministic per seed."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    rng = named_rng(seed, "dropout")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------- gradient checking

def finite_diff_check(loss_fn, store: ParamStore, h: float = 1e-4,
                      max_coords: int = 40, seed: int = 0) -> float:
    """Compare analytic gradients against Richardson-extrapolated central
    differences (steps h and h/2, truncation error O(h^4)).

    loss_fn() must read parameter values from the store, return a scalar
    loss, and accumulate the analytic gradients into the store (grads are
    zeroed here before every call). For tensors with more than max_coords
    entries a random coordinate subset is checked. Returns the max
    relative error with denominator max(|a|, |n|, 1e-6); the floor
    absorbs pure roundoff noise on near-zero gradient coordinates.
    """

    def evalf():
        store.zero_grad()
        return float(loss_fn())

    loss0 = evalf()
    if evalf() != loss0:
        raise ValueError("loss_fn is not deterministic")
    analytic = {name: p.grad.copy() for name, p in store}
    rng = named_rng(seed, "fd-coords")
    worst = 0.0
    for name, p in store:
        flat = p.value.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        a_flat = analytic[name].reshape(-1)
        for idx in idxs:
            orig = flat[idx]

            def central(step):
                flat[idx] = orig + step
                f_plus = evalf()
                flat[idx] = orig - step
                f_minus = evalf()
                flat[idx] = orig
                return (f_plus - f_minus) / (2.0 * step)

            num = (4.0 * central(h / 2) - central(h)) / 3.0
            err = abs(a_flat[idx] - num) / max(abs(a_flat[idx]), abs(num), 1e-6)
            worst = max(worst, err)
    store.zero_grad()
    return worst
