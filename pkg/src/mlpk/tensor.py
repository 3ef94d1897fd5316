"""Dense layer primitives with hand-written gradients.

Tensors are plain ``numpy.ndarray`` objects. Production code runs in float32;
every op preserves the input dtype so the gradient tests can replay the same
code in float64.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    pass


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # [n, c, oh, ow, k, k] view over the padded input
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _check_conv(x, w, b):
    _require(x.ndim == 4, f"conv2d input must be [n,c,h,w], got shape {x.shape}")
    _require(w.ndim == 4 and w.shape[2] == w.shape[3],
             f"conv2d weights must be [c_out,c_in,k,k], got shape {w.shape}")
    _require(x.shape[1] == w.shape[1],
             f"conv2d channel mismatch: input has {x.shape[1]} channels, "
             f"weights expect {w.shape[1]}")
    _require(b.shape == (w.shape[0],),
             f"conv2d bias shape {b.shape} does not match {w.shape[0]} filters")


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` [n,c_in,h,w] with ``w`` [c_out,c_in,k,k]."""
    _check_conv(x, w, b)
    k = w.shape[2]
    _require(k <= x.shape[2] + 2 * pad and k <= x.shape[3] + 2 * pad,
             f"kernel {k} larger than padded input {x.shape[2:]} (pad={pad})")
    _require(stride >= 1, f"stride must be >= 1, got {stride}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _windows(xp, k, stride)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # [n, oh, ow, c_out]
    out += b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_grad(x, w, b, grad_out, stride: int = 1, pad: int = 0):
    """Gradients of :func:`conv2d` w.r.t. input, weights and bias."""
    _check_conv(x, w, b)
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    oh, ow = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
    _require(grad_out.shape == (n, c_out, oh, ow),
             f"upstream gradient shape {grad_out.shape} != expected {(n, c_out, oh, ow)}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _windows(xp, k, stride)
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3])).astype(w.dtype, copy=False)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    dcols = np.tensordot(grad_out, w, axes=([1], [0]))  # [n, oh, ow, c_in, k, k]
    dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(xp.shape, dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[..., i, j]
    grad_x = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def fc(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require(x.ndim == 2, f"fc input must be [n,d_in], got shape {x.shape}")
    _require(w.ndim == 2 and w.shape[1] == x.shape[1],
             f"fc weights {w.shape} incompatible with input {x.shape}")
    _require(b.shape == (w.shape[0],), f"fc bias shape {b.shape} != ({w.shape[0]},)")
    return x @ w.T + b


def fc_grad(x, w, b, grad_out):
    _require(grad_out.shape == (x.shape[0], w.shape[0]),
             f"upstream gradient shape {grad_out.shape} != {(x.shape[0], w.shape[0])}")
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0, f"maxpool2x2 needs even spatial dims, got {(h, w)}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def maxpool2x2_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # first maximum wins on ties
    onehot = np.arange(4) == blocks.argmax(axis=-1)[..., None]
    g = onehot * grad_out[..., None]
    return g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    _require(logits.ndim == 2, f"logits must be [n,classes], got {logits.shape}")
    labels = np.asarray(labels)
    n, n_cls = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"label index out of range for {n_cls} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return float(max(loss, 0.0)), grad.astype(logits.dtype, copy=False)


def sgd_step_l1(weights, grads, lr: float, alpha: float = 0.0, l1_layers=()):
    """One plain SGD step with an L1 subgradient on the weights of ``l1_layers``.

    ``weights``/``grads`` are :class:`mlpk.network.WeightSet`-like objects with
    ``weights`` and ``biases`` dicts. Returns a new weight set; biases never
    receive the L1 term and ``sign(0) == 0``.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    l1 = set(l1_layers)
    new_w, new_b = {}, {}
    for name, w in weights.weights.items():
        g = grads.weights[name]
        if name in l1 and alpha:
            g = g + alpha * np.sign(w)
        new_w[name] = (w - lr * g).astype(w.dtype, copy=False)
        new_b[name] = (weights.biases[name] - lr * grads.biases[name]).astype(w.dtype, copy=False)
    return weights.replace(weights=new_w, biases=new_b)


class SGD:
    """SGD with optional momentum and an L1 subgradient on selected layers.

    Updates the weight set in place; the L1 term enters the momentum buffer the
    same way the data gradient does.
    """

    def __init__(self, lr: float, momentum: float = 0.0, alpha: float = 0.0, l1_layers=()):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.alpha = alpha
        self.l1_layers = frozenset(l1_layers)
        self._vel: dict[tuple[str, str], np.ndarray] = {}

    def _update(self, key, p, g):
        if self.momentum:
            v = self._vel.get(key)
            if v is None:
                v = self._vel[key] = np.zeros_like(p)
            v *= self.momentum
            v += g
            g = v
        p -= (self.lr * g).astype(p.dtype, copy=False)

    def step(self, weights, grads) -> None:
        for name, w in weights.weights.items():
            g = grads.weights[name]
            if self.alpha and name in self.l1_layers:
                g = g + self.alpha * np.sign(w)
            self._update((name, "w"), w, g)
            self._update((name, "b"), weights.biases[name], grads.biases[name])
