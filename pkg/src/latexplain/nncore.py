"""Small dense-network engine with hand-written backpropagation.

Every network in the package (black-box classifier, AAE encoder, decoder and
discriminator) is an :class:`Mlp`: a chain of dense layers, each followed by
one of five activations. Batches are 2-D float64 arrays, one row per example.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ShapeError, TrainingDivergenceError

ACTIVATIONS = ("relu", "sigmoid", "tanh", "linear", "softmax")
LOSSES = ("mse", "cross_entropy", "bce")
_ACT_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}
_MAGIC = b"MLP1"
_PROB_EPS = 1e-12


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "sigmoid":
        return sigmoid(pre)
    if name == "tanh":
        return np.tanh(pre)
    if name == "linear":
        return pre
    return softmax(pre)


def _activation_backward(name: str, pre: np.ndarray, out: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if name == "relu":
        return grad * (pre > 0)
    if name == "sigmoid":
        return grad * out * (1.0 - out)
    if name == "tanh":
        return grad * (1.0 - out * out)
    if name == "linear":
        return grad
    return out * (grad - np.sum(grad * out, axis=1, keepdims=True))


@dataclass
class Dense:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


class Mlp:
    """A chain of :class:`Dense` layers.

    Instances are mutated only by optimizers; ``forward`` never touches the
    parameters, so a trained net can be shared between threads.
    """

    def __init__(self, layers: Sequence[Dense], seed: int = 0):
        layers = list(layers)
        if not layers:
            raise ShapeError("an Mlp needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in _ACT_TAG:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.activation == "softmax" and i != len(layers) - 1:
                raise ValueError("softmax is only allowed on the final layer")
            if layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} != ({layer.out_dim},)")
            if i and layers[i - 1].out_dim != layer.in_dim:
                raise ShapeError(
                    f"layer {i} expects {layer.in_dim} inputs, previous layer gives {layers[i - 1].out_dim}"
                )
        self.layers = layers
        self.seed = seed

    @classmethod
    def build(cls, sizes: Sequence[int], activations: Sequence[str], seed: int = 0) -> "Mlp":
        """Glorot-uniform weights, zero biases. ``sizes`` includes the input width."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append(Dense(w, np.zeros(fan_out), act))
        return cls(layers, seed=seed)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            [Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            seed=self.seed,
        )

    def _check_input(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.in_dim:
            raise ShapeError(f"expected a batch with {self.in_dim} columns, got shape {batch.shape}")
        return batch

    def forward(self, batch) -> np.ndarray:
        out = self._check_input(batch)
        for layer in self.layers:
            out = _activate(layer.activation, out @ layer.weight + layer.bias)
        return out

    __call__ = forward

    def forward_cached(self, batch):
        """Forward pass that also returns what :meth:`backward` needs."""
        x = self._check_input(batch)
        cache = []
        for layer in self.layers:
            pre = x @ layer.weight + layer.bias
            out = _activate(layer.activation, pre)
            cache.append((x, pre, out))
            x = out
        return x, cache

    def backward(self, cache, grad, *, pre_activation: bool = False):
        """Backpropagate ``grad`` (d loss / d output) through the cached pass.

        With ``pre_activation=True``, ``grad`` is taken to be with respect to
        the final layer's pre-activation (fused sigmoid+bce, softmax+ce).
        Returns ``(param_grads, grad_input)`` with ``param_grads`` ordered
        like :meth:`parameters`.
        """
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            x, pre, out = cache[i]
            if i == len(self.layers) - 1 and pre_activation:
                g_pre = grad
            else:
                g_pre = _activation_backward(layer.activation, pre, out, grad)
            grads[2 * i] = x.T @ g_pre
            grads[2 * i + 1] = g_pre.sum(axis=0)
            grad = g_pre @ layer.weight.T
        return grads, grad

    # -- persistence ---------------------------------------------------

    def write(self, fh: BinaryIO) -> None:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(self.layers)))
        for layer in self.layers:
            fh.write(struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_TAG[layer.activation]))
        for layer in self.layers:
            fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())

    @classmethod
    def read(cls, fh: BinaryIO) -> "Mlp":
        if fh.read(4) != _MAGIC:
            raise ValueError("not an MLP1 checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        shapes = [struct.unpack("<IIB", fh.read(9)) for _ in range(count)]
        layers = []
        for n_in, n_out, tag in shapes:
            w = np.frombuffer(fh.read(8 * n_in * n_out), dtype="<f8").reshape(n_in, n_out)
            b = np.frombuffer(fh.read(8 * n_out), dtype="<f8")
            if b.size != n_out:
                raise ValueError("truncated MLP1 checkpoint")
            layers.append(Dense(w.astype(np.float64), b.astype(np.float64), ACTIVATIONS[tag]))
        return cls(layers)

    def to_bytes(self) -> bytes:
        import io

        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Mlp":
        import io

        return cls.read(io.BytesIO(data))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_bytes(Path(path).read_bytes())


# -- losses ------------------------------------------------------------


def loss_and_grad(loss: str, out: np.ndarray, targets: np.ndarray, final_activation: str):
    """Return ``(value, grad, pre_activation)`` for a batch.

    ``grad`` is d value / d output, or d value / d pre-activation when the
    loss fuses with the final activation (``pre_activation`` is then True).
    """
    if targets.shape != out.shape:
        raise ShapeError(f"targets shape {targets.shape} != output shape {out.shape}")
    rows = out.shape[0]
    if rows == 0:
        return 0.0, np.zeros_like(out), False
    if loss == "mse":
        diff = out - targets
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size, False
    if loss == "bce":
        p = np.clip(out, _PROB_EPS, 1.0 - _PROB_EPS)
        value = -np.mean(targets * np.log(p) + (1.0 - targets) * np.log(1.0 - p))
        if final_activation == "sigmoid":
            return float(value), (out - targets) / out.size, True
        return float(value), (p - targets) / (p * (1.0 - p)) / out.size, False
    if loss == "cross_entropy":
        p = np.clip(out, _PROB_EPS, None)
        value = -np.sum(targets * np.log(p)) / rows
        if final_activation == "softmax":
            # valid because each target row sums to one
            if np.allclose(targets.sum(axis=1), 1.0):
                return float(value), (out - targets) / rows, True
        return float(value), -targets / p / rows, False
    raise ValueError(f"unknown loss {loss!r}")


def batch_loss(net: Mlp, batch, targets, loss: str) -> float:
    out = net.forward(batch)
    value, _, _ = loss_and_grad(loss, out, np.asarray(targets, dtype=np.float64), net.layers[-1].activation)
    return value


def loss_gradients(net: Mlp, batch, targets, loss: str):
    out, cache = net.forward_cached(batch)
    targets = np.asarray(targets, dtype=np.float64)
    value, grad, fused = loss_and_grad(loss, out, targets, net.layers[-1].activation)
    grads, _ = net.backward(cache, grad, pre_activation=fused)
    return value, grads


# -- optimisation ----------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 64
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Sgd:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


@dataclass
class Adam:
    cfg: TrainConfig
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        c = self.cfg
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        scale = c.learning_rate * np.sqrt(1.0 - c.beta2**self.t) / (1.0 - c.beta1**self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p -= scale * m / (np.sqrt(v) + c.eps_adam)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg) if cfg.optimizer == "adam" else Sgd(cfg)


def train_step(net: Mlp, batch, targets, loss: str, cfg: TrainConfig, optimizer=None) -> float:
    """One optimiser step; returns the batch loss measured before the update.

    Pass the same ``optimizer`` across calls to keep Adam moments; without
    one a fresh optimiser is built from ``cfg`` for this single step.
    """
    value, grads = loss_gradients(net, batch, targets, loss)
    if not np.isfinite(value):
        raise TrainingDivergenceError(f"non-finite {loss} loss", stage="train_step")
    if optimizer is None:
        optimizer = make_optimizer(cfg)
    optimizer.step(net.parameters(), grads)
    return value


def fit(net: Mlp, inputs, targets, loss: str, cfg: TrainConfig, optimizer=None) -> list[float]:
    """Minibatch training; returns the mean loss of every epoch."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    optimizer = optimizer or make_optimizer(cfg)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(inputs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            try:
                total += train_step(net, inputs[idx], targets[idx], loss, cfg, optimizer) * len(idx)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"{exc} in epoch {epoch}", stage="fit", epoch=epoch) from None
        history.append(total / max(len(order), 1))
    return history


def gradient_check(net: Mlp, batch, targets, loss: str, h: float = 1e-5) -> float:
    """Max relative gap between backprop gradients and central differences."""
    if not 1e-7 < h < 1e-3:
        raise ValueError("h must lie in (1e-7, 1e-3)")
    batch = np.asarray(batch, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    _, analytic = loss_gradients(net, batch, targets, loss)
    worst = 0.0
    for param, grad in zip(net.parameters(), analytic):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up = batch_loss(net, batch, targets, loss)
            flat[j] = keep - h
            down = batch_loss(net, batch, targets, loss)
            flat[j] = keep
            fd = (up - down) / (2.0 * h)
            err = abs(gflat[j] - fd) / (abs(gflat[j]) + abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
