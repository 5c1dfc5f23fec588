"""Dense feed-forward networks with explicit reverse-mode gradients.

Everything runs in float64 on numpy. The backward pass returns gradients for
the parameters *and* for the input vector; the input gradient is what lets a
trained classifier steer the diffusion sampler. No autodiff graph: each layer
is affine + (ReLU | identity) and the chain rule is written out per layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"FFNCKPT\x00"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "identity")


class ShapeMismatch(ValueError):
    """Input or gradient dimensions do not match the network."""


class NonFiniteGradient(ValueError):
    """A gradient contained NaN or infinity."""


class EmptyDataset(ValueError):
    """A training routine received no samples."""


class ModelIncompatible(ValueError):
    """Checkpoint header disagrees with what the caller expects."""


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class Network:
    layers: list[Layer]
    rng_seed: int = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @classmethod
    def init(cls, sizes: list[int], seed: int) -> "Network":
        """Glorot-uniform init; hidden layers ReLU, output layer identity."""
        if len(sizes) < 2:
            raise ValueError("need at least input and output dims")
        rng = np.random.default_rng(seed)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            act = "identity" if i == len(sizes) - 2 else "relu"
            layers.append(Layer(w, b, act))
        return cls(layers, rng_seed=seed)

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out


def _as_batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ShapeMismatch(f"input dim {x.shape[0]} != expected {dim}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ShapeMismatch(f"input dim {x.shape[1]} != expected {dim}")
        return x, False
    raise ShapeMismatch(f"expected 1-D or 2-D input, got shape {x.shape}")


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Forward pass; accepts a single vector (d,) or a batch (n, d)."""
    h, squeeze = _as_batch(x, net.in_dim)
    for layer in net.layers:
        h = h @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h[0] if squeeze else h


def _forward_cached(net: Network, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns output and the post-activation input of every layer."""
    inputs = [x]
    h = x
    for layer in net.layers:
        h = h @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
        inputs.append(h)
    return h, inputs


def backward(
    net: Network, x: np.ndarray, upstream: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Reverse-mode pass.

    Returns per-layer (dW, db) in layer order plus the gradient with respect
    to the input, for `upstream` = dLoss/dOutput. Batched inputs sum the
    parameter gradients over the batch and return per-row input gradients.
    """
    xb, squeeze = _as_batch(x, net.in_dim)
    out, inputs = _forward_cached(net, xb)
    gb, gsq = _as_batch(upstream, net.out_dim)
    if gsq != squeeze or gb.shape[0] != xb.shape[0]:
        raise ShapeMismatch("upstream gradient shape does not match input batch")

    grad = gb
    param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            grad = grad * (inputs[i + 1] > 0.0)
        param_grads[i] = (grad.T @ inputs[i], grad.sum(axis=0))
        grad = grad @ layer.weight
    return param_grads, (grad[0] if squeeze else grad)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch of logits (n, c) and int labels (n,).

    Gradient is with respect to the logits and already divided by n.
    Shift-invariant: a constant added to every logit changes nothing.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy for logits and {0,1} targets of equal shape."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    # log(1 + e^-|z|) form avoids overflow on large |z|
    loss = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = sigmoid(logits) - targets
    return float(loss.mean()), grad / logits.size


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    return np.where(
        np.asarray(z) >= 0,
        1.0 / (1.0 + np.exp(-np.abs(z))),
        np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))),
    )


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_network(cls, net: Network, lr: float, weight_decay: float = 0.0) -> "AdamWState":
        params = net.parameters()
        return cls(
            lr=lr,
            weight_decay=weight_decay,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adamw_step(
    state: AdamWState, params: list[np.ndarray], grads: list[np.ndarray]
) -> list[np.ndarray]:
    """Decoupled-weight-decay Adam with bias correction; updates in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeMismatch("parameter/gradient count does not match optimizer state")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient contains non-finite values")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= state.lr * update
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
    return params


def network_grads(net: Network, param_grads: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    """Flatten per-layer (dW, db) pairs into the net.parameters() order."""
    out: list[np.ndarray] = []
    for dw, db in param_grads:
        out.append(dw)
        out.append(db)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    net: Network,
    x: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
) -> bool:
    """Compare backward() against central finite differences.

    Uses the scalar probe s = <u, forward(x)> for a fixed random u so that
    one backward pass checks the full transposed Jacobian, for parameters
    and input alike. True iff every relative error is below tol.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(net.out_dim)

    param_grads, input_grad = backward(net, x, u)
    analytic = network_grads(net, param_grads) + [input_grad]
    tensors = net.parameters() + [np.asarray(x, dtype=np.float64)]

    def probe() -> float:
        return float(u @ forward(net, tensors[-1]))

    max_rel = 0.0
    for tensor, grad in zip(tensors, analytic):
        flat = tensor.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = probe()
            flat[idx] = orig - h
            fm = probe()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(numeric) + abs(gflat[idx]), 1e-6)
            max_rel = max(max_rel, abs(numeric - gflat[idx]) / denom)
    return max_rel < tol


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_ACT_CODE = {"relu": 0, "identity": 1}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}


def save_network(path: str | Path, net: Network, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON metadata, dims, raw LE float64.

    Round-trips bit-exactly; `meta` carries compatibility data such as the
    noise-schedule parameters a model was trained against.
    """
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            out_dim, in_dim = layer.weight.shape
            f.write(struct.pack("<III", in_dim, out_dim, _ACT_CODE[layer.activation]))
        f.write(struct.pack("<q", net.rng_seed))
        for layer in net.layers:
            f.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def load_network(path: str | Path) -> tuple[Network, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ModelIncompatible(f"{path}: bad magic {magic!r}")
        version, meta_len = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ModelIncompatible(f"{path}: unsupported format version {version}")
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (n_layers,) = struct.unpack("<I", f.read(4))
        dims = [struct.unpack("<III", f.read(12)) for _ in range(n_layers)]
        (rng_seed,) = struct.unpack("<q", f.read(8))
        layers = []
        for in_dim, out_dim, act_code in dims:
            w = np.frombuffer(f.read(8 * in_dim * out_dim), dtype="<f8").reshape(out_dim, in_dim)
            b = np.frombuffer(f.read(8 * out_dim), dtype="<f8")
            layers.append(Layer(w.copy(), b.copy(), _CODE_ACT[act_code]))
    return Network(layers, rng_seed=rng_seed), meta


def read_checkpoint_header(path: str | Path) -> dict:
    """Header summary without loading weights (for the `inspect` command)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ModelIncompatible(f"{path}: bad magic {magic!r}")
        version, meta_len = struct.unpack("<II", f.read(8))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (n_layers,) = struct.unpack("<I", f.read(4))
        dims = [struct.unpack("<III", f.read(12)) for _ in range(n_layers)]
    return {
        "version": version,
        "meta": meta,
        "layers": [
            {"in": d[0], "out": d[1], "activation": _CODE_ACT[d[2]]} for d in dims
        ],
    }
