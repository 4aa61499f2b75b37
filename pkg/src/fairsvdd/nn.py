"""Small dense-network engine: forward, exact reverse-mode gradients, Adam.

Networks are stacks of affine layers followed by ``relu`` or ``identity``.
Both the SVDD encoder and the protected-attribute discriminator are built
from this module, so everything here is kept explicit and numpy-only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray  # [fan_out, fan_in]
    bias: np.ndarray | None
    activation: str = "relu"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list[Layer]
    use_bias: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if (layer.bias is not None) != self.use_bias:
                raise ValueError(f"layer {i}: bias presence disagrees with use_bias={self.use_bias}")
            if layer.bias is not None and layer.bias.shape != (layer.fan_out,):
                raise ValueError(f"layer {i}: bias shape {layer.bias.shape} != ({layer.fan_out},)")
            if i and layer.fan_in != self.layers[i - 1].fan_out:
                raise ValueError(
                    f"layer {i}: fan_in {layer.fan_in} does not chain with previous fan_out "
                    f"{self.layers[i - 1].fan_out}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fan_out

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, (b0), W1, (b1), ..."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            if layer.bias is not None:
                out.append(layer.bias)
        return out

    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> DenseNet:
        return DenseNet(
            [
                Layer(l.weight.copy(), None if l.bias is None else l.bias.copy(), l.activation)
                for l in self.layers
            ],
            use_bias=self.use_bias,
        )

    def checksum(self) -> int:
        """Hash of the raw parameter bytes; used to assert freezing."""
        return hash(b"".join(p.tobytes() for p in self.params()))

    def to_dict(self) -> dict:
        return {
            "use_bias": self.use_bias,
            "layers": [
                {
                    "shape": list(l.weight.shape),
                    "activation": l.activation,
                    "weight": l.weight.tolist(),
                    "bias": None if l.bias is None else l.bias.tolist(),
                }
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> DenseNet:
        layers = []
        for spec in d["layers"]:
            w = np.asarray(spec["weight"], dtype=np.float64).reshape(spec["shape"])
            b = None if spec["bias"] is None else np.asarray(spec["bias"], dtype=np.float64)
            layers.append(Layer(w, b, spec["activation"]))
        return cls(layers, use_bias=bool(d["use_bias"]))


def init_dense(
    sizes: list[int],
    rng: np.random.Generator,
    use_bias: bool = False,
    final_activation: str = "identity",
) -> DenseNet:
    """Build a dense net with relu hidden layers.

    Weights and biases are drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    """
    if len(sizes) < 2:
        raise ValueError("sizes must list at least input and output widths")
    layers = []
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out) if use_bias else None
        act = final_activation if i == n_layers - 1 else "relu"
        layers.append(Layer(w, b, act))
    return DenseNet(layers, use_bias=use_bias)


@dataclass
class Tape:
    """Activations cached by :func:`forward`.

    ``inputs[l]`` is the input to layer ``l``; ``pre[l]`` its pre-activation.
    """

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    net_id: int
    checksum: int


def forward(net: DenseNet, batch: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"expected batch of shape [b, {net.in_dim}], got {x.shape}")
    inputs, pre = [], []
    for layer in net.layers:
        inputs.append(x)
        h = x @ layer.weight.T
        if layer.bias is not None:
            h = h + layer.bias
        pre.append(h)
        x = np.maximum(h, 0.0) if layer.activation == "relu" else h
    return x, Tape(inputs, pre, id(net), net.checksum())


def predict(net: DenseNet, batch: np.ndarray) -> np.ndarray:
    return forward(net, batch)[0]


def backward(
    net: DenseNet, tape: Tape, output_grad: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of ``sum(output * output_grad)``.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered like
    :meth:`DenseNet.params`. The relu subgradient at exactly 0 is 0.
    """
    if tape.net_id != id(net) or tape.checksum != net.checksum():
        raise ValueError("tape does not belong to this network state; rerun forward")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != tape.pre[-1].shape:
        raise ValueError(f"output_grad shape {g.shape} != output shape {tape.pre[-1].shape}")
    grads: list[np.ndarray] = []
    for layer, x, h in zip(reversed(net.layers), reversed(tape.inputs), reversed(tape.pre)):
        if layer.activation == "relu":
            g = g * (h > 0.0)
        if layer.bias is not None:
            grads.append(g.sum(axis=0))
        grads.append(g.T @ x)
        g = g @ layer.weight
    grads.reverse()
    return grads, g


def weight_decay_term(net: DenseNet, alpha: float) -> float:
    """``alpha/2 * sum of squared weight entries``; biases are not decayed."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0:
        return 0.0
    return 0.5 * alpha * sum(float(np.sum(w * w)) for w in net.weights())


def weight_decay_grads(net: DenseNet, alpha: float) -> list[np.ndarray]:
    """Gradient of :func:`weight_decay_term`, ordered like ``net.params()``."""
    out = []
    for layer in net.layers:
        out.append(alpha * layer.weight)
        if layer.bias is not None:
            out.append(np.zeros_like(layer.bias))
    return out


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-3, **kw) -> AdamState:
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
            **kw,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def finite_diff_grads(loss_fn, params: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``loss_fn()`` w.r.t. each entry of ``params``.

    ``loss_fn`` must read the arrays in ``params`` (they are perturbed in place
    and restored).
    """
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(a: list[np.ndarray], b: list[np.ndarray], floor: float = 1e-6) -> float:
    """Largest ``|a-b| / max(|a|, |b|, floor)`` over all entries."""
    worst = 0.0
    for x, y in zip(a, b):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "fairsvdd-checkpoint"
CHECKPOINT_VERSION = 1


def dump_json(obj: dict, path: str | Path) -> None:
    """Write JSON deterministically (sorted keys, repr floats round-trip exactly)."""
    text = json.dumps(obj, sort_keys=True, indent=1, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def save_checkpoint(path: str | Path, nets: dict[str, DenseNet], extra: dict) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "nets": {name: net.to_dict() for name, net in nets.items()},
        **extra,
    }
    dump_json(payload, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, DenseNet], dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    nets = {name: DenseNet.from_dict(d) for name, d in payload.pop("nets").items()}
    return nets, payload


__all__ = [
    "ACTIVATIONS",
    "AdamState",
    "DenseNet",
    "Layer",
    "Tape",
    "adam_step",
    "backward",
    "finite_diff_grads",
    "forward",
    "init_dense",
    "load_checkpoint",
    "max_relative_error",
    "predict",
    "save_checkpoint",
    "weight_decay_grads",
    "weight_decay_term",
]
