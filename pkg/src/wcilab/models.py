"""Feed-forward ReLU networks with per-layer parameter blocks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Batch, ParamVector
from .errors import DomainError, LayoutError, SpecError

LOSSES = ("cross_entropy", "squared")
INIT_SCHEMES = ("uniform-fan-in",)


@dataclass(frozen=True)
class ModelSpec:
    widths: tuple[int, ...]
    loss: str = "cross_entropy"
    use_bias: bool = True
    seed: int = 0
    init: str = "uniform-fan-in"
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def validate(self) -> None:
        if len(self.widths) < 2:
            raise SpecError("at least two widths (one weight matrix) are required")
        if any(w < 1 for w in self.widths):
            raise SpecError(f"all widths must be >= 1, got {self.widths}")
        if self.loss not in LOSSES:
            raise SpecError(f"unknown loss {self.loss!r}")
        if self.init not in INIT_SCHEMES:
            raise SpecError(f"unknown init scheme {self.init!r}")
        if self.activation != "relu":
            raise SpecError("only relu activations are supported")

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def digest(self) -> bytes:
        """8-byte hash identifying the architecture (used by checkpoints)."""
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).digest()[:8]


@dataclass(frozen=True, eq=False)
class Model:
    spec: ModelSpec
    params: ParamVector
    program: object = field(init=False, repr=False)

    def __post_init__(self):
        K = self.spec.num_layers
        weights = [b for b in self.params.layout if b.kind == "weight"]
        biases = [b for b in self.params.layout if b.kind == "bias"]
        if len(weights) != K or len(biases) != (K if self.spec.use_bias else 0):
            raise LayoutError("parameter layout does not match the model spec")
        object.__setattr__(self, "program", _make_program(self.spec))

    @property
    def num_layers(self) -> int:
        return self.spec.num_layers

    def with_params(self, params: ParamVector) -> "Model":
        self.params.check_layout(params)
        return Model(self.spec, params)

    def weight(self, k: int) -> np.ndarray:
        return self.params.block(k, "weight")

    def logits(self, inputs: np.ndarray) -> np.ndarray:
        h = np.asarray(inputs, dtype=np.float64)
        K = self.num_layers
        for k in range(1, K + 1):
            h = h @ self.params.block(k, "weight")
            if self.spec.use_bias:
                h = h + self.params.block(k, "bias")
            if k < K:
                h = np.maximum(h, 0.0)
        return h

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        z = self.logits(inputs)
        if z.shape[1] == 1:
            return (z[:, 0] >= 0.5).astype(np.int64)
        return np.argmax(z, axis=1)

    def loss(self, batch: Batch) -> float:
        return ad.loss_value(self.program, batch, self.params)


def _make_program(spec: ModelSpec):
    K = spec.num_layers
    use_bias = spec.use_bias
    squared = spec.loss == "squared"
    out_width = spec.widths[-1]

    def program(x, labels, p):
        h = x
        for k in range(1, K + 1):
            h = h @ p[k, "weight"]
            if use_bias:
                h = h + p[k, "bias"]
            if k < K:
                h = ad.relu(h)
        if squared:
            if out_width == 1:
                target = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
            else:
                target = np.eye(out_width)[np.asarray(labels, dtype=np.int64)]
            return ad.mul(ad.reduce_mean(ad.square(h - target)), float(out_width))
        return ad.reduce_mean(ad.softmax_cross_entropy(h, labels))

    return program


def build(spec: ModelSpec) -> Model:
    """Initialise a model; every entry ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    blocks = []
    for k in range(1, spec.num_layers + 1):
        fan_in, fan_out = spec.widths[k - 1], spec.widths[k]
        bound = 1.0 / np.sqrt(fan_in)
        blocks.append((k, "weight", rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        if spec.use_bias:
            blocks.append((k, "bias", rng.uniform(-bound, bound, size=fan_out)))
    return Model(spec, ParamVector.from_blocks(blocks))


def _check_layer(model: Model, k: int) -> None:
    if not 1 <= k <= model.num_layers:
        raise IndexError(f"layer {k} out of range 1..{model.num_layers}")


def layer_frobenius_sq(model: Model, k: int) -> float:
    """Squared Frobenius norm of layer ``k``'s weight matrix (biases excluded)."""
    _check_layer(model, k)
    w = model.params.block(k, "weight")
    return float(np.sum(w * w))


def layer_bias_sq(model: Model, k: int) -> float:
    _check_layer(model, k)
    if not model.spec.use_bias:
        return 0.0
    b = model.params.block(k, "bias")
    return float(np.sum(b * b))


def rescale_layers(model: Model, k: int, alpha: float) -> Model:
    """Scale W_k and b_k by ``alpha`` and W_{k+1} by ``1/alpha``.

    For ReLU networks the returned model computes the same function.
    """
    if not 1 <= k < model.num_layers:
        raise IndexError(f"rescaling needs 1 <= k < {model.num_layers}, got {k}")
    if not alpha > 0:
        raise DomainError(f"rescale factor must be positive, got {alpha}")
    if model.spec.activation != "relu":
        raise DomainError("rescaling invariance requires a positively homogeneous activation")
    if alpha == 1:
        return Model(model.spec, model.params.with_flat(model.params.flat.copy()))
    blocks = model.params.unflatten()
    blocks[k, "weight"] = blocks[k, "weight"] * alpha
    if model.spec.use_bias:
        blocks[k, "bias"] = blocks[k, "bias"] * alpha
    blocks[k + 1, "weight"] = blocks[k + 1, "weight"] / alpha
    return Model(model.spec, ParamVector.flatten(blocks, model.params.layout))
