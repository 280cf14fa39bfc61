"""Per-layer Hessian traces of the empirical (adversarial) loss.

The Hessian is taken with respect to the weights only, at inputs that are
already perturbed and held fixed. ``Tr(H_k)`` is the trace of the diagonal
block belonging to layer k's weight matrix; biases are not included.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Batch
from .errors import DomainError, SizeError

EXACT_THRESHOLD = 3000


@dataclass(frozen=True)
class CurvaturePolicy:
    exact_threshold: int = EXACT_THRESHOLD
    probes: int = 100
    seed: int = 0
    chunk: int = 64


@dataclass(frozen=True)
class LayerTrace:
    layer: int
    trace_raw: float
    trace_clamped: float
    estimator: str
    probes: int
    stderr: float


@dataclass(frozen=True)
class CurvatureReport:
    layers: tuple[LayerTrace, ...]
    eval_batch_id: str = ""
    delta_policy: str = "frozen"

    @property
    def raw(self) -> list[float]:
        return [t.trace_raw for t in self.layers]

    @property
    def clamped(self) -> list[float]:
        return [t.trace_clamped for t in self.layers]

    @property
    def clamp_count(self) -> int:
        return sum(t.trace_raw < 0 for t in self.layers)

    def layer(self, k: int) -> LayerTrace:
        for t in self.layers:
            if t.layer == k:
                return t
        raise IndexError(f"no trace for layer {k}")


def batch_id(batch: Batch) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(batch.inputs, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(batch.labels).tobytes())
    return h.hexdigest()[:16]


def weight_layers(model) -> list[int]:
    return [b.layer for b in model.params.layout if b.kind == "weight"]


def _tape(model, batch: Batch) -> ad.Tape:
    return ad.evaluate(model.program, batch, model.params)


def _exact_block_trace(tape: ad.Tape, block: ad.Block, chunk: int) -> float:
    D = sum(b.size for b in tape.layout)
    total = 0.0
    for start in range(0, block.size, chunk):
        idx = np.arange(start, min(start + chunk, block.size))
        V = np.zeros((idx.size, D))
        V[np.arange(idx.size), block.offset + idx] = 1.0
        HV = ad.hvp(tape, V, chunk=chunk)
        total += float(np.sum(HV[np.arange(idx.size), block.offset + idx]))
    return total


def _hutchinson_samples(tape: ad.Tape, block: ad.Block, probes: int, rng, chunk: int) -> np.ndarray:
    D = sum(b.size for b in tape.layout)
    samples = np.empty(probes)
    for start in range(0, probes, chunk):
        m = min(chunk, probes - start)
        signs = rng.integers(0, 2, size=(m, block.size)) * 2.0 - 1.0
        V = np.zeros((m, D))
        V[:, block.slice] = signs
        HV = ad.hvp(tape, V, chunk=chunk)
        samples[start : start + m] = np.sum(signs * HV[:, block.slice], axis=1)
    return samples


def exact_layer_trace(model, batch: Batch, k: int, threshold: int = EXACT_THRESHOLD, *, chunk: int = 64, tape=None) -> float:
    """Sum of e_i^T H e_i over every weight entry of layer ``k``."""
    block = model.params.block_info(k, "weight")
    if block.size > threshold:
        raise SizeError(
            f"layer {k} has {block.size} weights (> {threshold}); use hutchinson_layer_trace"
        )
    tape = tape or _tape(model, batch)
    return _exact_block_trace(tape, block, chunk)


def hutchinson_layer_trace(model, batch: Batch, k: int, probes: int, seed: int, *, chunk: int = 64, tape=None) -> tuple[float, float]:
    """Rademacher estimate of the layer-k block trace.

    Returns ``(estimate, stderr)``; stderr is the sample standard deviation
    over probes divided by sqrt(probes), and infinite for a single probe.
    """
    if probes < 1:
        raise DomainError("hutchinson needs at least one probe")
    block = model.params.block_info(k, "weight")
    tape = tape or _tape(model, batch)
    rng = np.random.default_rng([seed, k])
    samples = _hutchinson_samples(tape, block, probes, rng, chunk)
    est = float(np.mean(samples))
    stderr = float(np.std(samples, ddof=1) / np.sqrt(probes)) if probes > 1 else float("inf")
    return est, stderr


def full_exact_trace(model, batch: Batch, *, chunk: int = 64) -> float:
    """Trace of the Hessian over all weight entries (used as a cross-check)."""
    tape = _tape(model, batch)
    return sum(_exact_block_trace(tape, model.params.block_info(k, "weight"), chunk) for k in weight_layers(model))


def curvature_report(model, eval_batch: Batch, policy: CurvaturePolicy = CurvaturePolicy(), batch_tag: str | None = None) -> CurvatureReport:
    """Trace every layer: exact when small enough, Hutchinson otherwise."""
    tape = _tape(model, eval_batch)
    layers = []
    for k in weight_layers(model):
        block = model.params.block_info(k, "weight")
        if block.size <= policy.exact_threshold:
            raw = _exact_block_trace(tape, block, policy.chunk)
            entry = LayerTrace(k, raw, max(raw, 0.0), "exact", block.size, 0.0)
        else:
            raw, se = hutchinson_layer_trace(model, eval_batch, k, policy.probes, policy.seed, chunk=policy.chunk, tape=tape)
            entry = LayerTrace(k, raw, max(raw, 0.0), "hutchinson", policy.probes, se)
        layers.append(entry)
    return CurvatureReport(tuple(layers), batch_tag if batch_tag is not None else batch_id(eval_batch))
