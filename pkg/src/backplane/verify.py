"""Per-unit verification that reconstructed surfaces reproduce the live net.

The error metric is signed: e = (predicted - actual) / actual', where actual'
substitutes the smallest positive normal binary32 for exact zeros so the
quotient is always defined. Fractions and histograms use |e|.

verify_layers runs a full per-unit census per input: predicted values come
from one gate-frozen linear replay of x (each unit of which equals <x|H> for
that unit's surface, to summation rounding, because the adjoint is the exact
transpose of the replay), and actual values from the ordinary forward pass.
On a sampled subset of units it additionally materializes the true surfaces
and compares <x|H> directly, keeping the slow route exercised end to end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .adjoint import EvaluationPoint, replay_outputs, trace
from .network import NetworkGraph, forward
from .reconstruct import conv_geometry, rm0, rm2
from .tensor import FP32_TINY, ShapeMismatchError, inner_product

THRESHOLDS = (1e-2, 1e-4, 1e-9)
# Log-decade bin edges on |e|; first bucket catches exact zeros and anything
# below 1e-12, the last anything at or above 1e+3.
BIN_EDGES = tuple(10.0**p for p in range(-12, 4))


def relative_errors(predicted: np.ndarray, actual: np.ndarray) -> np.ndarray:
    """Signed elementwise (predicted - actual) / zero-guarded actual."""
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    if predicted.shape != actual.shape:
        raise ShapeMismatchError("relative_errors", actual.shape, predicted.shape)
    guarded = np.where(actual == 0, np.asarray(FP32_TINY, dtype=actual.dtype), actual)
    return (predicted - actual) / guarded


@dataclass
class LayerErrorStats:
    name: str
    units: int = 0
    below: dict = field(default_factory=lambda: {t: 0 for t in THRESHOLDS})
    max_abs: float = 0.0
    bins: np.ndarray = field(default_factory=lambda: np.zeros(len(BIN_EDGES) + 1, dtype=np.int64))

    def add(self, errors: np.ndarray) -> None:
        mag = np.abs(errors.ravel())
        self.units += mag.size
        for t in THRESHOLDS:
            self.below[t] += int(np.count_nonzero(mag <= t))
        if mag.size:
            self.max_abs = max(self.max_abs, float(mag.max()))
        self.bins += np.histogram(mag, bins=(0.0,) + BIN_EDGES + (np.inf,))[0]

    def fraction_below(self, threshold: float) -> float:
        return self.below[threshold] / self.units if self.units else 0.0

    def merge(self, other: "LayerErrorStats") -> "LayerErrorStats":
        if other.name != self.name:
            raise ValueError(f"cannot merge stats for {other.name!r} into {self.name!r}")
        out = LayerErrorStats(self.name, self.units + other.units)
        out.below = {t: self.below[t] + other.below[t] for t in THRESHOLDS}
        out.max_abs = max(self.max_abs, other.max_abs)
        out.bins = self.bins + other.bins
        return out


@dataclass
class SpotCheck:
    """<x|H> from a materialized surface vs the live forward unit."""

    layer: str
    unit: tuple
    predicted: float
    actual: float
    error: float


@dataclass
class VerificationReport:
    layers: dict = field(default_factory=dict)  # name -> LayerErrorStats
    spot_checks: list = field(default_factory=list)
    inputs: int = 0

    def layer(self, name: str) -> LayerErrorStats:
        if name not in self.layers:
            self.layers[name] = LayerErrorStats(name)
        return self.layers[name]

    def merge(self, other: "VerificationReport") -> "VerificationReport":
        out = VerificationReport(inputs=self.inputs + other.inputs)
        for name in list(self.layers) + [n for n in other.layers if n not in self.layers]:
            if name in self.layers and name in other.layers:
                out.layers[name] = self.layers[name].merge(other.layers[name])
            else:
                src = self.layers.get(name) or other.layers[name]
                out.layers[name] = src.merge(LayerErrorStats(name))
        out.spot_checks = self.spot_checks + other.spot_checks
        return out

    def worst_fraction(self, threshold: float = 1e-2) -> float:
        return min((s.fraction_below(threshold) for s in self.layers.values()), default=0.0)

    def spot_max_abs_error(self) -> float:
        return max((abs(c.error) for c in self.spot_checks), default=0.0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "units", "frac_le_1e-2", "frac_le_1e-4", "frac_le_1e-9", "max_error"])
            for name, s in self.layers.items():
                w.writerow(
                    [name, s.units]
                    + [repr(s.fraction_below(t)) for t in THRESHOLDS]
                    + [repr(s.max_abs)]
                )


def verify_layers(
    net: NetworkGraph,
    inputs,
    point: EvaluationPoint = EvaluationPoint(),
    spot_units: int = 2,
    spot_inputs: int = 3,
    rng: np.random.Generator | None = None,
) -> VerificationReport:
    """Census every eligible conv layer's units and the FC logits per input.

    spot_units surfaces per layer are materialized for the first spot_inputs
    inputs; pass spot_units=0 to skip the slow route.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    report = VerificationReport()
    convs = net.conv_layer_indices()
    fc = net.fc_index()
    for x in inputs:
        report.inputs += 1
        x = np.asarray(x, dtype=net.dtype)
        logits, outs = forward(net, x)
        tr = trace(net, x, point)
        linear = replay_outputs(tr, net, x, fc)
        for ordinal in range(1, len(convs)):
            flat = convs[ordinal]
            name = net.layers[flat].name
            report.layer(name).add(relative_errors(linear[flat], outs[flat]))
        report.layer("fc").add(relative_errors(linear[fc], logits))
        if report.inputs <= spot_inputs and spot_units > 0:
            _spot_check(net, tr, x, outs, logits, spot_units, rng, report)
    return report


def _spot_check(net, tr, x, outs, logits, spot_units, rng, report):
    convs = net.conv_layer_indices()
    for ordinal in range(1, len(convs)):
        flat = convs[ordinal]
        name = net.layers[flat].name
        _, s_count, _, cout = conv_geometry(net, ordinal)
        ow = net.boundary_shapes[flat][1]
        for _ in range(spot_units):
            s = int(rng.integers(s_count))
            i = int(rng.integers(cout))
            surface = rm2(net, tr, ordinal, s, i)
            predicted = inner_product(x, surface.values)
            actual = float(outs[flat][s // ow, s % ow, i])
            err = float(relative_errors(np.float64(predicted), np.float64(actual)))
            report.spot_checks.append(SpotCheck(name, (s, i), predicted, actual, err))
    for _ in range(spot_units):
        k = int(rng.integers(net.class_count))
        surface = rm0(net, tr, k)
        predicted = inner_product(x, surface.values)
        actual = float(logits[k])
        err = float(relative_errors(np.float64(predicted), np.float64(actual)))
        report.spot_checks.append(SpotCheck("fc", (k,), predicted, actual, err))


@dataclass
class HyperplaneComparison:
    """Logit triplet per class: live forward, fresh surfaces, stale surfaces."""

    m1: np.ndarray  # forward logits of the perturbed input
    m2: np.ndarray  # <x'|H(z(x'))>: surfaces traced at the perturbed input
    m3: np.ndarray  # <x'|H(z(x))>: surfaces traced at the original input

    def max_m2_deviation(self) -> float:
        denom = np.maximum(np.abs(self.m1), FP32_TINY)
        return float(np.max(np.abs(self.m2 - self.m1) / denom))

    def ranking_preserved(self) -> bool:
        return int(np.argmax(self.m2)) == int(np.argmax(self.m1))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "m1_forward", "m2_fresh", "m3_stale"])
            for k in range(len(self.m1)):
                w.writerow([k, repr(float(self.m1[k])), repr(float(self.m2[k])), repr(float(self.m3[k]))])


def compare_hyperplanes(
    net: NetworkGraph, x: np.ndarray, x_pert: np.ndarray, point: EvaluationPoint = EvaluationPoint()
) -> HyperplaneComparison:
    """Evaluate the perturbed input against fresh and stale class surfaces.

    M2 must track the live logits (fresh gates describe the live net at x');
    M3 carries no such guarantee and is exactly the stale-description readout.
    """
    x = np.asarray(x, dtype=net.dtype)
    x_pert = np.asarray(x_pert, dtype=net.dtype)
    m1, _ = forward(net, x_pert)
    tr_fresh = trace(net, x_pert, point)
    tr_stale = trace(net, x, point)
    classes = net.class_count
    m2 = np.zeros(classes, dtype=np.float64)
    m3 = np.zeros(classes, dtype=np.float64)
    for k in range(classes):
        m2[k] = inner_product(x_pert, rm0(net, tr_fresh, k).values)
        m3[k] = inner_product(x_pert, rm0(net, tr_stale, k).values)
    return HyperplaneComparison(m1=np.asarray(m1, dtype=np.float64), m2=m2, m3=m3)
