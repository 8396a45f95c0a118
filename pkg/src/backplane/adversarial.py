"""Sign-gradient attacks and perturbation-set construction.

Attacks work in the network's (normalized) input space and re-linearize at
every iterate: each step backpropagates through the live network at the
current point, so gate changes between steps are always honored. A step adds
epsilon * sign(gradient), hence no pixel ever moves more than steps * epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import NetworkGraph, backprop, forward


@dataclass(frozen=True)
class AdversarialConfig:
    epsilon: float = 0.04
    steps: int = 10
    threshold: float = 0.5  # margin for the overthreshold condition
    beta_step: float = 0.05
    set_size: int = 50
    max_resample: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 0:
            raise ValueError("epsilon and steps must be non-negative")


@dataclass
class PerturbationRecord:
    values: np.ndarray
    provenance: str  # sb1 | scaled | gaussian
    intended: int  # class the attack aimed at (-1 when n/a)
    achieved: int  # class the perturbed input lands on
    beta: float = 1.0
    success: bool = False
    degenerate: bool = False

    @property
    def l2(self) -> float:
        return float(np.sqrt(np.sum(np.square(self.values, dtype=np.float64))))


@dataclass
class PerturbationSet:
    records: list = field(default_factory=list)
    label: int = -1
    qualified_scaled: int = 0  # scan hits before truncation (scaled sets only)
    gaussian_failures: int = 0  # slots that exhausted the resample budget


def _loss_input_grad(net: NetworkGraph, x: np.ndarray, cls: int) -> np.ndarray:
    """d/dx of softmax cross-entropy toward class cls, at the live point."""
    logits, _ = forward(net, x)
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    g = p
    g[cls] -= 1
    grad, _ = backprop(net, x, g.astype(net.dtype), want_weight_grads=False)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("attack gradient is not finite")
    return grad


def untargeted_attack(net: NetworkGraph, x: np.ndarray, label: int, config: AdversarialConfig) -> PerturbationRecord:
    """Iterative ascent on the true-label loss until the argmax flips."""
    x = np.asarray(x, dtype=net.dtype)
    logits, _ = forward(net, x)
    pred = int(np.argmax(logits))
    if pred != label:
        return PerturbationRecord(np.zeros_like(x), "sb1", -1, pred, success=False, degenerate=True)
    eps = net.dtype.type(config.epsilon)
    current = x
    for _ in range(config.steps):
        grad = _loss_input_grad(net, current, label)
        current = current + eps * np.sign(grad)
        pred = int(np.argmax(forward(net, current)[0]))
        if pred != label:
            return PerturbationRecord(current - x, "sb1", -1, pred, success=True)
    return PerturbationRecord(current - x, "sb1", -1, pred, success=False)


def targeted_least_likely(net: NetworkGraph, x: np.ndarray, target: int, config: AdversarialConfig) -> PerturbationRecord:
    """Iterative descent on the target-class loss until the argmax reaches it."""
    x = np.asarray(x, dtype=net.dtype)
    pred = int(np.argmax(forward(net, x)[0]))
    if pred == target:
        return PerturbationRecord(np.zeros_like(x), "sb1", target, pred, success=True, degenerate=True)
    eps = net.dtype.type(config.epsilon)
    current = x
    for _ in range(config.steps):
        grad = _loss_input_grad(net, current, target)
        current = current - eps * np.sign(grad)
        pred = int(np.argmax(forward(net, current)[0]))
        if pred == target:
            return PerturbationRecord(current - x, "sb1", target, pred, success=True)
    return PerturbationRecord(current - x, "sb1", target, pred, success=False)


def build_sb1(net: NetworkGraph, x: np.ndarray, label: int, config: AdversarialConfig) -> PerturbationSet:
    """One targeted perturbation per class, with the true class held at zero."""
    x = np.asarray(x, dtype=net.dtype)
    out = PerturbationSet(label=label)
    for target in range(net.class_count):
        if target == label:
            out.records.append(
                PerturbationRecord(np.zeros_like(x), "sb1", label, label, success=True, degenerate=True)
            )
        else:
            out.records.append(targeted_least_likely(net, x, target, config))
    return out


def build_sb2(net: NetworkGraph, x: np.ndarray, label: int, sb1: PerturbationSet, config: AdversarialConfig) -> PerturbationSet:
    """Scaled-perturbation set plus matched Gaussian references.

    Every non-zero sb1 perturbation is scanned at beta = 1.00 down to 0.00;
    a candidate qualifies when the scaled input is misclassified with the
    winning logit above threshold + the label's logit. Qualified candidates
    are shuffled and truncated to set_size; set_size Gaussian tensors with the
    scaled set's pixel mean/variance are then drawn, each verified not to flip
    the prediction, resampling up to max_resample times per slot.
    """
    x = np.asarray(x, dtype=net.dtype)
    rng = np.random.default_rng(config.seed)
    steps = int(round(1.0 / config.beta_step))
    qualified = []
    for adv_index, rec in enumerate(sb1.records):
        if adv_index == label:
            continue
        for n in range(steps, -1, -1):
            beta = n / steps
            candidate = x + net.dtype.type(beta) * rec.values
            logits, _ = forward(net, candidate)
            pred = int(np.argmax(logits))
            if pred != label and logits[pred] > config.threshold + logits[label]:
                qualified.append(
                    PerturbationRecord(
                        net.dtype.type(beta) * rec.values, "scaled", rec.intended, pred, beta=beta, success=True
                    )
                )
    out = PerturbationSet(label=label, qualified_scaled=len(qualified))
    order = rng.permutation(len(qualified))[: config.set_size]
    out.records = [qualified[n] for n in order]
    if out.records:
        stack = np.stack([r.values for r in out.records]).astype(np.float64)
        mu, sigma = float(stack.mean()), float(stack.std())
    else:
        mu, sigma = 0.0, 0.0
    for _ in range(config.set_size):
        placed = False
        for _ in range(config.max_resample):
            g = (mu + sigma * rng.standard_normal(x.shape)).astype(net.dtype)
            pred = int(np.argmax(forward(net, x + g)[0]))
            if pred == label:
                out.records.append(PerturbationRecord(g, "gaussian", -1, pred, beta=0.0, success=False))
                placed = True
                break
        if not placed:
            out.gaussian_failures += 1
    return out


def pca2(surfaces: np.ndarray) -> np.ndarray:
    """Project rows onto their top two principal components, deterministically.

    Sign convention: each component's largest-magnitude loading is positive.
    """
    flat = np.asarray(surfaces, dtype=np.float64).reshape(len(surfaces), -1)
    centered = flat - flat.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros((2 - vt.shape[0], vt.shape[1]))])
    for row in range(comps.shape[0]):
        pivot = np.argmax(np.abs(comps[row]))
        if comps[row, pivot] < 0:
            comps[row] = -comps[row]
    return centered @ comps.T
