"""Frozen-gate linearization of a bias-free piecewise-linear network.

Because every layer is linear except the pointwise activations, freezing the
activation gates at a reference forward pass turns the whole network (up to
any pre-activation) into one exact linear map J. `jvp` applies J, `vjp`
applies its transpose; both replay the same layer stack, so the adjoint
identity <Jv|c> == <v|J*c> holds to summation rounding by construction.

Gates recorded at a positively scaled input k*x are sign-identical to gates
at x for every k > 0, which is what makes a cheap evaluation point (default
x/8) stand in for x itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .network import NetworkGraph, _shortcut_adjoint, _shortcut_value
from .tensor import ShapeMismatchError


class LinearizationError(ValueError):
    """Raised for targets or layers the frozen replay cannot cover."""


@dataclass(frozen=True)
class EvaluationPoint:
    """Positive input scale at which activation gates are recorded."""

    k: float = 0.125

    def __post_init__(self):
        if not (self.k > 0):
            raise ValueError(f"evaluation scale must be positive, got {self.k}")


@dataclass
class ActivationTrace:
    """Frozen gate masks per activation layer, recorded at k * x."""

    arch: str
    k: float
    input_shape: tuple
    layer_count: int
    gates: dict = field(default_factory=dict)  # layer index -> mask array


@dataclass(frozen=True)
class Cotangent:
    """A covector sitting at a conv or FC layer's pre-activation output."""

    layer: int  # flat layer index
    values: np.ndarray


def _check_trace(trace: ActivationTrace, net: NetworkGraph):
    if trace.layer_count != len(net.layers) or trace.arch != net.arch:
        raise LinearizationError(
            f"trace built for arch {trace.arch!r} ({trace.layer_count} layers), "
            f"got {net.arch!r} ({len(net.layers)})"
        )


def _check_target(net: NetworkGraph, target_layer: int):
    if not 0 <= target_layer < len(net.layers):
        raise LinearizationError(f"no layer {target_layer}")
    kind = net.layers[target_layer].kind
    if kind not in ("conv", "fc"):
        raise LinearizationError(
            f"layer {target_layer} is {kind}; linearization targets are conv or fc pre-activations"
        )
    if target_layer > net.fc_index():
        raise LinearizationError("targets beyond the final pre-activation are not defined")


def trace(net: NetworkGraph, x: np.ndarray, point: EvaluationPoint = EvaluationPoint()) -> ActivationTrace:
    """Record activation gates from a forward pass at point.k * x.

    Only plain and leaky ReLU gates participate in replay; the trailing
    clipping activation after the FC layer lies outside every valid target.
    """
    x = np.asarray(x, dtype=net.dtype)
    z = x * x.dtype.type(point.k)
    fc = net.fc_index()
    from .network import forward  # local import keeps module load order simple

    _, outs = forward(net, z)
    gates = {}
    for i, layer in enumerate(net.layers):
        if layer.kind != "activation" or i > fc:
            continue
        if layer.act == "relu6":
            raise LinearizationError(
                f"layer {layer.name or i}: the clipping activation is not positively "
                "homogeneous and cannot sit inside the linearized region"
            )
        gates[i] = tensor.activation_gate(outs[i - 1], layer.act)
    return ActivationTrace(
        arch=net.arch, k=float(point.k), input_shape=tuple(net.input_shape), layer_count=len(net.layers), gates=gates
    )


def replay_outputs(trace_: ActivationTrace, net: NetworkGraph, v: np.ndarray, upto: int) -> list:
    """Gate-frozen linear forward through layers[0..upto]; returns all outputs."""
    _check_trace(trace_, net)
    v = np.asarray(v, dtype=net.dtype)
    outs = []
    val = v
    for i, layer in enumerate(net.layers[: upto + 1]):
        if layer.kind == "conv":
            val = tensor.conv2d(val, layer.kernel, layer.stride)
        elif layer.kind == "activation":
            if i not in trace_.gates:
                raise LinearizationError(f"trace has no gate for activation layer {layer.name or i}")
            val = val * trace_.gates[i]
        elif layer.kind == "avg_pool":
            val = tensor.avg_pool(val, layer.window, layer.stride)
        elif layer.kind == "global_pool":
            val = tensor.global_pool(val)
        elif layer.kind == "fc":
            val = val @ layer.kernel
        elif layer.kind == "scalar_rescale":
            val = val * layer.scale
        elif layer.kind == "residual_add":
            src = v if layer.shortcut_from < 0 else outs[layer.shortcut_from]
            val = val + _shortcut_value(src, layer.shortcut_kind, val.shape[-1])
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        outs.append(val)
    return outs


def jvp(trace_: ActivationTrace, net: NetworkGraph, v: np.ndarray, target_layer: int) -> np.ndarray:
    """Apply the frozen linear map to v, up to target_layer's pre-activation."""
    _check_target(net, target_layer)
    v = np.asarray(v, dtype=net.dtype)
    expect = tuple(net.input_shape)
    if v.shape != expect:
        raise ShapeMismatchError("jvp", expect, v.shape)
    return replay_outputs(trace_, net, v, target_layer)[target_layer]


def vjp_from_boundary(trace_: ActivationTrace, net: NetworkGraph, boundary: int, cot: np.ndarray) -> np.ndarray:
    """Transpose-apply the frozen map from a cotangent at layers[boundary]'s output.

    boundary == -1 means the cotangent already lives in input space.
    """
    _check_trace(trace_, net)
    cot = np.asarray(cot, dtype=net.dtype)
    if boundary == -1:
        return cot
    if not 0 <= boundary < len(net.layers):
        raise LinearizationError(f"no layer {boundary}")
    expect = tuple(net.boundary_shapes[boundary])
    if cot.shape != expect:
        raise ShapeMismatchError("vjp", expect, cot.shape)
    acc = {boundary: cot}
    for i in range(boundary, -1, -1):
        g = acc.pop(i, None)
        if g is None:
            continue
        layer = net.layers[i]
        in_shape = net.boundary_shapes[i - 1] if i > 0 else tuple(net.input_shape)
        if layer.kind == "conv":
            gi = tensor.conv2d_input_grad(g, layer.kernel, in_shape[:2], layer.stride)
        elif layer.kind == "activation":
            if i not in trace_.gates:
                raise LinearizationError(f"trace has no gate for activation layer {layer.name or i}")
            gi = g * trace_.gates[i]
        elif layer.kind == "avg_pool":
            gi = tensor.avg_pool_grad(g, in_shape[:2], layer.window, layer.stride)
        elif layer.kind == "global_pool":
            gi = tensor.global_pool_grad(g, in_shape[:2])
        elif layer.kind == "fc":
            gi = g @ layer.kernel.T
        elif layer.kind == "scalar_rescale":
            gi = g * layer.scale
        elif layer.kind == "residual_add":
            src_shape = tuple(net.input_shape) if layer.shortcut_from < 0 else net.boundary_shapes[layer.shortcut_from]
            gs = _shortcut_adjoint(g, layer.shortcut_kind, src_shape)
            key = layer.shortcut_from
            acc[key] = acc[key] + gs if key in acc else gs
            gi = g
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        key = i - 1
        acc[key] = acc[key] + gi if key in acc else gi
    return acc[-1]


def vjp(trace_: ActivationTrace, net: NetworkGraph, cot: Cotangent) -> np.ndarray:
    """Pull a pre-activation cotangent back to input space."""
    _check_target(net, cot.layer)
    return vjp_from_boundary(trace_, net, cot.layer, cot.values)
