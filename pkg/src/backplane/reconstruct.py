"""Input-space decision-surface reconstruction.

Every unit of a conv or FC layer is, under the frozen-gate linearization, a
plain inner product <x|H> with an input-shaped covector H. The five modes
recover H at different granularities of a conv unit's kernel sum:

    mode 4: one stride offset s, one in-channel j, one out-channel i
    mode 3: sum over strides          (fixed j, i)
    mode 2: sum over in-channels      (fixed s, i)  -> <x|H> is the whole unit
    mode 1: sum over both             (fixed i)
    mode 0: one FC class logit        (fixed class k)

The cotangent for a conv mode is the kernel slice scattered onto the selected
receptive fields of the conv's input map; pulling it back through the earlier
layers is a single vjp. The first conv layer sits directly on the input and
has nothing to pull back through, so conv addressing starts at 1.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor
from .adjoint import ActivationTrace, Cotangent, vjp, vjp_from_boundary
from .network import NetworkGraph


class ReconstructionError(ValueError):
    pass


@dataclass(frozen=True)
class Hypersurface:
    """An input-shaped covector plus the indices identifying its unit."""

    values: np.ndarray
    mode: int
    layer: int | None  # conv ordinal; None for mode 0
    s: int | None = None
    j: int | None = None
    i: int | None = None
    k: int | None = None
    eval_k: float = 0.125


@dataclass(frozen=True)
class ReconstructionRequest:
    """A (possibly filtered) sweep over one layer's surfaces.

    Index filters are tuples of ints; None selects the full range. Emission
    order is deterministic: s-major, then j, then i (classes for mode 0).
    """

    mode: int
    layer: int | None = None  # conv ordinal for modes 1-4; ignored for mode 0
    s: tuple | None = None
    j: tuple | None = None
    i: tuple | None = None
    k: tuple | None = None


def conv_geometry(net: NetworkGraph, conv_ordinal: int):
    """(flat index, stride count, in-channels, out-channels) for a conv ordinal."""
    convs = net.conv_layer_indices()
    if not 0 <= conv_ordinal < len(convs):
        raise ReconstructionError(f"no conv layer {conv_ordinal} (architecture has {len(convs)})")
    flat = convs[conv_ordinal]
    oh, ow, cout = net.boundary_shapes[flat]
    cin = net.layers[flat].kernel.shape[2]
    return flat, oh * ow, cin, cout


def _require_eligible(net: NetworkGraph, conv_ordinal: int):
    flat, s_count, cin, cout = conv_geometry(net, conv_ordinal)
    if conv_ordinal == 0:
        raise ReconstructionError(
            "conv layer 0 reads the input directly; its kernel is its own surface "
            "and there is nothing to reconstruct"
        )
    return flat, s_count, cin, cout


def _conv_surface(net: NetworkGraph, trace_: ActivationTrace, conv_ordinal: int, i: int, j=None, s=None) -> np.ndarray:
    """Shared engine for modes 1-4: scatter the kernel slice, pull back."""
    flat, s_count, cin, cout = _require_eligible(net, conv_ordinal)
    layer = net.layers[flat]
    oh, ow, _ = net.boundary_shapes[flat]
    if not 0 <= i < cout:
        raise ReconstructionError(f"out-channel {i} outside [0, {cout})")
    gy = np.zeros((oh, ow, cout), dtype=net.dtype)
    if s is None:
        gy[:, :, i] = 1
    else:
        if not 0 <= s < s_count:
            raise ReconstructionError(f"stride offset {s} outside [0, {s_count})")
        gy[s // ow, s % ow, i] = 1
    kernel = layer.kernel
    if j is not None:
        if not 0 <= j < cin:
            raise ReconstructionError(f"in-channel {j} outside [0, {cin})")
        masked = np.zeros_like(kernel)
        masked[:, :, j, :] = kernel[:, :, j, :]
        kernel = masked
    in_shape = net.boundary_shapes[flat - 1]
    cot_in = tensor.conv2d_input_grad(gy, kernel, in_shape[:2], layer.stride)
    return vjp_from_boundary(trace_, net, flat - 1, cot_in)


def rm4(net, trace_, layer: int, s: int, j: int, i: int) -> Hypersurface:
    """Surface of in-channel j's receptive-field term of unit (s, i)."""
    values = _conv_surface(net, trace_, layer, i, j=j, s=s)
    return Hypersurface(values, 4, layer, s=s, j=j, i=i, eval_k=trace_.k)


def rm3(net, trace_, layer: int, j: int, i: int) -> Hypersurface:
    """Sum of mode-4 surfaces over every stride offset."""
    values = _conv_surface(net, trace_, layer, i, j=j, s=None)
    return Hypersurface(values, 3, layer, j=j, i=i, eval_k=trace_.k)


def rm2(net, trace_, layer: int, s: int, i: int) -> Hypersurface:
    """Whole-unit surface: <x|H> reproduces pre-activation unit (s, i)."""
    values = _conv_surface(net, trace_, layer, i, j=None, s=s)
    return Hypersurface(values, 2, layer, s=s, i=i, eval_k=trace_.k)


def rm1(net, trace_, layer: int, i: int) -> Hypersurface:
    """Channel-aggregate surface: sum over strides and in-channels."""
    values = _conv_surface(net, trace_, layer, i, j=None, s=None)
    return Hypersurface(values, 1, layer, i=i, eval_k=trace_.k)


def rm0(net, trace_, k: int) -> Hypersurface:
    """Class-logit surface: <x|H_k> reproduces logit k."""
    fc = net.fc_index()
    classes = net.class_count
    if not 0 <= k < classes:
        raise ReconstructionError(f"class {k} outside [0, {classes})")
    e = np.zeros((classes,), dtype=net.dtype)
    e[k] = 1
    values = vjp(trace_, net, Cotangent(fc, e))
    return Hypersurface(values, 0, None, k=k, eval_k=trace_.k)


def enumerate_indices(net: NetworkGraph, request: ReconstructionRequest):
    """Deterministic index tuples (s, j, i, k) for a request; -1 marks n/a."""
    mode = request.mode
    if mode not in (0, 1, 2, 3, 4):
        raise ReconstructionError(f"unknown mode {mode}")
    if mode == 0:
        ks = request.k if request.k is not None else range(net.class_count)
        for k in ks:
            yield (-1, -1, -1, int(k))
        return
    if request.layer is None:
        raise ReconstructionError(f"mode {mode} needs a conv layer")
    _, s_count, cin, cout = _require_eligible(net, request.layer)
    s_list = request.s if request.s is not None else range(s_count)
    j_list = request.j if request.j is not None else range(cin)
    i_list = request.i if request.i is not None else range(cout)
    if mode == 4:
        for s in s_list:
            for j in j_list:
                for i in i_list:
                    yield (int(s), int(j), int(i), -1)
    elif mode == 3:
        for j in j_list:
            for i in i_list:
                yield (-1, int(j), int(i), -1)
    elif mode == 2:
        for s in s_list:
            for i in i_list:
                yield (int(s), -1, int(i), -1)
    else:
        for i in i_list:
            yield (-1, -1, int(i), -1)


def _surface_for(net, trace_, request, idx) -> Hypersurface:
    s, j, i, k = idx
    if request.mode == 0:
        return rm0(net, trace_, k)
    if request.mode == 4:
        return rm4(net, trace_, request.layer, s, j, i)
    if request.mode == 3:
        return rm3(net, trace_, request.layer, j, i)
    if request.mode == 2:
        return rm2(net, trace_, request.layer, s, i)
    return rm1(net, trace_, request.layer, i)


def batch_reconstruct(net, trace_, request: ReconstructionRequest, workers: int = 1, skip: int = 0):
    """Yield Hypersurfaces for a request in enumeration order, never holding
    the sweep in memory. `skip` drops the first n surfaces (stream resume)."""
    indices = list(enumerate_indices(net, request))[skip:]
    if workers <= 1:
        for idx in indices:
            yield _surface_for(net, trace_, request, idx)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        window = workers * 4
        pending = []
        it = iter(indices)
        for idx in it:
            pending.append(pool.submit(_surface_for, net, trace_, request, idx))
            if len(pending) >= window:
                yield pending.pop(0).result()
        while pending:
            yield pending.pop(0).result()


def surface_inventory(net: NetworkGraph) -> list:
    """Rows of (layer name, mode, surface count, surface shape) for the whole net.

    Conv layer 0 is absent by design; mode 0 covers the FC classes.
    """
    rows = []
    shape = tuple(net.input_shape)
    convs = net.conv_layer_indices()
    for ordinal in range(1, len(convs)):
        name = net.layers[convs[ordinal]].name
        _, s_count, cin, cout = conv_geometry(net, ordinal)
        rows.append((name, 4, s_count * cin * cout, shape))
        rows.append((name, 3, cin * cout, shape))
        rows.append((name, 2, s_count * cout, shape))
        rows.append((name, 1, cout, shape))
    rows.append((net.layers[net.fc_index()].name, 0, net.class_count, shape))
    return rows
