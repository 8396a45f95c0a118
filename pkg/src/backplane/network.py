"""Bias-free network graphs: construction, inference, training gradients, and
on-disk serialization.

A graph is a flat list of layers; residual merges reference the earlier layer
whose output forms the block input, so the list stays topologically ordered.
No layer carries an additive parameter: kernels, FC weights, and scalar
rescales are all purely multiplicative, which is what makes the exact
input-space linearization downstream possible.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .tensor import ShapeMismatchError

MODEL_MAGIC = b"ABMP"
MODEL_VERSION = 1
_DTYPE_TAGS = {4: np.dtype(np.float32), 8: np.dtype(np.float64)}


class ModelFormatError(IOError):
    """Base for structurally invalid model files."""


class ModelMagicError(ModelFormatError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class ModelChecksumError(ModelFormatError):
    pass


class ModelTruncatedError(ModelFormatError):
    pass


@dataclass
class LayerSpec:
    """One node of the flat graph. Only the fields for its kind are meaningful."""

    kind: str  # conv | activation | avg_pool | global_pool | fc | scalar_rescale | residual_add
    name: str = ""
    kernel: np.ndarray | None = None  # conv: (r1, r2, cin, cout); fc: (cin, classes)
    stride: int = 1
    window: int = 1
    act: str = "relu"
    scale: np.ndarray | None = None  # scalar_rescale: shape-() array
    shortcut_from: int = -1  # residual_add: layer whose output enters the block (-1 = net input)
    shortcut_kind: str = "identity"  # identity | avgpool_pad


@dataclass
class NetworkGraph:
    arch: str
    input_shape: tuple
    class_count: int
    layers: list = field(default_factory=list)
    # boundary_shapes[i] is the shape of layers[i]'s output; index -1 the input.
    boundary_shapes: list = field(default_factory=list)

    @property
    def dtype(self) -> np.dtype:
        for layer in self.layers:
            if layer.kernel is not None:
                return layer.kernel.dtype
        raise ValueError("graph has no parameters")

    def conv_layer_indices(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv"]

    def fc_index(self) -> int:
        for i, l in enumerate(self.layers):
            if l.kind == "fc":
                return i
        raise ValueError("graph has no fc layer")

    def parameters(self):
        """Yield (name, array) in deterministic layer order."""
        for layer in self.layers:
            if layer.kind in ("conv", "fc"):
                yield layer.name, layer.kernel
            elif layer.kind == "scalar_rescale":
                yield layer.name, layer.scale

    def additive_parameter_count(self) -> int:
        """Bias audit: number of additive parameter tensors in the graph."""
        # Structural by construction: LayerSpec has no bias slot at all, so any
        # parameter is a kernel, an FC weight, or a multiplicative scalar.
        count = 0
        for layer in self.layers:
            for attr in vars(layer).values():
                if isinstance(attr, np.ndarray) and attr is not layer.kernel and attr is not layer.scale:
                    count += 1
        return count


def _propagate_shapes(net: NetworkGraph):
    """Walk the graph symbolically, checking each merge, and record boundaries."""
    shape = tuple(net.input_shape)
    shapes = []
    for idx, layer in enumerate(net.layers):
        if layer.kind == "conv":
            r1, r2, cin, cout = layer.kernel.shape
            if shape[2] != cin:
                raise ShapeMismatchError(layer.name or "conv", (shape[0], shape[1], cin), shape)
            oh = tensor.same_pads(shape[0], r1, layer.stride)[0]
            ow = tensor.same_pads(shape[1], r2, layer.stride)[0]
            shape = (oh, ow, cout)
        elif layer.kind == "avg_pool":
            oh = tensor.same_pads(shape[0], layer.window, layer.stride)[0]
            ow = tensor.same_pads(shape[1], layer.window, layer.stride)[0]
            shape = (oh, ow, shape[2])
        elif layer.kind == "global_pool":
            shape = (shape[2],)
        elif layer.kind == "fc":
            cin, classes = layer.kernel.shape
            if shape != (cin,):
                raise ShapeMismatchError(layer.name or "fc", (cin,), shape)
            shape = (classes,)
        elif layer.kind == "residual_add":
            src = tuple(net.input_shape) if layer.shortcut_from < 0 else shapes[layer.shortcut_from]
            if layer.shortcut_kind == "avgpool_pad":
                src = (-(-src[0] // 2), -(-src[1] // 2), shape[2])
            if src != shape:
                raise ShapeMismatchError(layer.name or "residual_add", shape, src)
        elif layer.kind in ("activation", "scalar_rescale"):
            pass
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        shapes.append(shape)
    net.boundary_shapes = shapes
    return net


def _shortcut_value(src: np.ndarray, kind: str, out_channels: int) -> np.ndarray:
    if kind == "identity":
        return src
    if kind == "avgpool_pad":
        # Window-1 stride-2 average pooling is plain subsampling; zero channels
        # are appended to match the block's output width.
        sub = src[..., ::2, ::2, :]
        pad = out_channels - sub.shape[-1]
        width = [(0, 0)] * (sub.ndim - 1) + [(0, pad)]
        return np.pad(sub, width)
    raise ValueError(f"unknown shortcut kind {kind!r}")


def _shortcut_adjoint(g: np.ndarray, kind: str, src_shape: tuple) -> np.ndarray:
    if kind == "identity":
        return g
    if kind == "avgpool_pad":
        batched = g.ndim == 4
        full = (g.shape[0],) + tuple(src_shape) if batched else tuple(src_shape)
        gx = np.zeros(full, dtype=g.dtype)
        gx[..., ::2, ::2, :] = g[..., : src_shape[-1]]
        return gx
    raise ValueError(f"unknown shortcut kind {kind!r}")


def forward(net: NetworkGraph, x: np.ndarray):
    """Run the graph on one image or a batch.

    Returns (logits, outs) where logits is the FC pre-activation (the final
    clipping/ReLU layer is applied for outs but never feeds the logits) and
    outs[i] is the output of layers[i].
    """
    x = np.asarray(x, dtype=net.dtype)
    batched = x.ndim == len(net.input_shape) + 1
    expect = tuple(net.input_shape)
    got = x.shape[1:] if batched else x.shape
    if got != expect:
        raise ShapeMismatchError("forward", expect, got)
    outs = []
    val = x
    for layer in net.layers:
        if layer.kind == "conv":
            val = tensor.conv2d(val, layer.kernel, layer.stride)
        elif layer.kind == "activation":
            val = tensor.activation(val, layer.act)
        elif layer.kind == "avg_pool":
            val = tensor.avg_pool(val, layer.window, layer.stride)
        elif layer.kind == "global_pool":
            val = tensor.global_pool(val)
        elif layer.kind == "fc":
            val = val @ layer.kernel
        elif layer.kind == "scalar_rescale":
            val = val * layer.scale
        elif layer.kind == "residual_add":
            src = x if layer.shortcut_from < 0 else outs[layer.shortcut_from]
            val = val + _shortcut_value(src, layer.shortcut_kind, val.shape[-1])
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        outs.append(val)
    return outs[net.fc_index()], outs


def backprop(net: NetworkGraph, x: np.ndarray, g_logits: np.ndarray, want_weight_grads: bool = True):
    """Live backward pass from the FC pre-activation cotangent.

    Returns (g_input, grads) where grads maps parameter name to gradient
    (summed over the batch). Activation gates are evaluated at the live
    pre-activations, so this is the true gradient almost everywhere.
    """
    x = np.asarray(x, dtype=net.dtype)
    _, outs = forward(net, x)
    fc = net.fc_index()
    g_logits = np.asarray(g_logits, dtype=net.dtype)
    if not np.all(np.isfinite(g_logits)):
        raise FloatingPointError("backprop: non-finite logits cotangent")
    grads = {}
    acc = {fc: g_logits}
    for i in range(fc, -1, -1):
        g = acc.pop(i, None)
        if g is None:
            continue
        layer = net.layers[i]
        x_in = x if i == 0 else outs[i - 1]
        in_shape = net.boundary_shapes[i - 1] if i > 0 else tuple(net.input_shape)
        if layer.kind == "conv":
            if want_weight_grads:
                grads[layer.name] = tensor.conv2d_kernel_grad(x_in, g, layer.kernel.shape, layer.stride)
            gi = tensor.conv2d_input_grad(g, layer.kernel, in_shape[:2], layer.stride)
        elif layer.kind == "activation":
            gi = g * tensor.activation_gate(x_in, layer.act)
        elif layer.kind == "avg_pool":
            gi = tensor.avg_pool_grad(g, in_shape[:2], layer.window, layer.stride)
        elif layer.kind == "global_pool":
            gi = tensor.global_pool_grad(g, in_shape[:2])
        elif layer.kind == "fc":
            if want_weight_grads:
                x2 = x_in if x_in.ndim == 2 else x_in[None]
                g2 = g if g.ndim == 2 else g[None]
                grads[layer.name] = x2.T @ g2
            gi = g @ layer.kernel.T
        elif layer.kind == "scalar_rescale":
            if want_weight_grads:
                grads[layer.name] = np.asarray(np.sum(x_in * g), dtype=net.dtype)
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
    return acc[-1], grads


# ---------------------------------------------------------------------------
# Builders


def _conv(name, r, cin, cout, stride, dtype):
    return LayerSpec(kind="conv", name=name, kernel=np.zeros((r, r, cin, cout), dtype=dtype), stride=stride)


def _act(name, kind="relu"):
    return LayerSpec(kind="activation", name=name, act=kind)


def build_vgg7(dtype=np.float32) -> NetworkGraph:
    """Six stride-1 3x3 convs with two mid avg-pools, global pool, FC to 10.

    The final activation is the 6-clipping kind; logits are taken before it.
    """
    dtype = np.dtype(dtype)
    layers = [
        _conv("conv0", 3, 3, 32, 1, dtype),
        _act("relu0"),
        _conv("conv1", 3, 32, 32, 1, dtype),
        _act("relu1"),
        LayerSpec(kind="avg_pool", name="pool0", window=3, stride=2),
        _conv("conv2", 3, 32, 64, 1, dtype),
        _act("relu2"),
        _conv("conv3", 3, 64, 64, 1, dtype),
        _act("relu3"),
        LayerSpec(kind="avg_pool", name="pool1", window=3, stride=2),
        _conv("conv4", 3, 64, 96, 1, dtype),
        _act("relu4"),
        _conv("conv5", 3, 96, 96, 1, dtype),
        _act("relu5"),
        LayerSpec(kind="global_pool", name="gpool"),
        LayerSpec(kind="fc", name="fc", kernel=np.zeros((96, 10), dtype=dtype)),
        _act("relu6", "relu6"),
    ]
    net = NetworkGraph(arch="vgg7", input_shape=(32, 32, 3), class_count=10, layers=layers)
    return _propagate_shapes(net)


def build_fixup_resnet20(dtype=np.float32) -> NetworkGraph:
    """Stem conv + 9 two-conv residual blocks + global pool + FC to 10.

    Blocks 3 and 6 stride down with a pool+pad shortcut; every block's second
    conv feeds a learnable scalar rescale (init 1.0) before the merge.
    """
    dtype = np.dtype(dtype)
    widths = [32, 32, 32, 32, 64, 64, 64, 96, 96, 96]  # widths[0] is the stem
    layers = [_conv("conv0", 3, 3, 32, 1, dtype), _act("relu0")]
    for block in range(9):
        cin = widths[block]
        cout = widths[block + 1]
        stride = 2 if cout != cin else 1
        a = 2 * block + 1
        b = 2 * block + 2
        block_start = len(layers) - 1  # layer whose output enters the block
        layers.append(_conv(f"conv{a}", 3, cin, cout, stride, dtype))
        layers.append(_act(f"relu{a}"))
        layers.append(_conv(f"conv{b}", 3, cout, cout, 1, dtype))
        layers.append(
            LayerSpec(kind="scalar_rescale", name=f"rescale{block}", scale=np.ones((), dtype=dtype))
        )
        layers.append(
            LayerSpec(
                kind="residual_add",
                name=f"merge{block}",
                shortcut_from=block_start,
                shortcut_kind="avgpool_pad" if stride == 2 else "identity",
            )
        )
        layers.append(_act(f"relu{b}"))
    layers.append(LayerSpec(kind="global_pool", name="gpool"))
    layers.append(LayerSpec(kind="fc", name="fc", kernel=np.zeros((96, 10), dtype=dtype)))
    layers.append(_act("relu19"))
    net = NetworkGraph(arch="fixup_resnet20", input_shape=(32, 32, 3), class_count=10, layers=layers)
    return _propagate_shapes(net)


def build_tiny(dtype=np.float32) -> NetworkGraph:
    """Two small convs + global pool + FC on an 8x8x1 input; 312 parameters."""
    dtype = np.dtype(dtype)
    layers = [
        _conv("conv0", 3, 1, 4, 1, dtype),
        _act("relu0"),
        _conv("conv1", 3, 4, 6, 2, dtype),
        _act("relu1"),
        LayerSpec(kind="global_pool", name="gpool"),
        LayerSpec(kind="fc", name="fc", kernel=np.zeros((6, 10), dtype=dtype)),
        _act("relu2", "relu6"),
    ]
    net = NetworkGraph(arch="tiny", input_shape=(8, 8, 1), class_count=10, layers=layers)
    return _propagate_shapes(net)


ARCHITECTURES = {
    "vgg7": (1, build_vgg7),
    "fixup_resnet20": (2, build_fixup_resnet20),
    "tiny": (3, build_tiny),
}
_ARCH_BY_ID = {aid: (name, builder) for name, (aid, builder) in ARCHITECTURES.items()}


def init_weights(net: NetworkGraph, rng: np.random.Generator, scheme: str = "he") -> NetworkGraph:
    """Fill parameters in place. 'he' draws every kernel at He scale; 'residual'
    additionally shrinks each block's first conv and zeroes its second so deep
    stacks start near the shortcut map."""
    if scheme not in ("he", "residual"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    blocks = sum(1 for l in net.layers if l.kind == "residual_add")
    in_block_pos = 0
    for layer in net.layers:
        if layer.kind == "conv":
            r1, r2, cin, cout = layer.kernel.shape
            std = np.sqrt(2.0 / (r1 * r2 * cin))
            layer.kernel[...] = rng.standard_normal(layer.kernel.shape) * std
            if scheme == "residual" and blocks and layer.name != "conv0":
                if in_block_pos == 0:
                    layer.kernel[...] *= blocks ** -0.5
                    in_block_pos = 1
                else:
                    layer.kernel[...] = 0.0
                    in_block_pos = 0
        elif layer.kind == "fc":
            cin, _ = layer.kernel.shape
            layer.kernel[...] = rng.standard_normal(layer.kernel.shape) * np.sqrt(2.0 / cin)
        elif layer.kind == "scalar_rescale":
            layer.scale[...] = 1.0
    return net


# ---------------------------------------------------------------------------
# Model file


def save_model(net: NetworkGraph, path) -> None:
    """Write magic, version, arch id, dtype tag, parameter blobs, trailing CRC32."""
    arch_id = ARCHITECTURES[net.arch][0]
    dtype = net.dtype
    tag = dtype.itemsize
    body = bytearray()
    body += MODEL_MAGIC
    body += struct.pack("<HHB", MODEL_VERSION, arch_id, tag)
    params = list(net.parameters())
    body += struct.pack("<I", len(params))
    for _, arr in params:
        blob = np.ascontiguousarray(arr, dtype=dtype.newbyteorder("<")).tobytes()
        body += struct.pack("<Q", len(blob))
        body += blob
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_model(path) -> NetworkGraph:
    """Inverse of save_model; every structural defect raises a distinct error."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MODEL_MAGIC:
        raise ModelMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 13:
        raise ModelTruncatedError(f"{path}: header truncated at {len(raw)} bytes")
    version, arch_id, tag = struct.unpack_from("<HHB", raw, 4)
    if version != MODEL_VERSION:
        raise ModelVersionError(f"{path}: version {version}, expected {MODEL_VERSION}")
    if arch_id not in _ARCH_BY_ID:
        raise ModelFormatError(f"{path}: unknown architecture id {arch_id}")
    if tag not in _DTYPE_TAGS:
        raise ModelFormatError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    name, builder = _ARCH_BY_ID[arch_id]
    net = builder(dtype=dtype)
    params = list(net.parameters())
    (count,) = struct.unpack_from("<I", raw, 9)
    if count != len(params):
        raise ModelFormatError(f"{path}: {count} blobs, architecture {name} has {len(params)}")
    # Walk the declared structure before touching the checksum so a short file
    # is reported as truncation, not corruption.
    offsets = []
    off = 13
    for pname, arr in params:
        if off + 8 > len(raw):
            raise ModelTruncatedError(f"{path}: truncated before blob {pname}")
        (nbytes,) = struct.unpack_from("<Q", raw, off)
        off += 8
        if nbytes != arr.size * dtype.itemsize:
            raise ModelFormatError(f"{path}: blob {pname} has {nbytes} bytes, expected {arr.size * dtype.itemsize}")
        if off + nbytes > len(raw):
            raise ModelTruncatedError(f"{path}: blob {pname} truncated")
        offsets.append(off)
        off += nbytes
    if off + 4 > len(raw):
        raise ModelTruncatedError(f"{path}: missing checksum")
    if off + 4 != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - off - 4} trailing bytes after checksum")
    stored = struct.unpack_from("<I", raw, off)[0]
    if zlib.crc32(raw[:off]) & 0xFFFFFFFF != stored:
        raise ModelChecksumError(f"{path}: CRC mismatch")
    for (pname, arr), blob_off in zip(params, offsets):
        flat = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=arr.size, offset=blob_off)
        arr[...] = flat.astype(dtype).reshape(arr.shape)
    return net
