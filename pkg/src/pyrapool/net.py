"""Sequential network descriptions, the parameter store they share across
input-size instantiations, and forward/backward execution.

A `NetworkSpec` is an ordered chain of conv / maxpool / spp / fc / relu /
dropout / softmax layers. Instantiating it at a concrete input size resolves
every feature-map shape and precomputes the pyramid bin layout for that size;
all instantiations of one spec resolve their parameter slots to the identical
arrays in one `ParameterStore`, which is what makes multi-size training a
single model rather than several.

With a pyramid layer present, the pooled length k*M is independent of the
input size, so the fully-connected stack (and therefore the whole parameter
set) is size-agnostic.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import (CheckpointError, GraphError, ShapeError,
                     SpecMismatchError)
from .geometry import FeatureGeometry, GeomLayer
from .spp import BinLayout, PyramidSpec, spp_backward_batch, spp_forward_batch


class ForwardStats:
    """Process-wide instrumentation: how many convolutional-trunk passes ran.

    Multi-view prediction and region pooling are contractually bounded in
    trunk passes; tests reset and read this counter.
    """

    def __init__(self):
        self.trunk_passes = 0

    def reset(self):
        self.trunk_passes = 0


stats = ForwardStats()


# ---------------------------------------------------------------------------
# layer descriptions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int | None = None  # None -> floor(kernel/2)
    name: str = ""

    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int
    padding: int | None = None  # None -> floor(window/2)
    name: str = ""

    def pad(self) -> int:
        return self.window // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class SPP:
    levels: tuple[int, ...]
    name: str = ""


@dataclass(frozen=True)
class FC:
    out_features: int
    name: str = ""


@dataclass(frozen=True)
class ReLU:
    name: str = ""


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.5
    name: str = ""


@dataclass(frozen=True)
class Softmax:
    name: str = ""


_KIND_PREFIX = {Conv: "conv", MaxPool: "pool", SPP: "spp", FC: "fc",
                ReLU: "relu", Dropout: "drop", Softmax: "softmax"}


class NetworkSpec:
    """Ordered layer chain with auto-assigned names and structural checks."""

    def __init__(self, layers, in_channels: int = 1):
        self.in_channels = in_channels
        named = []
        counts: dict[str, int] = {}
        for layer in layers:
            if not layer.name:
                prefix = _KIND_PREFIX[type(layer)]
                counts[prefix] = counts.get(prefix, 0) + 1
                layer = dataclass_replace(layer, name=f"{prefix}{counts[prefix]}")
            named.append(layer)
        self.layers = tuple(named)
        self._validate()

    def _validate(self):
        spp_idx = [i for i, l in enumerate(self.layers) if isinstance(l, SPP)]
        if len(spp_idx) > 1:
            raise GraphError("at most one pyramid pooling layer is allowed")
        fc_idx = [i for i, l in enumerate(self.layers) if isinstance(l, FC)]
        sm_idx = [i for i, l in enumerate(self.layers) if isinstance(l, Softmax)]
        if sm_idx and sm_idx[0] != len(self.layers) - 1:
            raise GraphError("softmax must be the final layer")
        if spp_idx:
            i = spp_idx[0]
            if not fc_idx or fc_idx[0] < i:
                raise GraphError(
                    "the pyramid layer must come before every fc layer")
            for later in self.layers[i + 1:]:
                if isinstance(later, (Conv, MaxPool)):
                    raise GraphError(
                        f"{later.name} follows the pyramid layer; it must be "
                        f"the last spatially-aware layer")
        self.spp_index = spp_idx[0] if spp_idx else None

    def layer_named(self, name: str):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise GraphError(f"no layer named {name!r}")

    def trunk_geometry(self) -> FeatureGeometry:
        """Stride/padding record of the conv trunk (everything before the
        pyramid layer); fails if any padding breaks the mapping rule."""
        if self.spp_index is None:
            raise GraphError("network has no pyramid layer")
        geom = []
        for layer in self.layers[:self.spp_index]:
            if isinstance(layer, Conv):
                geom.append(GeomLayer(layer.kernel, layer.stride, layer.pad()))
            elif isinstance(layer, MaxPool):
                geom.append(GeomLayer(layer.window, layer.stride, layer.pad()))
        return FeatureGeometry(geom)

    def pyramid(self) -> PyramidSpec:
        if self.spp_index is None:
            raise GraphError("network has no pyramid layer")
        return PyramidSpec(self.layers[self.spp_index].levels)

    def head_layers(self):
        """Layers after the pyramid layer (fc / relu / dropout / softmax)."""
        if self.spp_index is None:
            raise GraphError("network has no pyramid layer")
        return self.layers[self.spp_index + 1:]


def dataclass_replace(layer, **kw):
    return dataclasses.replace(layer, **kw)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class Slot:
    __slots__ = ("value", "grad", "momentum")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)
        self.momentum = np.zeros_like(value)


class ParameterStore:
    """Named parameter slots with gradient and momentum buffers.

    Slots are created on first use and afterwards resolved by name, so every
    instantiation of a spec shares the same storage. Weights draw from a
    Gaussian whose width is fan-in-scaled (sqrt(2/fan_in)) unless a fixed
    `sigma` is given; biases start at zero.
    """

    def __init__(self, seed: int = 0, sigma: float | None = None):
        self.sigma = sigma
        self._rng = np.random.default_rng(seed)
        self._slots: dict[str, Slot] = {}

    def _weight_sigma(self, shape) -> float:
        if self.sigma is not None:
            return self.sigma
        fan_in = int(np.prod(shape[1:]))
        return float(np.sqrt(2.0 / max(fan_in, 1)))

    def slot(self, name: str, shape, init: str = "gauss") -> Slot:
        existing = self._slots.get(name)
        if existing is not None:
            if existing.value.shape != tuple(shape):
                raise SpecMismatchError(
                    f"slot {name!r} holds shape {existing.value.shape}, "
                    f"network expects {tuple(shape)}")
            return existing
        if init == "gauss":
            value = self._rng.normal(0.0, self._weight_sigma(shape),
                                     size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        slot = Slot(value.astype(np.float32))
        self._slots[name] = slot
        return slot

    def reinit_slot(self, name: str, shape, sigma: float | None = None,
                    init: str = "gauss") -> Slot:
        """Replace a slot with a fresh draw (new output heads)."""
        if init == "zeros":
            value = np.zeros(shape, np.float32)
        else:
            sig = self._weight_sigma(shape) if sigma is None else sigma
            value = self._rng.normal(0.0, sig, size=shape).astype(np.float32)
        slot = Slot(value)
        self._slots[name] = slot
        return slot

    def names(self):
        return list(self._slots)

    def items(self):
        return self._slots.items()

    def __getitem__(self, name: str) -> Slot:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def zero_grads(self):
        for slot in self._slots.values():
            slot.grad[...] = 0.0

    def load_values(self, values: dict[str, np.ndarray]):
        """Install checkpointed arrays; fresh grad/momentum buffers."""
        for name, arr in values.items():
            self._slots[name] = Slot(np.ascontiguousarray(arr, dtype=np.float32))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: slot.value.copy() for name, slot in self._slots.items()}


# ---------------------------------------------------------------------------
# shape resolution and instantiation
# ---------------------------------------------------------------------------

def compute_shapes(spec: NetworkSpec, input_size) -> list[tuple[str, tuple]]:
    """Walk the chain at (h, w) and return [(layer name, output shape)];
    spatial shapes are (c, h, w), post-pyramid/fc shapes are (features,).

    Raises GraphError naming the first layer whose map collapses below 1x1.
    """
    h, w = input_size
    if h < 1 or w < 1:
        raise GraphError(f"input size {input_size} is degenerate")
    shape: tuple = (spec.in_channels, h, w)
    out = []
    for layer in spec.layers:
        if isinstance(layer, Conv):
            c, hh, ww = _require_spatial(shape, layer)
            oh = tensor.conv_out_size(hh, layer.kernel, layer.stride, layer.pad())
            ow = tensor.conv_out_size(ww, layer.kernel, layer.stride, layer.pad())
            if oh < 1 or ow < 1:
                raise GraphError(
                    f"feature map collapses to {oh}x{ow} at layer {layer.name}")
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, MaxPool):
            c, hh, ww = _require_spatial(shape, layer)
            oh = tensor.conv_out_size(hh, layer.window, layer.stride, layer.pad())
            ow = tensor.conv_out_size(ww, layer.window, layer.stride, layer.pad())
            if oh < 1 or ow < 1:
                raise GraphError(
                    f"feature map collapses to {oh}x{ow} at layer {layer.name}")
            shape = (c, oh, ow)
        elif isinstance(layer, SPP):
            c, hh, ww = _require_spatial(shape, layer)
            shape = (PyramidSpec(layer.levels).output_length(c),)
        elif isinstance(layer, FC):
            flat = int(np.prod(shape))
            shape = (layer.out_features,)
        # relu/dropout/softmax keep the shape
        out.append((layer.name, shape))
    return out


def _require_spatial(shape, layer):
    if len(shape) != 3:
        raise GraphError(f"layer {layer.name} needs a spatial input, got {shape}")
    return shape


class NetworkInstance:
    """One spec resolved at a fixed input size against a shared store."""

    def __init__(self, spec: NetworkSpec, input_size, params: ParameterStore):
        self.spec = spec
        self.input_size = tuple(input_size)
        self.params = params
        self.shapes = compute_shapes(spec, input_size)
        self._shape_by_name = dict(self.shapes)
        self._bind_slots()
        if spec.spp_index is not None:
            if spec.spp_index == 0:
                c, h, w = (spec.in_channels, *self.input_size)
            else:
                c, h, w = self.shapes[spec.spp_index - 1][1]
            self.spp_layout = BinLayout(spec.pyramid(), h, w)
        else:
            self.spp_layout = None

    def _bind_slots(self):
        in_shape: tuple = (self.spec.in_channels, *self.input_size)
        self.slots: dict[str, tuple] = {}
        for layer, (name, out_shape) in zip(self.spec.layers, self.shapes):
            if isinstance(layer, Conv):
                wshape = (layer.out_channels, in_shape[0], layer.kernel,
                          layer.kernel)
                self.slots[name] = (
                    self.params.slot(f"{name}.weight", wshape, "gauss"),
                    self.params.slot(f"{name}.bias", (layer.out_channels,),
                                     "zeros"),
                )
            elif isinstance(layer, FC):
                flat = int(np.prod(in_shape))
                self.slots[name] = (
                    self.params.slot(f"{name}.weight",
                                     (layer.out_features, flat), "gauss"),
                    self.params.slot(f"{name}.bias", (layer.out_features,),
                                     "zeros"),
                )
            in_shape = out_shape

    @property
    def output_length(self) -> int:
        return int(np.prod(self.shapes[-1][1]))

    def shape_at(self, layer_name: str):
        try:
            return self._shape_by_name[layer_name]
        except KeyError:
            raise GraphError(f"no layer named {layer_name!r}")

    # -- execution ---------------------------------------------------------

    def forward(self, batch: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None):
        """Run the chain; returns (logits, saved activations for backward).

        Logits are the activations entering the softmax layer (or the final
        layer's output when no softmax is declared).
        """
        self._check_input(batch)
        if train_mode and rng is None:
            rng = np.random.default_rng(0)
        stats.trunk_passes += 1
        x = batch
        saved = {"train_mode": train_mode, "caches": []}
        for layer in self.spec.layers:
            x, cache = self._layer_forward(layer, x, train_mode, rng)
            saved["caches"].append(cache)
        return x, saved

    def _check_input(self, batch):
        expect = (self.spec.in_channels, *self.input_size)
        if batch.ndim != 4 or batch.shape[1:] != expect:
            raise ShapeError(
                f"batch shaped {batch.shape}, instance expects (B, {expect[0]}, "
                f"{expect[1]}, {expect[2]})")

    def _layer_forward(self, layer, x, train_mode, rng):
        if isinstance(layer, Conv):
            wslot, bslot = self.slots[layer.name]
            spec = tensor.ConvSpec(layer.out_channels, layer.kernel,
                                   layer.stride, layer.pad())
            out = tensor.conv_forward(x, wslot.value, bslot.value, spec)
            return out, ("conv", layer, x)
        if isinstance(layer, MaxPool):
            out, argmax = tensor.maxpool_forward(
                x, (layer.window, layer.window), (layer.stride, layer.stride),
                (layer.pad(), layer.pad()))
            return out, ("pool", layer, argmax, x.shape)
        if isinstance(layer, SPP):
            out, argmax = spp_forward_batch(x, PyramidSpec(layer.levels),
                                            layout=self.spp_layout)
            return out, ("spp", layer, argmax, x.shape)
        if isinstance(layer, FC):
            orig = x.shape
            flat = x.reshape(orig[0], -1)
            wslot, bslot = self.slots[layer.name]
            out = tensor.fc_forward(flat, wslot.value, bslot.value)
            return out, ("fc", layer, flat, orig)
        if isinstance(layer, ReLU):
            out, mask = tensor.relu_forward(x)
            return out, ("relu", layer, mask)
        if isinstance(layer, Dropout):
            out, mask = tensor.dropout(x, layer.rate, train_mode, rng)
            return out, ("drop", layer, mask)
        if isinstance(layer, Softmax):
            # training couples the softmax with the loss; forward yields logits
            return x, ("softmax", layer)
        raise GraphError(f"unknown layer {layer!r}")

    def backward(self, saved, grad_logits: np.ndarray):
        """Accumulate parameter gradients from a train-mode forward pass."""
        if not saved["train_mode"]:
            raise GraphError(
                "backward requires activations saved with train_mode=True")
        g = grad_logits
        for cache in reversed(saved["caches"]):
            kind = cache[0]
            if kind == "conv":
                _, layer, x = cache
                wslot, bslot = self.slots[layer.name]
                spec = tensor.ConvSpec(layer.out_channels, layer.kernel,
                                       layer.stride, layer.pad())
                g, gw, gb = tensor.conv_backward(g, x, wslot.value, spec)
                wslot.grad += gw
                bslot.grad += gb
            elif kind == "pool":
                _, layer, argmax, in_shape = cache
                g = tensor.maxpool_backward(g, argmax, in_shape)
            elif kind == "spp":
                _, layer, argmax, in_shape = cache
                g = spp_backward_batch(g, argmax, in_shape)
            elif kind == "fc":
                _, layer, flat, orig = cache
                wslot, bslot = self.slots[layer.name]
                g, gw, gb = tensor.fc_backward(g, flat, wslot.value)
                wslot.grad += gw
                bslot.grad += gb
                g = g.reshape(orig)
            elif kind == "relu":
                g = tensor.relu_backward(g, cache[2])
            elif kind == "drop":
                g = tensor.dropout_backward(g, cache[2])
            elif kind == "softmax":
                pass  # loss gradient already w.r.t. logits
        return g

    def feature_at(self, batch: np.ndarray, layer_name: str) -> np.ndarray:
        """Eval-mode activation after the named layer."""
        self.spec.layer_named(layer_name)
        self._check_input(batch)
        x = batch
        for layer in self.spec.layers:
            if isinstance(layer, Softmax):
                x = tensor.softmax(x)
            else:
                x, _ = self._layer_forward(layer, x, False, None)
            if layer.name == layer_name:
                return x
        raise GraphError(f"no layer named {layer_name!r}")  # pragma: no cover

    def conv_features(self, batch: np.ndarray) -> np.ndarray:
        """Eval-mode feature map entering the pyramid layer (one trunk pass)."""
        if self.spec.spp_index is None:
            raise GraphError("network has no pyramid layer")
        self._check_input(batch)
        stats.trunk_passes += 1
        x = batch
        for layer in self.spec.layers[:self.spec.spp_index]:
            x, _ = self._layer_forward(layer, x, False, None)
        return x

    def head_forward(self, pooled: np.ndarray) -> np.ndarray:
        """Eval-mode logits from an already-pooled (B, k*M) feature batch."""
        x = pooled
        for layer in self.spec.head_layers():
            if isinstance(layer, Softmax):
                break
            x, _ = self._layer_forward(layer, x, False, None)
        return x

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(batch, train_mode=False)
        return tensor.softmax(logits)


def instantiate(spec: NetworkSpec, input_size,
                params: ParameterStore) -> NetworkInstance:
    """Resolve `spec` at (h, w) against `params`; see NetworkInstance."""
    return NetworkInstance(spec, input_size, params)


# ---------------------------------------------------------------------------
# canned architectures
# ---------------------------------------------------------------------------

def toy_shape_net(n_classes: int = 5, channels=(8, 16), levels=(3, 2, 1),
                  fc_width: int = 64, in_channels: int = 1,
                  dropout: float = 0.5) -> NetworkSpec:
    """Small trunk (stride product 4) for the synthetic shape corpora; every
    layer pads floor(k/2), so it supports window mapping."""
    c1, c2 = channels
    return NetworkSpec([
        Conv(c1, 3, 1),
        ReLU(),
        MaxPool(3, 2),
        Conv(c2, 3, 2),
        ReLU(),
        SPP(tuple(levels)),
        FC(fc_width),
        ReLU(),
        Dropout(dropout),
        FC(n_classes),
        Softmax(),
    ], in_channels=in_channels)


def zf5_net(n_classes: int = 1000, levels=(6, 3, 2, 1), fc_dims=(4096, 4096),
            table_padding: bool = True) -> NetworkSpec:
    """Five-conv reference architecture (stride product 16).

    With `table_padding` the published per-layer paddings are used, which
    reproduce the 55/27/13 map sizes at 224x224 input; set it False for the
    floor(k/2) deployment padding that window mapping requires.
    """
    if table_padding:
        pads = dict(conv1=1, pool1=1, conv2=1, pool2=0)
    else:
        pads = dict(conv1=3, pool1=1, conv2=2, pool2=1)
    layers = [
        Conv(96, 7, 2, pads["conv1"], name="conv1"),
        ReLU(),
        MaxPool(3, 2, pads["pool1"], name="pool1"),
        Conv(256, 5, 2, pads["conv2"], name="conv2"),
        ReLU(),
        MaxPool(3, 2, pads["pool2"], name="pool2"),
        Conv(384, 3, 1, 1, name="conv3"),
        ReLU(),
        Conv(384, 3, 1, 1, name="conv4"),
        ReLU(),
        Conv(256, 3, 1, 1, name="conv5"),
        ReLU(),
        SPP(tuple(levels)),
    ]
    for width in fc_dims:
        layers += [FC(width), ReLU(), Dropout(0.5)]
    layers += [FC(n_classes), Softmax()]
    return NetworkSpec(layers, in_channels=3)


NET_REGISTRY = {
    "toy": toy_shape_net,
    "zf5": zf5_net,
}


def build_net(name: str, **kw) -> NetworkSpec:
    try:
        builder = NET_REGISTRY[name]
    except KeyError:
        raise GraphError(
            f"unknown network {name!r}; choose from {sorted(NET_REGISTRY)}")
    return builder(**kw)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPPCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(store: ParameterStore, path):
    """Binary, bit-exact parameter dump: magic, version byte, slot count, then
    per-slot (name, shape, raw little-endian float32 values)."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<B", CHECKPOINT_VERSION)
    items = list(store.items())
    blob += struct.pack("<I", len(items))
    for name, slot in items:
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        value = np.ascontiguousarray(slot.value, dtype="<f4")
        blob += struct.pack("<B", value.ndim)
        for dim in value.shape:
            blob += struct.pack("<I", dim)
        blob += value.tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(
                f"checkpoint {path} truncated reading {what} at byte {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(8, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = struct.unpack("<B", take(1, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = struct.unpack("<I", take(4, "slot count"))[0]
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        ndim = struct.unpack("<B", take(1, "ndim"))[0]
        shape = tuple(struct.unpack("<I", take(4, "dim"))[0]
                      for _ in range(ndim))
        n_values = int(np.prod(shape)) if shape else 1
        raw = take(4 * n_values, f"values of {name}")
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out
