"""Layer-stack descriptions of the predictor networks, their executor, and checkpoints.

Layer counting: every descriptor in `ModelSpec.layers` is one layer. ReLU is
folded into the hidden conv/dense layers and the sigmoid into the output
conv, while input and reshape stages count as layers of their own.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import FormatError

KINDS = ("static_schema", "scene_conditioned", "autoencoder", "recurrent_predictor")
N_INPUTS = 9  # 3 action + 6 tactile channels


@dataclass(frozen=True)
class LayerSpec:
    type: str  # input | reshape | dense | conv | conv_transpose | lstm
    name: str
    channels: int = 0  # conv output channels / dense units / lstm units
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "none"  # none | relu | sigmoid
    shape: tuple[int, ...] = ()  # input / reshape target


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    image_size: int
    feature_dim: int = 0
    lstm_units: int = 0
    feature_layer: str = ""  # autoencoder: last encoder layer

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(f"unknown layer {name!r}; known: {[l.name for l in self.layers]}")

    def transposed_layers(self) -> list[str]:
        return [l.name for l in self.layers if l.type == "conv_transpose"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = tuple(LayerSpec(**{**l, "shape": tuple(l["shape"])}) for l in d["layers"])
        return cls(
            kind=d["kind"],
            layers=layers,
            input_shape=tuple(d["input_shape"]),
            output_shape=tuple(d["output_shape"]),
            image_size=d["image_size"],
            feature_dim=d.get("feature_dim", 0),
            lstm_units=d.get("lstm_units", 0),
            feature_layer=d.get("feature_layer", ""),
        )


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    seed_channels: int = 64  # static: channels of the 4x4 seed map
    min_channels: int = 8
    convs_per_block: int = 1  # stride-1 convs after each resolution change
    encoder_levels: int = 3  # scene-conditioned: stride-2 stages
    encoder_channels: int = 16
    max_channels: int = 64
    feature_dim: int = 32
    lstm_units: int = 60
    recurrent_levels: int = 4
    recurrent_hidden: int = 128


def _check_image_size(size: int):
    if size not in (32, 64, 128):
        raise ShapeError(f"image size must be one of 32, 64, 128 (got {size})")


def build_static_schema(cfg: ModelConfig = ModelConfig()) -> ModelSpec:
    """9 inputs as a 3x3x1 map -> dense 4x4 seed -> [convT x2, conv]* -> RGB."""
    size = cfg.image_size
    _check_image_size(size)
    blocks = int(round(math.log2(size / 4)))
    if 4 * 2**blocks != size:
        raise ShapeError(f"resolution {size} unreachable from a 4x4 seed by doubling")
    c0 = cfg.seed_channels
    layers = [
        LayerSpec("input", "input", shape=(N_INPUTS,)),
        LayerSpec("reshape", "grid", shape=(3, 3, 1)),
        LayerSpec("dense", "seed", channels=4 * 4 * c0, activation="relu"),
        LayerSpec("reshape", "seed_map", shape=(4, 4, c0)),
    ]
    for b in range(1, blocks + 1):
        ch = max(cfg.min_channels, c0 // 2**b)
        layers.append(LayerSpec("conv_transpose", f"up{b}", ch, 4, 2, 1, "relu"))
        for m in range(cfg.convs_per_block):
            layers.append(LayerSpec("conv", f"up{b}_conv{m + 1}", ch, 3, 1, 1, "relu"))
    layers.append(LayerSpec("conv", "out", 3, 3, 1, 1, "sigmoid"))
    return _finish(ModelSpec("static_schema", tuple(layers), (N_INPUTS,), (size, size, 3), size))


def _encoder(cfg: ModelConfig, levels: int, prefix: str, extra_convs: int) -> list[LayerSpec]:
    layers = []
    for i in range(1, levels + 1):
        ch = min(cfg.max_channels, cfg.encoder_channels * 2 ** (i - 1))
        layers.append(LayerSpec("conv", f"{prefix}{i}", ch, 4, 2, 1, "relu"))
        for m in range(extra_convs):
            layers.append(LayerSpec("conv", f"{prefix}{i}_conv{m + 1}", ch, 3, 1, 1, "relu"))
    return layers


def build_scene_conditioned(cfg: ModelConfig = ModelConfig()) -> ModelSpec:
    """Scene RGB + 9 broadcast channels -> stride-2 conv encoder -> convT decoder -> RGB."""
    size = cfg.image_size
    _check_image_size(size)
    e = cfg.encoder_levels
    if size % 2**e:
        raise ShapeError(f"{e} stride-2 levels do not divide image size {size}")
    layers = [LayerSpec("input", "input", shape=(size, size, 3 + N_INPUTS))]
    layers += _encoder(cfg, e, "down", cfg.convs_per_block)
    for i in range(e - 1, -1, -1):
        ch = max(cfg.min_channels, min(cfg.max_channels, cfg.encoder_channels * 2 ** max(i - 1, 0)))
        name = f"up{e - i}"
        layers.append(LayerSpec("conv_transpose", name, ch, 4, 2, 1, "relu"))
        for m in range(cfg.convs_per_block):
            layers.append(LayerSpec("conv", f"{name}_conv{m + 1}", ch, 3, 1, 1, "relu"))
    layers.append(LayerSpec("conv", "out", 3, 3, 1, 1, "sigmoid"))
    spec = ModelSpec(
        "scene_conditioned", tuple(layers), (size, size, 3 + N_INPUTS), (size, size, 3), size
    )
    return _finish(spec)


def build_autoencoder(cfg: ModelConfig = ModelConfig()) -> ModelSpec:
    size = cfg.image_size
    _check_image_size(size)
    levels = int(round(math.log2(size / 4)))
    layers = [LayerSpec("input", "input", shape=(size, size, 3))]
    enc = _encoder(replace(cfg, encoder_channels=8, max_channels=32), levels, "enc", 0)
    layers += enc
    last = enc[-1].channels
    layers += [
        LayerSpec("reshape", "flatten", shape=(4 * 4 * last,)),
        LayerSpec("dense", "features", channels=cfg.feature_dim),
        LayerSpec("dense", "expand", channels=4 * 4 * last, activation="relu"),
        LayerSpec("reshape", "unflatten", shape=(4, 4, last)),
    ]
    for i in range(levels - 1, -1, -1):
        ch = max(cfg.min_channels, min(32, 8 * 2 ** max(i - 1, 0)))
        layers.append(LayerSpec("conv_transpose", f"dec{levels - i}", ch, 4, 2, 1, "relu"))
    layers.append(LayerSpec("conv", "out", 3, 3, 1, 1, "sigmoid"))
    spec = ModelSpec(
        "autoencoder",
        tuple(layers),
        (size, size, 3),
        (size, size, 3),
        size,
        feature_dim=cfg.feature_dim,
        feature_layer="features",
    )
    return _finish(spec)


def build_recurrent_predictor(cfg: ModelConfig = ModelConfig()) -> ModelSpec:
    """Per-frame conv stack over the 12-channel input -> dense -> LSTM -> features."""
    size = cfg.image_size
    _check_image_size(size)
    levels = cfg.recurrent_levels
    if size % 2**levels:
        raise ShapeError(f"{levels} stride-2 levels do not divide image size {size}")
    layers = [LayerSpec("input", "input", shape=(size, size, 3 + N_INPUTS))]
    enc = _encoder(replace(cfg, encoder_channels=8, max_channels=32), levels, "enc", 0)
    layers += enc
    side = size // 2**levels
    layers += [
        LayerSpec("reshape", "flatten", shape=(side * side * enc[-1].channels,)),
        LayerSpec("dense", "embed", channels=cfg.recurrent_hidden, activation="relu"),
        LayerSpec("lstm", "lstm", channels=cfg.lstm_units),
        LayerSpec("dense", "features", channels=cfg.feature_dim),
    ]
    spec = ModelSpec(
        "recurrent_predictor",
        tuple(layers),
        (size, size, 3 + N_INPUTS),
        (cfg.feature_dim,),
        size,
        feature_dim=cfg.feature_dim,
        lstm_units=cfg.lstm_units,
    )
    return _finish(spec)


BUILDERS = {
    "static_schema": build_static_schema,
    "scene_conditioned": build_scene_conditioned,
    "autoencoder": build_autoencoder,
    "recurrent_predictor": build_recurrent_predictor,
}


def _finish(spec: ModelSpec) -> ModelSpec:
    shapes = infer_shapes(spec)
    if shapes[-1] != spec.output_shape:
        raise ShapeError(f"{spec.kind}: stack ends at {shapes[-1]}, declared {spec.output_shape}")
    return spec


def infer_shapes(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-sample output shape of every layer; raises ShapeError on a broken chain."""
    shapes: list[tuple[int, ...]] = []
    cur: tuple[int, ...] = ()
    for layer in spec.layers:
        if layer.type == "input":
            if shapes:
                raise ShapeError("input must be the first layer")
            cur = tuple(layer.shape)
        elif layer.type == "reshape":
            if math.prod(layer.shape) != math.prod(cur):
                raise ShapeError(f"{layer.name}: cannot reshape {cur} to {layer.shape}")
            cur = tuple(layer.shape)
        elif layer.type in ("dense", "lstm"):
            cur = (layer.channels,)
        elif layer.type == "conv":
            if len(cur) != 3:
                raise ShapeError(f"{layer.name}: conv needs H x W x C input, got {cur}")
            h, w, _ = cur
            if h + 2 * layer.padding < layer.kernel:
                raise ShapeError(f"{layer.name}: kernel larger than padded input")
            ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            cur = (ho, wo, layer.channels)
        elif layer.type == "conv_transpose":
            if len(cur) != 3:
                raise ShapeError(f"{layer.name}: conv_transpose needs H x W x C input, got {cur}")
            h, w, _ = cur
            cur = (
                (h - 1) * layer.stride - 2 * layer.padding + layer.kernel,
                (w - 1) * layer.stride - 2 * layer.padding + layer.kernel,
                layer.channels,
            )
        else:
            raise ShapeError(f"unknown layer type {layer.type!r}")
        shapes.append(cur)
    if shapes[0] != spec.input_shape:
        raise ShapeError(f"input layer {shapes[0]} disagrees with declared {spec.input_shape}")
    return shapes


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every trainable tensor, in layer order."""
    out: dict[str, tuple[int, ...]] = {}
    shapes = infer_shapes(spec)
    prev = spec.input_shape
    for layer, shape in zip(spec.layers, shapes):
        if layer.type == "dense":
            out[f"{layer.name}.weight"] = (math.prod(prev), layer.channels)
            out[f"{layer.name}.bias"] = (layer.channels,)
        elif layer.type == "conv":
            out[f"{layer.name}.weight"] = (layer.kernel, layer.kernel, prev[-1], layer.channels)
            out[f"{layer.name}.bias"] = (layer.channels,)
        elif layer.type == "conv_transpose":
            out[f"{layer.name}.weight"] = (layer.kernel, layer.kernel, layer.channels, prev[-1])
            out[f"{layer.name}.bias"] = (layer.channels,)
        elif layer.type == "lstm":
            u = layer.channels
            out[f"{layer.name}.w_input"] = (math.prod(prev), 4 * u)
            out[f"{layer.name}.w_hidden"] = (u, 4 * u)
            out[f"{layer.name}.bias"] = (4 * u,)
        prev = shape
    return out


def parameter_count(spec: ModelSpec) -> int:
    return sum(math.prod(s) for s in parameter_shapes(spec).values())


def init_weights(spec: ModelSpec, seed: int, zero_output: bool = False) -> dict[str, np.ndarray]:
    """He-uniform conv/dense weights, zero biases, LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    layers = {l.name: l for l in spec.layers}
    for name, shape in parameter_shapes(spec).items():
        lname, pname = name.rsplit(".", 1)
        layer = layers[lname]
        if pname == "bias":
            w = np.zeros(shape)
            if layer.type == "lstm":
                u = layer.channels
                w[u : 2 * u] = 1.0
        elif layer.type == "lstm":
            limit = 1.0 / math.sqrt(layer.channels)
            w = rng.uniform(-limit, limit, shape)
        else:
            if layer.type == "dense":
                fan_in = shape[0]
            elif layer.type == "conv":
                fan_in = shape[0] * shape[1] * shape[2]
            else:  # each transposed-conv output sees K^2/stride^2 taps per input channel
                fan_in = shape[0] * shape[1] * shape[3] / layer.stride**2
            gain = 6.0 if layer.activation == "relu" else 3.0
            limit = math.sqrt(gain / fan_in)
            w = rng.uniform(-limit, limit, shape)
        weights[name] = w.astype(np.float32)
    if zero_output:
        last = [l for l in spec.layers if l.type in ("conv", "dense", "conv_transpose")][-1]
        weights[f"{last.name}.weight"][:] = 0.0
        weights[f"{last.name}.bias"][:] = 0.0
    return weights


def _activate(y: Tensor, activation: str) -> Tensor:
    if activation == "relu":
        return ad.relu(y)
    if activation == "sigmoid":
        return ad.sigmoid(y)
    return y


class Network:
    """Executable model: a ModelSpec plus its weights as grad-tracking tensors."""

    def __init__(self, spec: ModelSpec, weights: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.spec = spec
        expected = parameter_shapes(spec)
        if weights is None:
            weights = init_weights(spec, seed)
        missing = set(expected) - set(weights)
        extra = set(weights) - set(expected)
        if missing or extra:
            raise ShapeError(f"weights do not match spec (missing {sorted(missing)}, extra {sorted(extra)})")
        self.params: dict[str, Tensor] = {}
        for name, shape in expected.items():
            w = np.asarray(weights[name])
            if w.shape != shape:
                raise ShapeError(f"{name}: weight shape {w.shape}, spec expects {shape}")
            self.params[name] = Tensor(w.astype(np.float32, copy=True), requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def weights(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _apply(self, layer: LayerSpec, x: Tensor) -> Tensor:
        p = self.params
        if layer.type == "reshape":
            return ad.reshape(x, (x.shape[0],) + tuple(layer.shape))
        if layer.type == "dense":
            y = ad.dense(ad.reshape(x, (x.shape[0], -1)), p[f"{layer.name}.weight"], p[f"{layer.name}.bias"])
            return _activate(y, layer.activation)
        if layer.type == "conv":
            y = ad.conv2d(x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], layer.stride, layer.padding)
            return _activate(y, layer.activation)
        if layer.type == "conv_transpose":
            y = ad.conv_transpose2d(
                x, p[f"{layer.name}.weight"], p[f"{layer.name}.bias"], layer.stride, layer.padding
            )
            return _activate(y, layer.activation)
        raise ShapeError(f"layer {layer.name} of type {layer.type} cannot run per frame")

    def _check_input(self, x: Tensor):
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"{self.spec.kind} expects input {self.spec.input_shape}, got {x.shape[1:]}")

    def forward(self, x, capture: dict[str, Tensor] | None = None, start: str | None = None,
                stop: str | None = None) -> Tensor:
        """Batched forward pass over the feed-forward layers.

        `capture` collects named layer outputs; `start`/`stop` run a slice of
        the stack (exclusive start, inclusive stop) for encoder/decoder use.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        running = start is None
        if running:
            self._check_input(x)
        for layer in self.spec.layers:
            if not running:
                running = layer.name == start
                continue
            if layer.type == "input":
                pass
            elif layer.type == "lstm":
                raise ShapeError("use forward_sequence for recurrent models")
            else:
                x = self._apply(layer, x)
            if capture is not None:
                capture[layer.name] = x
            if layer.name == stop:
                break
        return x

    def forward_sequence(self, x, state=None, capture=None):
        """Recurrent forward over (B, T, ...) inputs; returns (outputs (B, T, F), (h, c))."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        b, t = x.shape[:2]
        if tuple(x.shape[2:]) != self.spec.input_shape:
            raise ShapeError(f"{self.spec.kind} expects frames {self.spec.input_shape}, got {x.shape[2:]}")
        y = ad.reshape(x, (b * t,) + tuple(x.shape[2:]))
        layers = list(self.spec.layers)
        k = next(i for i, l in enumerate(layers) if l.type == "lstm")
        for layer in layers[1:k]:
            y = self._apply(layer, y)
        lstm = layers[k]
        u = lstm.channels
        y = ad.reshape(y, (b, t, -1))
        if state is None:
            h = Tensor(np.zeros((b, u), dtype=np.float32))
            c = Tensor(np.zeros((b, u), dtype=np.float32))
        else:
            h, c = state
        p = self.params
        outs = []
        for s in range(t):
            h, c = ad.lstm_step(
                y[:, s, :], h, c, p[f"{lstm.name}.w_input"], p[f"{lstm.name}.w_hidden"], p[f"{lstm.name}.bias"]
            )
            outs.append(ad.reshape(h, (b, 1, u)))
        z = ad.reshape(ad.concat(outs, axis=1), (b * t, u))
        for layer in layers[k + 1 :]:
            z = self._apply(layer, z)
        return ad.reshape(z, (b, t) + tuple(z.shape[1:])), (h, c)

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Inference in fixed-size chunks so results do not depend on the caller's batching."""
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(np.asarray(x[i : i + batch_size], dtype=np.float32)).data)
        return np.concatenate(out) if out else np.zeros((0,) + self.spec.output_shape, np.float32)

    def encode(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        if not self.spec.feature_layer:
            raise ShapeError(f"{self.spec.kind} has no feature layer")
        out = []
        with ad.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.forward(images[i : i + batch_size], stop=self.spec.feature_layer).data)
        return np.concatenate(out)

    def decode(self, features: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(features), batch_size):
                z = Tensor(np.asarray(features[i : i + batch_size], dtype=np.float32))
                out.append(self.forward(z, start=self.spec.feature_layer).data)
        return np.concatenate(out)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"SBSM"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    weights: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def network(self) -> Network:
        return Network(self.spec, self.weights)

    def check_compatible(self, image_size: int) -> None:
        """Raise ShapeError if this model cannot evaluate images of `image_size`."""
        if self.spec.image_size != image_size:
            raise ShapeError(
                f"checkpoint built for {self.spec.image_size}px images, dataset has {image_size}px"
            )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blob = json.dumps({"spec": ckpt.spec.to_dict(), "metadata": ckpt.metadata}, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob]
    expected = parameter_shapes(ckpt.spec)
    for name, shape in expected.items():
        if name not in ckpt.weights:
            raise ShapeError(f"checkpoint lacks tensor {name}")
        w = np.asarray(ckpt.weights[name], dtype="<f4")
        if w.shape != shape:
            raise ShapeError(f"{name}: weight shape {w.shape}, spec expects {shape}")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<B", w.ndim))
        parts.append(struct.pack(f"<{w.ndim}I", *w.shape))
        parts.append(w.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", offset=self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    version, n = r.unpack("<HI", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    try:
        head = json.loads(r.take(n, "spec blob").decode())
        spec = ModelSpec.from_dict(head["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable spec blob: {exc}", offset=10) from None
    expected = parameter_shapes(spec)
    weights = {}
    while not r.done:
        (klen,) = r.unpack("<H", "tensor name length")
        name = r.take(klen, "tensor name").decode()
        (ndim,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{ndim}I", "tensor dims")
        count = math.prod(dims)
        raw = r.take(4 * count, f"tensor {name}")
        if name in weights:
            raise FormatError(f"duplicate tensor {name}", offset=r.pos)
        weights[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    for name, shape in expected.items():
        if name not in weights:
            raise ShapeError(f"checkpoint lacks tensor {name}")
        if weights[name].shape != shape:
            raise ShapeError(f"{name}: stored shape {weights[name].shape}, spec expects {shape}")
    if set(weights) - set(expected):
        raise ShapeError(f"checkpoint has unexpected tensors {sorted(set(weights) - set(expected))}")
    return Checkpoint(spec, weights, head.get("metadata", {}))
