"""M-Net: multi-scale input, U-shape encoder/decoder, side-output heads.

The network is described as a :class:`LayerGraph`, an ordered list of
:class:`OpNode` records that :func:`forward` evaluates in sequence. Parameters
live in an ordered name -> :class:`~polarseg.autodiff.Tensor` mapping so that
weight files and optimizer state line up by name.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHTS_MAGIC = b"MNETW1"


class ConfigError(ValueError):
    pass


class WeightsFormatError(ValueError):
    pass


@dataclass
class MNetConfig:
    depth: int = 4
    base_channels: int = 32
    input_size: int = 400
    in_channels: int = 3
    num_classes: int = 2
    side_weights: Optional[list] = None
    class_weights: Optional[list] = None
    convs_per_scale: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1 or self.convs_per_scale < 1:
            raise ConfigError("channel counts and convs_per_scale must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        step = 2 ** (self.depth - 1)
        if self.input_size < step or self.input_size % step:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2^(depth-1) = {step}")
        if self.class_weights is None:
            self.class_weights = [1.0 / self.num_classes] * self.num_classes
        if self.num_classes != len(self.class_weights):
            raise ConfigError(
                f"num_classes={self.num_classes} but {len(self.class_weights)} class weights given")
        total = float(sum(self.class_weights))
        if total <= 0 or any(w < 0 for w in self.class_weights):
            raise ConfigError("class weights must be non-negative with a positive sum")
        self.class_weights = [float(w) / total for w in self.class_weights]
        if self.side_weights is None:
            self.side_weights = [1.0 / self.depth] * self.depth
        self.side_weights = [float(a) for a in self.side_weights]
        if len(self.side_weights) != self.num_sides:
            raise ConfigError(
                f"{len(self.side_weights)} side weights given for {self.num_sides} side outputs")

    @property
    def num_sides(self) -> int:
        return self.depth

    def channels(self, scale: int) -> int:
        return self.base_channels * 2 ** scale


@dataclass(frozen=True)
class OpNode:
    name: str
    kind: str  # conv, transposed-conv, relu, sigmoid, avg-pool, upsample, concat, mean-fuse
    inputs: tuple
    params: tuple = ()
    hyper: dict = field(default_factory=dict)


@dataclass
class LayerGraph:
    config: MNetConfig
    nodes: list
    params: dict
    side_outputs: list
    output: str = "fused"

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def edges(self) -> list:
        return [(src, node.name) for node in self.nodes for src in node.inputs]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise WeightsFormatError(
                f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise WeightsFormatError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class _Builder:
    def __init__(self, cfg: MNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.nodes: list = []
        self.params: dict = {}

    def _param(self, name, data):
        self.params[name] = Tensor(data, requires_grad=True, name=name)
        return name

    def add(self, name, kind, inputs, params=(), **hyper):
        self.nodes.append(OpNode(name, kind, tuple(inputs), tuple(params), hyper))
        return name

    def conv(self, name, src, cin, cout, k, relu=True):
        w = self._param(f"{name}.weight", ad.he_normal((cout, cin, k, k), self.rng))
        b = self._param(f"{name}.bias", np.zeros(cout, dtype=np.float32))
        out = self.add(name, "conv", [src], [w, b], stride=1, padding="same")
        if relu:
            out = self.add(f"{name}.relu", "relu", [out])
        return out

    def deconv(self, name, src, cin, cout):
        # transposed kernels use the conv layout (cin, cout, kh, kw); fan-in seen per output pixel is cin
        w = (self.rng.standard_normal((cin, cout, 2, 2)) * np.sqrt(2.0 / cin)).astype(np.float32)
        w = self._param(f"{name}.weight", w)
        b = self._param(f"{name}.bias", np.zeros(cout, dtype=np.float32))
        out = self.add(name, "transposed-conv", [src], [w, b], stride=2)
        return self.add(f"{name}.relu", "relu", [out])


def build_mnet(cfg: MNetConfig, seed: int = 0) -> LayerGraph:
    """Assemble the M-Net layer graph with freshly initialised parameters."""
    rng = np.random.default_rng(seed)
    bld = _Builder(cfg, rng)
    k = cfg.kernel_size

    # multi-scale input pyramid
    pyramid = ["image"]
    for s in range(1, cfg.depth):
        pyramid.append(bld.add(f"input{s}", "avg-pool", [pyramid[-1]], window=2))

    # encoder
    enc = []
    src, cin = "image", cfg.in_channels
    for s in range(cfg.depth):
        ch = cfg.channels(s)
        if s > 0:
            pooled = bld.add(f"enc{s}.pool", "avg-pool", [enc[-1]], window=2)
            inj_ch = cfg.channels(s - 1)
            inj = bld.conv(f"enc{s}.inject", pyramid[s], cfg.in_channels, inj_ch, k)
            src = bld.add(f"enc{s}.concat", "concat", [inj, pooled])
            cin = inj_ch + cfg.channels(s - 1)
        for i in range(cfg.convs_per_scale):
            src = bld.conv(f"enc{s}.conv{i}", src, cin, ch, k)
            cin = ch
        enc.append(src)

    # decoder: dec[s] is the feature map at scale s
    dec = {cfg.depth - 1: enc[-1]}
    for s in range(cfg.depth - 2, -1, -1):
        ch = cfg.channels(s)
        up = bld.deconv(f"dec{s}.up", dec[s + 1], cfg.channels(s + 1), ch)
        src = bld.add(f"dec{s}.concat", "concat", [up, enc[s]])
        cin = 2 * ch
        for i in range(cfg.convs_per_scale):
            src = bld.conv(f"dec{s}.conv{i}", src, cin, ch, k)
            cin = ch
        dec[s] = src

    # side-output heads, finest scale first
    sides = []
    for s in range(cfg.depth):
        logits = bld.conv(f"side{s}", dec[s], cfg.channels(s), cfg.num_classes, 1, relu=False)
        if s > 0:
            logits = bld.add(f"side{s}.up", "upsample", [logits], factor=2 ** s)
        sides.append(bld.add(f"side{s}.sigmoid", "sigmoid", [logits]))
    bld.add("fused", "mean-fuse", sides)

    return LayerGraph(cfg, bld.nodes, bld.params, sides)


def multi_scale_inputs(image: Tensor, depth: int) -> list:
    """Image pyramid of ``depth`` levels built by repeated 2×2 average pooling."""
    image = ad.as_tensor(image)
    h, w = image.shape[2:]
    step = 2 ** (depth - 1)
    if h % step or w % step:
        raise ad.ShapeError(f"spatial size {(h, w)} not divisible by 2^(depth-1) = {step}")
    levels = [image]
    for _ in range(depth - 1):
        levels.append(ad.avg_pool2d(levels[-1], 2))
    return levels


_OPS = {
    "relu": lambda ins, ps, hp: ad.relu(ins[0]),
    "sigmoid": lambda ins, ps, hp: ad.sigmoid(ins[0]),
    "avg-pool": lambda ins, ps, hp: ad.avg_pool2d(ins[0], hp["window"]),
    "upsample": lambda ins, ps, hp: ad.upsample_nearest(ins[0], hp["factor"]),
    "concat": lambda ins, ps, hp: ad.concat_channels(*ins),
    "mean-fuse": lambda ins, ps, hp: ad.mean_fuse(ins),
    "conv": lambda ins, ps, hp: ad.conv2d(ins[0], *ps, stride=hp["stride"], padding=hp["padding"]),
    "transposed-conv": lambda ins, ps, hp: ad.transposed_conv2d(ins[0], *ps, stride=hp["stride"]),
}


def forward(graph: LayerGraph, image) -> tuple[list, Tensor]:
    """Evaluate the graph; returns (side-output maps, fused map)."""
    cfg = graph.config
    image = ad.as_tensor(image)
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if image.data.ndim != 4 or image.shape[1:] != expected:
        raise ad.ShapeError(f"network expects input of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                            f"got {image.shape}")
    values = {"image": image}
    for node in graph.nodes:
        ins = [values[n] for n in node.inputs]
        ps = [graph.params[n] for n in node.params]
        values[node.name] = _OPS[node.kind](ins, ps, node.hyper)
    return [values[n] for n in graph.side_outputs], values[graph.output]


def predict(graph: LayerGraph, image: np.ndarray) -> np.ndarray:
    """Fused probability map for a single (C, H, W) image, shape (K, H, W)."""
    _, fused = forward(graph, np.asarray(image, dtype=np.float32)[None])
    return fused.data[0]


# ---------------------------------------------------------------------------
# weight container
# ---------------------------------------------------------------------------

def encode_arrays(arrays: dict) -> bytes:
    chunks = [WEIGHTS_MAGIC]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_arrays(blob: bytes) -> dict:
    if not blob.startswith(WEIGHTS_MAGIC):
        raise WeightsFormatError("not a weights file: MNETW1 expected")
    out = {}
    pos = len(WEIGHTS_MAGIC)
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 4 * count > len(blob):
                raise WeightsFormatError(f"truncated data for parameter {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise WeightsFormatError(f"truncated weights file: {exc}") from None
    return out


def save_weights(path, arrays: dict) -> None:
    Path(path).write_bytes(encode_arrays(arrays))


def load_weights(path) -> dict:
    return decode_arrays(Path(path).read_bytes())
