"""Feature-fusion operators, their shape algebra, and a parameter/MAC counter.

Feature maps are stored channel-first as ``(C, W, H)``. All operators are
linear (convolutions with bias, no activations), and the interpolation
kernels are per channel, so their cost is O(C W H).

Scale tags are the nominal pyramid levels. Interpolation-Down relabels a
level ``T`` as ``2T/3`` and Interpolation-Up relabels ``T`` as ``4T/3``, so
1/2 and 1/4 both feed the synthetic 1/3 level and 1/4 and 1/8 feed 1/6.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import check_int
from .exceptions import ShapeError

DOWN_RATIO = Fraction(2, 3)
UP_RATIO = Fraction(4, 3)
INIT_BOUND = 0.1

LAYER_KINDS = ("conv", "pool", "upsample", "concat", "split", "interp_down", "interp_up")


def _tag(value) -> Fraction:
    tag = Fraction(value)
    if tag <= 0:
        raise ValueError(f"scale tag must be positive, got {value}")
    return tag


@dataclass(frozen=True, eq=False)
class FeatureTensor:
    data: np.ndarray
    scale_tag: Fraction = Fraction(1)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"feature data must be a non-empty C x W x H array, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature data must be finite")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "scale_tag", _tag(self.scale_tag))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class ConvWeights:
    """Dense convolution ``(C_out, C_in, k, k)`` with a bias per output channel."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv weight must be (C_out, C_in, k, k), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def random(cls, rng: np.random.Generator, in_channels, out_channels, kernel):
        w = rng.uniform(-INIT_BOUND, INIT_BOUND, size=(out_channels, in_channels, kernel, kernel))
        b = rng.uniform(-INIT_BOUND, INIT_BOUND, size=out_channels)
        return cls(w, b)

    @classmethod
    def identity(cls, channels):
        """1x1 convolution that copies its input."""
        return cls(np.eye(channels)[:, :, None, None], np.zeros(channels))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size


def conv2d(data, conv: ConvWeights, stride=1, padding=0) -> np.ndarray:
    """Cross-correlation of a ``(C_in, W, H)`` array; zero padding on both axes."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] != conv.in_channels:
        raise ShapeError(
            f"conv expects {conv.in_channels} input channels, got array of shape {data.shape}")
    k = conv.kernel
    if padding:
        data = np.pad(data, ((0, 0), (padding, padding), (padding, padding)))
    if data.shape[1] < k or data.shape[2] < k:
        raise ShapeError(f"input {data.shape[1:]} smaller than kernel {k}")
    windows = sliding_window_view(data, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("cxyab,ocab->oxy", windows, conv.weight, optimize=True)
    return out + conv.bias[:, None, None]


def _depthwise_kernel(weights, channels) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape == (2, 2):
        w = np.broadcast_to(w, (channels, 2, 2))
    if w.shape != (channels, 2, 2):
        raise ShapeError(f"interpolation kernel must be (2, 2) or ({channels}, 2, 2), got {w.shape}")
    return w


def _patch_conv(data, kernel) -> np.ndarray:
    """Map every 4x4 patch of ``data`` to 3x3 with a 2x2 stride-1 convolution."""
    c, width, height = data.shape
    patches = data.reshape(c, width // 4, 4, height // 4, 4)
    out = np.zeros((c, width // 4, 3, height // 4, 3))
    for a in range(2):
        for b in range(2):
            out += kernel[:, a, b, None, None, None, None] * patches[:, :, a:a + 3, :, b:b + 3]
    return out.reshape(c, 3 * (width // 4), 3 * (height // 4))


def interpolation_down(t: FeatureTensor, weights) -> FeatureTensor:
    """``C x 4W x 4H`` to ``C x 3W x 3H``, one 4x4 patch at a time."""
    if t.width % 4 or t.height % 4:
        raise ShapeError(
            f"interpolation_down needs width and height divisible by 4, got {t.width}x{t.height}")
    kernel = _depthwise_kernel(weights, t.channels)
    return FeatureTensor(_patch_conv(t.data, kernel), t.scale_tag * DOWN_RATIO)


def interpolation_up(t: FeatureTensor, weights) -> FeatureTensor:
    """``C x 2W x 2H`` to ``C x 3W x 3H``: nearest-neighbour 2x2 to 4x4, then the patch conv."""
    if t.width % 2 or t.height % 2:
        raise ShapeError(
            f"interpolation_up needs width and height divisible by 2, got {t.width}x{t.height}")
    kernel = _depthwise_kernel(weights, t.channels)
    upsampled = np.repeat(np.repeat(t.data, 2, axis=1), 2, axis=2)
    return FeatureTensor(_patch_conv(upsampled, kernel), t.scale_tag * UP_RATIO)


def sfm_targets(tags: Sequence) -> list[Fraction]:
    """Scale tags every input can be brought to (identity, down or up)."""
    options = None
    for tag in tags:
        tag = _tag(tag)
        reach = {tag, tag * DOWN_RATIO, tag * UP_RATIO}
        options = reach if options is None else options & reach
    return sorted(options or (), reverse=True)


def _format_tags(tags) -> str:
    return "[" + ", ".join(str(t) for t in tags) + "]"


@dataclass(frozen=True, eq=False)
class SFMWeights:
    """Per-input interpolation kernels, the 1x1 merge and the 3x3 refinement."""

    interp: tuple
    merge: ConvWeights
    refine: ConvWeights

    @classmethod
    def random(cls, rng: np.random.Generator, in_channels: Sequence[int], mid_channels,
               out_channels):
        interp = tuple(rng.uniform(-INIT_BOUND, INIT_BOUND, size=(c, 2, 2)) for c in in_channels)
        merge = ConvWeights.random(rng, int(sum(in_channels)), mid_channels, 1)
        refine = ConvWeights.random(rng, mid_channels, out_channels, 3)
        return cls(interp, merge, refine)


def sfm_fuse(inputs: Sequence[FeatureTensor], target_scale, weights: SFMWeights) -> FeatureTensor:
    """Bring each input to ``target_scale``, concatenate, 1x1 merge, 3x3 refine."""
    inputs = list(inputs)
    if not 1 <= len(inputs) <= 3:
        raise ValueError(f"sfm_fuse takes 1 to 3 inputs, got {len(inputs)}")
    if len(weights.interp) != len(inputs):
        raise ValueError("one interpolation kernel is needed per input")
    target = _tag(target_scale)
    legal = sfm_targets([t.scale_tag for t in inputs])
    if target not in legal:
        raise ShapeError(
            f"target scale {target} unreachable from inputs "
            f"{_format_tags(t.scale_tag for t in inputs)}; legal targets: {_format_tags(legal)}")
    mapped = []
    for t, kernel in zip(inputs, weights.interp):
        if t.scale_tag == target:
            mapped.append(t)
        elif t.scale_tag * DOWN_RATIO == target:
            mapped.append(interpolation_down(t, kernel))
        else:
            mapped.append(interpolation_up(t, kernel))
    dims = {(m.width, m.height) for m in mapped}
    if len(dims) != 1:
        raise ShapeError(f"inputs land on different grids at scale {target}: {sorted(dims)}")
    stacked = np.concatenate([m.data for m in mapped], axis=0)
    merged = conv2d(stacked, weights.merge)
    return FeatureTensor(conv2d(merged, weights.refine, padding=1), target)


def ifm_block(layers: Sequence[FeatureTensor], weights: ConvWeights) -> FeatureTensor:
    """Concatenate all layers of a block (in block order) and apply one 1x1 conv."""
    layers = list(layers)
    if not layers:
        raise ValueError("ifm_block needs at least one layer")
    dims = {(t.width, t.height) for t in layers}
    if len(dims) != 1:
        raise ShapeError(f"ifm_block layers must share spatial dims, got {sorted(dims)}")
    if weights.kernel != 1:
        raise ShapeError(f"ifm_block uses a 1x1 convolution, got kernel {weights.kernel}")
    stacked = np.concatenate([t.data for t in layers], axis=0)
    return FeatureTensor(conv2d(stacked, weights), layers[0].scale_tag)


@dataclass(frozen=True, eq=False)
class SplitWeights:
    """Heavy path: two 3x3 convs. Light path: 1x1 then 3x3."""

    heavy: tuple
    light: tuple

    @classmethod
    def random(cls, rng: np.random.Generator, channels, heavy_out, light_out):
        half = channels // 2
        heavy = (ConvWeights.random(rng, half, heavy_out, 3),
                 ConvWeights.random(rng, heavy_out, heavy_out, 3))
        light = (ConvWeights.random(rng, half, light_out, 1),
                 ConvWeights.random(rng, light_out, light_out, 3))
        return cls(heavy, light)

    @property
    def n_params(self) -> int:
        return sum(c.n_params for c in self.heavy + self.light)


def _run_path(data, convs):
    for conv in convs:
        data = conv2d(data, conv, padding=conv.kernel // 2)
    return data


def scb_split_block(t: FeatureTensor, weights: SplitWeights) -> FeatureTensor:
    """First half of the channels takes the heavy path, second half the light one."""
    if t.channels % 2:
        raise ShapeError(f"scb_split_block needs an even channel count, got {t.channels}")
    half = t.channels // 2
    heavy = _run_path(t.data[:half], weights.heavy)
    light = _run_path(t.data[half:], weights.light)
    return FeatureTensor(np.concatenate([heavy, light], axis=0), t.scale_tag)


# ---------------------------------------------------------------- graph analysis


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    in_channels: int = 1
    out_channels: int = 1
    padding: int | None = None
    name: str = ""
    inputs: tuple = ()
    tap: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        check_int(self.kernel, "kernel", min_val=1)
        check_int(self.stride, "stride", min_val=1)
        check_int(self.in_channels, "in_channels", min_val=1)
        check_int(self.out_channels, "out_channels", min_val=1)
        if self.padding is not None:
            check_int(self.padding, "padding", min_val=0)

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class LayerCount:
    name: str
    kind: str
    channels: int
    width: int
    height: int
    scale_tag: Fraction
    params: int
    macs: int


@dataclass(frozen=True)
class GraphCount:
    layers: tuple
    params: int
    macs: int

    def scale_tags(self) -> dict:
        return {layer.name: layer.scale_tag for layer in self.layers}


def _layer_name(entry: LayerSpec, index: int) -> str:
    return entry.name or f"layer{index}"


def analyze_graph(graph: Sequence[LayerSpec], input_dims) -> GraphCount:
    """Propagate shapes through ``graph`` and count parameters and MACs.

    A layer reads the previous layer unless ``inputs`` names earlier layers
    (``input`` is the graph input). Conv: ``k^2 C_in C_out + C_out`` params
    and ``k^2 C_in C_out W_out H_out`` MACs. Interpolation kernels are per
    channel: ``4C`` params and ``4C W_out H_out`` MACs. Pool, upsample,
    split and concat are free.
    """
    c0, w0, h0 = (check_int(v, "input dimension", min_val=1) for v in input_dims)
    shapes = {"input": (c0, w0, h0, Fraction(1))}
    previous = "input"
    rows = []
    for index, entry in enumerate(graph):
        name = _layer_name(entry, index)
        where = f"layer {index} ({name}, {entry.kind})"
        if name in shapes:
            raise ShapeError(f"{where}: duplicate layer name")
        sources = entry.inputs or (previous,)
        for src in sources:
            if src not in shapes:
                raise ShapeError(f"{where}: unknown input {src!r}")
        ins = [shapes[s] for s in sources]
        params = macs = 0
        if entry.kind == "concat":
            if len({(w, h) for _, w, h, _ in ins}) != 1:
                raise ShapeError(f"{where}: inputs have different spatial dims")
            c = sum(v[0] for v in ins)
            if c != entry.in_channels or c != entry.out_channels:
                raise ShapeError(f"{where}: concatenated channels {c} do not match "
                                 f"in/out {entry.in_channels}/{entry.out_channels}")
            _, w, h, tag = ins[0]
        else:
            if len(ins) != 1:
                raise ShapeError(f"{where}: takes exactly one input")
            c, w, h, tag = ins[0]
            if c != entry.in_channels:
                raise ShapeError(f"{where}: expects {entry.in_channels} channels, got {c}")
            k, s = entry.kernel, entry.stride
            if entry.kind == "conv":
                w = (w + 2 * entry.pad - k) // s + 1
                h = (h + 2 * entry.pad - k) // s + 1
                if w < 1 or h < 1:
                    raise ShapeError(f"{where}: output would be empty")
                c = entry.out_channels
                params = k * k * entry.in_channels * c + c
                macs = k * k * entry.in_channels * c * w * h
                tag = tag / s
            elif entry.kind == "pool":
                w, h = (w - k) // s + 1, (h - k) // s + 1
                if w < 1 or h < 1:
                    raise ShapeError(f"{where}: output would be empty")
                tag = tag / s
            elif entry.kind == "upsample":
                w, h, tag = w * s, h * s, tag * s
            elif entry.kind == "split":
                if entry.out_channels > c:
                    raise ShapeError(f"{where}: cannot take {entry.out_channels} of {c} channels")
                c = entry.out_channels
            else:
                div = 4 if entry.kind == "interp_down" else 2
                if w % div or h % div:
                    raise ShapeError(f"{where}: width and height must be divisible by {div}, "
                                     f"got {w}x{h}")
                w, h = 3 * w // div, 3 * h // div
                tag = tag * (DOWN_RATIO if entry.kind == "interp_down" else UP_RATIO)
                params = 4 * c
                macs = 4 * c * w * h
            if entry.kind != "conv" and entry.kind != "split" and c != entry.out_channels:
                raise ShapeError(f"{where}: {entry.kind} keeps {c} channels, "
                                 f"config says {entry.out_channels}")
        shapes[name] = (c, w, h, tag)
        rows.append(LayerCount(name, entry.kind, c, w, h, tag, params, macs))
        previous = name
    return GraphCount(tuple(rows), sum(r.params for r in rows), sum(r.macs for r in rows))


def count_params_macs(graph: Sequence[LayerSpec], input_dims) -> tuple[int, int]:
    result = analyze_graph(graph, input_dims)
    return result.params, result.macs


def tapped_scales(graph: Sequence[LayerSpec], input_dims) -> set:
    """Scale tags of the layers marked ``tap`` (the maps sent to the decoder)."""
    result = analyze_graph(graph, input_dims)
    return {row.scale_tag for row, entry in zip(result.layers, graph) if entry.tap}


def ladder_scales(levels) -> list[Fraction]:
    """Every scale reachable from the pooling ladder ``1/2 ... 1/2^levels``.

    Pooling levels plus every target :func:`sfm_targets` allows for a pair
    of adjacent levels; enumerated exhaustively.
    """
    levels = check_int(levels, "levels", min_val=1)
    ladder = [Fraction(1, 2 ** i) for i in range(1, levels + 1)]
    found = set(ladder)
    for fine, coarse in zip(ladder, ladder[1:]):
        found.update(sfm_targets([fine, coarse]))
    return sorted(found, reverse=True)


_KEYVAL = re.compile(r"^(\w+)=(.*)$")


def parse_graph_config(text: str) -> list[LayerSpec]:
    """One layer per line: ``name kind kernel stride in out [key=value ...]``.

    Keys: ``inputs`` (comma-separated layer names), ``pad`` and ``tap``
    (0/1). ``#`` starts a comment.
    """
    graph = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 6:
            raise ValueError(f"line {lineno}: expected 'name kind kernel stride in out', "
                             f"got {raw!r}")
        name, kind = parts[0], parts[1]
        try:
            kernel, stride, cin, cout = (int(v) for v in parts[2:6])
        except ValueError:
            raise ValueError(f"line {lineno}: kernel, stride and channels must be integers") \
                from None
        extra = {}
        for item in parts[6:]:
            match = _KEYVAL.match(item)
            if not match:
                raise ValueError(f"line {lineno}: bad option {item!r}")
            extra[match.group(1)] = match.group(2)
        unknown = set(extra) - {"inputs", "pad", "tap"}
        if unknown:
            raise ValueError(f"line {lineno}: unknown options {sorted(unknown)}")
        inputs = tuple(v for v in extra.get("inputs", "").split(",") if v)
        pad = int(extra["pad"]) if "pad" in extra else None
        graph.append(LayerSpec(kind, kernel, stride, cin, cout, pad, name, inputs,
                               extra.get("tap", "0") == "1"))
    return graph


def read_graph_config(path) -> list[LayerSpec]:
    return parse_graph_config(Path(path).read_text())


def default_graph_path() -> Path:
    return Path(__file__).with_name("data") / "sacc_net.cfg"
