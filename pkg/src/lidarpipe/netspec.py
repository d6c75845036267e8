"""Declarative shape/stride checker for the feature-extractor and RPN
architectures.

Nothing here executes a convolution: graphs carry strides and channel
counts, and propagation verifies the advertised downsample factors of the
B1/B2/B3 backbone combinations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

SUBM_CONV3D = "subm_conv3d"
SPARSE_CONV3D = "sparse_conv3d"
CONV2D = "conv2d"
TCONV2D = "transposed_conv2d"
CONCAT = "concat"
BIFPN = "bifpn_block"

LAYER_KINDS = (SUBM_CONV3D, SPARSE_CONV3D, CONV2D, TCONV2D, CONCAT, BIFPN)


class ShapeError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """stride > 1 downsamples, stride < 1 upsamples (stored as a Fraction)."""

    name: str
    kind: str
    stride: Fraction = Fraction(1)
    out_channels: int = 0  # 0: inherit input channels (Concat sums, BiFPN keeps)
    repeat: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.stride <= 0:
            raise ShapeError(f"{self.name}: stride must be positive")
        if self.out_channels < 0 or self.repeat < 1:
            raise ShapeError(f"{self.name}: bad channels/repeat")


@dataclass(frozen=True)
class NetGraph:
    layers: tuple  # LayerSpec in insertion order
    edges: tuple  # (src_name, dst_name)
    input: str
    output: str

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ShapeError("duplicate layer names")
        known = set(names)
        for a, b in self.edges:
            if a not in known or b not in known:
                raise ShapeError(f"edge references unknown node ({a}, {b})")

    def predecessors(self, name: str) -> list:
        return [a for a, b in self.edges if b == name]


def propagate(graph: NetGraph, input_stride: int = 1, input_channels: int = 1) -> dict:
    """Topologically propagate (stride, channels) through the graph.

    Concat requires all inputs at one stride and sums channels; BiFPN blocks
    preserve both unless out_channels overrides.
    """
    by_name = {l.name: l for l in graph.layers}
    resolved: dict = {}
    pending = [l.name for l in graph.layers]
    progress = True
    while pending and progress:
        progress = False
        for name in list(pending):
            preds = graph.predecessors(name)
            if name == graph.input and not preds:
                ins = [(Fraction(input_stride), input_channels)]
            elif all(p in resolved for p in preds) and preds:
                ins = [resolved[p] for p in preds]
            else:
                continue
            layer = by_name[name]
            if layer.kind == CONCAT:
                strides = {s for s, _ in ins}
                if len(strides) > 1:
                    raise ShapeError(
                        f"concat {name!r} joins mismatched strides from "
                        f"{preds}: {sorted(str(s) for s in strides)}"
                    )
                stride = next(iter(strides))
                channels = sum(c for _, c in ins)
            else:
                if len(ins) != 1:
                    raise ShapeError(f"{name!r}: non-concat node with {len(ins)} inputs")
                stride, channels = ins[0]
                stride = stride * layer.stride**layer.repeat
                if layer.out_channels:
                    channels = layer.out_channels
            resolved[name] = (stride, channels)
            pending.remove(name)
            progress = True
    if pending:
        raise ShapeError(f"graph has unreachable or cyclic nodes: {pending}")
    return resolved


def output_stride(graph: NetGraph) -> Fraction:
    return propagate(graph)[graph.output][0]


# ---- built-in architectures -------------------------------------------------

def _chain(layers, edges, prev, spec):
    layers.append(spec)
    if prev is not None:
        edges.append((prev, spec.name))
    return spec.name


def fe_v1() -> NetGraph:
    """Four sparse-conv phases; three of them downsample. Output stride 4."""
    layers, edges = [], []
    prev = None
    phases = [(16, 1), (32, 2), (64, 2), (64, 1)]
    for i, (ch, ds) in enumerate(phases):
        prev = _chain(
            layers, edges, prev,
            LayerSpec(f"phase{i}_subm", SUBM_CONV3D, Fraction(1), ch, repeat=2),
        )
        prev = _chain(
            layers, edges, prev,
            LayerSpec(f"phase{i}_down", SPARSE_CONV3D, Fraction(ds), ch),
        )
    return NetGraph(tuple(layers), tuple(edges), layers[0].name, prev)


def fe_v2() -> NetGraph:
    """Four sparse 3D blocks, the last three downsampling by 2, then eight
    standard 3x3 convolutions on the BEV reshape. Output stride 8."""
    layers, edges = [], []
    prev = None
    for i, (ch, ds) in enumerate([(16, 1), (32, 2), (64, 2), (128, 2)]):
        prev = _chain(
            layers, edges, prev,
            LayerSpec(f"block{i}_subm", SUBM_CONV3D, Fraction(1), ch, repeat=2),
        )
        if ds > 1:
            prev = _chain(
                layers, edges, prev,
                LayerSpec(f"block{i}_down", SPARSE_CONV3D, Fraction(ds), ch),
            )
    prev = _chain(
        layers, edges, prev,
        LayerSpec("bev_conv", CONV2D, Fraction(1), 128, repeat=8),
    )
    return NetGraph(tuple(layers), tuple(edges), layers[0].name, prev)


def _rpn(first_stride: int, down_channels, up_channels) -> NetGraph:
    """Shared RPN skeleton: cascaded downsample blocks, per-block upsample
    branches back to the first block's stride, concatenated."""
    layers, edges = [], []
    prev = None
    block_names = []
    strides = [first_stride, 2, 2]
    for i, (ds, ch) in enumerate(zip(strides, down_channels)):
        prev = _chain(
            layers, edges, prev,
            LayerSpec(f"down{i}", CONV2D, Fraction(ds), ch, repeat=1),
        )
        block_names.append(prev)
    up_names = []
    cum = Fraction(1)
    for i, (ds, ch) in enumerate(zip(strides, up_channels)):
        cum *= ds
        up = LayerSpec(f"up{i}", TCONV2D, Fraction(first_stride) / cum, ch)
        layers.append(up)
        edges.append((block_names[i], up.name))
        up_names.append(up.name)
    cat = LayerSpec("concat", CONCAT)
    layers.append(cat)
    for name in up_names:
        edges.append((name, cat.name))
    return NetGraph(tuple(layers), tuple(edges), layers[0].name, cat.name)


def rpn_v1() -> NetGraph:
    """Three downsample blocks (2x each), upsampled by 1/2/4 and concatenated.
    Output stride 2."""
    return _rpn(2, (128, 128, 256), (128, 128, 128))


def rpn_v2() -> NetGraph:
    """RPN-v1 with the first block at stride 1 and channels doubled.
    Output stride 1."""
    return _rpn(1, (256, 256, 512), (256, 256, 256))


RPN_V3_CHANNELS = 96
RPN_V3_WIDE_CHANNELS = 192
RPN_V3_BIFPN_REPEATS = 4


def rpn_v3() -> NetGraph:
    """RPN-v1 with the first block at stride 1, filters cut to 3/4
    (128 -> 96, 256 -> 192), and a plain-addition BiFPN with 4 repeats at a
    uniform 96 channels. Output stride 1."""
    base = _rpn(1, (96, 96, RPN_V3_WIDE_CHANNELS), (96, 96, 96))
    layers = list(base.layers)
    edges = list(base.edges)
    # lateral convs bring every downsample block to 96 channels for the BiFPN
    lateral_names = []
    for i in range(3):
        lat = LayerSpec(f"lateral{i}", CONV2D, Fraction(1), RPN_V3_CHANNELS)
        layers.append(lat)
        edges.append((f"down{i}", lat.name))
        lateral_names.append(lat.name)
    prev = lateral_names[0]
    for r in range(RPN_V3_BIFPN_REPEATS):
        blk = LayerSpec(f"bifpn{r}", BIFPN, Fraction(1), RPN_V3_CHANNELS)
        layers.append(blk)
        edges.append((prev, blk.name))
        prev = blk.name
    out = LayerSpec("head_out", CONV2D, Fraction(1), RPN_V3_CHANNELS)
    layers.append(out)
    edges.append((prev, out.name))
    return NetGraph(tuple(layers), tuple(edges), base.input, out.name)


BACKBONES = {
    "B1": (fe_v1, rpn_v1),
    "B2": (fe_v2, rpn_v2),
    "B3": (fe_v1, rpn_v3),
}


def check_backbone(name: str) -> int:
    """Overall downsample factor: FE stride x RPN stride."""
    if name not in BACKBONES:
        raise ShapeError(f"unknown backbone {name!r}, expected one of {sorted(BACKBONES)}")
    fe, rpn = BACKBONES[name]
    total = output_stride(fe()) * output_stride(rpn())
    if total.denominator != 1:
        raise ShapeError(f"{name}: non-integer overall stride {total}")
    return int(total)


def rpn_v3_channels() -> dict:
    """Filter-count report for RPN-v3: the 3/4 reduction and the uniform
    96-channel BiFPN stack."""
    resolved = propagate(rpn_v3())
    bifpn = [
        resolved[f"bifpn{r}"][1] for r in range(RPN_V3_BIFPN_REPEATS)
    ]
    return {
        "reduced_filters": RPN_V3_CHANNELS,
        "reduced_wide_filters": RPN_V3_WIDE_CHANNELS,
        "bifpn_repeats": RPN_V3_BIFPN_REPEATS,
        "bifpn_channels": bifpn,
    }


def backbone_report(name: str) -> dict:
    """Per-stage stride/channel table used by the CLI check command."""
    fe, rpn = BACKBONES[name]
    fe_graph, rpn_graph = fe(), rpn()
    fe_map = propagate(fe_graph)
    rpn_map = propagate(rpn_graph, input_stride=1)
    fe_stride = fe_map[fe_graph.output][0]
    return {
        "backbone": name,
        "fe": {l.name: (str(fe_map[l.name][0]), fe_map[l.name][1]) for l in fe_graph.layers},
        "rpn": {l.name: (str(rpn_map[l.name][0]), rpn_map[l.name][1]) for l in rpn_graph.layers},
        "fe_stride": int(fe_stride),
        "rpn_stride": str(rpn_map[rpn_graph.output][0]),
        "overall": check_backbone(name),
    }
