"""Declarative model descriptions and the reconstruction / VGG builders.

A :class:`ModelSpec` is an ordered list of :class:`LayerSpec` entries whose
input channel counts are inferred from the shape chain. The same spec drives
both the numerics (:func:`build_network`) and the cost report
(:func:`volt3d.cost.model_cost`).

Text format, one layer per line::

    flavor=dw
    name=rec6
    input=2048
    fc out=1024 section=encoder
    relu
    reshape shape=1024,1,1,1
    convtranspose out=256 k=4 stride=1
    bn
    relu
    block units=2 residual=0
    ...
    conv1x1 out=1

Blank lines and ``#`` comments are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .ops import conv_out_extent, convtranspose_out_extent
from .tensor import FLOAT32, child_seed

LAYER_KINDS = ("fc", "relu", "bn", "reshape", "flatten", "maxpool", "convtranspose",
               "conv", "block", "conv1x1")

REC_WIDTHS = (256, 128, 64, 32)

VGG_CONFIGS = {
    13: [[64, 64], [128, 128], [256, 256], [512, 512], [512, 512]],
    16: [[64, 64], [128, 128], [256, 256, 256], [512, 512, 512], [512, 512, 512]],
    19: [[64, 64], [128, 128], [256, 256, 256, 256], [512, 512, 512, 512], [512, 512, 512, 512]],
}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int | None = None
    k: int = 3
    stride: int = 1
    units: int = 2
    residual: bool = False
    bias: bool = False
    shape: tuple = ()
    section: str = "body"
    # filled in by infer_shapes: per-sample shapes without the batch axis
    in_shape: tuple = ()
    out_shape: tuple = ()

    def to_text(self) -> str:
        parts = [self.kind]
        if self.kind == "fc":
            parts += [f"out={self.out}", f"bias={int(self.bias)}"]
        elif self.kind == "reshape":
            parts.append("shape=" + ",".join(str(s) for s in self.shape))
        elif self.kind == "maxpool":
            parts.append(f"k={self.k}")
        elif self.kind == "convtranspose":
            parts += [f"out={self.out}", f"k={self.k}", f"stride={self.stride}"]
        elif self.kind == "conv":
            parts += [f"out={self.out}", f"k={self.k}"]
        elif self.kind == "block":
            parts += [f"units={self.units}", f"residual={int(self.residual)}", f"k={self.k}"]
        elif self.kind == "conv1x1":
            parts += [f"out={self.out}", f"bias={int(self.bias)}"]
        if self.section != _default_section(self.kind):
            parts.append(f"section={self.section}")
        return " ".join(parts)


def _default_section(kind: str) -> str:
    return "conv" if kind in ("conv", "block") else "body"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    flavor: str
    input_shape: tuple
    layers: tuple = field(default_factory=tuple)

    @property
    def output_shape(self) -> tuple:
        return self.layers[-1].out_shape if self.layers else self.input_shape

    def to_text(self) -> str:
        head = [f"name={self.name}", f"flavor={self.flavor}",
                "input=" + ",".join(str(s) for s in self.input_shape)]
        return "\n".join(head + [layer.to_text() for layer in self.layers]) + "\n"


# ------------------------------------------------------------------- parsing

_INT_KEYS = {"out", "k", "stride", "units"}
_BOOL_KEYS = {"residual", "bias"}


def layer(kind: str, **kw) -> LayerSpec:
    if kind not in LAYER_KINDS:
        raise SpecError(f"unknown layer type {kind!r}")
    kw.setdefault("section", _default_section(kind))
    return LayerSpec(kind, **kw)


def parse_model_text(text: str) -> ModelSpec:
    header: dict[str, str] = {}
    specs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if "=" in tokens[0] and len(tokens) == 1 and not specs:
            key, _, value = tokens[0].partition("=")
            header[key] = value
            continue
        kind, kw = tokens[0], {}
        for tok in tokens[1:]:
            key, eq, value = tok.partition("=")
            if not eq:
                raise SpecError(f"line {lineno}: expected key=value, got {tok!r}")
            try:
                if key in _INT_KEYS:
                    kw[key] = int(value)
                elif key in _BOOL_KEYS:
                    kw[key] = value.lower() in ("1", "true", "yes")
                elif key == "shape":
                    kw[key] = tuple(int(v) for v in value.split(","))
                elif key == "section":
                    kw[key] = value
                else:
                    raise SpecError(f"line {lineno}: unknown argument {key!r}")
            except ValueError as exc:
                if isinstance(exc, SpecError):
                    raise
                raise SpecError(f"line {lineno}: bad value for {key}: {value!r}") from None
        try:
            specs.append(layer(kind, **kw))
        except SpecError as exc:
            raise SpecError(f"line {lineno}: {exc}") from None
    if "input" not in header:
        raise SpecError("model description needs an input= header")
    flavor = L.canonical_flavor(header.get("flavor", "standard"))
    input_shape = tuple(int(v) for v in header["input"].split(","))
    return infer_shapes(ModelSpec(header.get("name", "model"), flavor, input_shape, tuple(specs)))


# ------------------------------------------------------------- shape inference

def infer_shapes(spec: ModelSpec) -> ModelSpec:
    """Resolve every layer's input/output shape, rejecting broken chains."""
    shape = tuple(spec.input_shape)
    resolved = []
    for i, ls in enumerate(spec.layers):
        try:
            out = _out_shape(ls, shape)
        except (ValueError, SpecError) as exc:
            raise SpecError(f"layer {i} ({ls.kind}): {exc}") from None
        resolved.append(replace(ls, in_shape=shape, out_shape=out))
        shape = out
    return replace(spec, layers=tuple(resolved))


def _need_rank(shape, rank, kind):
    if len(shape) != rank:
        raise SpecError(f"{kind} expects a rank-{rank} input, got shape {shape}")


def _out_shape(ls: LayerSpec, shape: tuple) -> tuple:
    kind = ls.kind
    if kind == "fc":
        _need_rank(shape, 1, kind)
        return (ls.out,)
    if kind in ("relu", "bn"):
        return shape
    if kind == "reshape":
        if int(np.prod(ls.shape)) != int(np.prod(shape)):
            raise SpecError(f"cannot reshape {shape} to {ls.shape}")
        return tuple(ls.shape)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    _need_rank(shape, 4, kind)
    c, *sp = shape
    if kind == "maxpool":
        return (c,) + tuple(conv_out_extent(s, ls.k, ls.k) for s in sp)
    if kind == "convtranspose":
        return (ls.out,) + tuple(convtranspose_out_extent(s, ls.k, ls.stride) for s in sp)
    if kind == "conv":
        return (ls.out,) + tuple(conv_out_extent(s, ls.k, 1, ls.k // 2) for s in sp)
    if kind == "block":
        return shape
    if kind == "conv1x1":
        return (ls.out,) + tuple(sp)
    raise SpecError(f"unknown layer type {kind!r}")


# ------------------------------------------------------------------ builders

def build_rec_decoder(depth: int = 6, residual: bool = False, flavor: str = "standard", *,
                      latent_dim: int = 2048, fc_dim: int = 1024,
                      widths: tuple = REC_WIDTHS) -> ModelSpec:
    """Rec-6 / ResRec-6 / Rec-16 / ResRec-16 decoders, including the 2048->1024 fc."""
    if depth not in (6, 16):
        raise SpecError(f"decoder depth must be 6 or 16, got {depth}")
    flavor = L.canonical_flavor(flavor)
    repeat = 1 if depth == 6 else 2
    stages = 3 if depth == 6 else 4
    ls = [
        layer("fc", out=fc_dim, bias=True, section="encoder"),
        layer("relu", section="encoder"),
        layer("reshape", shape=(fc_dim, 1, 1, 1)),
        layer("convtranspose", out=widths[0], k=4, stride=1),
        layer("bn"),
        layer("relu"),
    ]
    for stage, width in enumerate(widths):
        if stage > 0:
            ls += [layer("convtranspose", out=width, k=2, stride=2), layer("bn"), layer("relu")]
        if stage < stages:
            ls += [layer("block", units=2, residual=residual) for _ in range(repeat)]
    ls.append(layer("conv1x1", out=1, bias=False))
    name = f"{'resrec' if residual else 'rec'}{depth}"
    return infer_shapes(ModelSpec(name, flavor, (latent_dim,), tuple(ls)))


def build_vgg3d(variant: int = 13, flavor: str = "standard", *, resolution: int = 64,
                classes: int = 13, in_channels: int = 1, width: float = 1.0,
                hidden: tuple = (4096, 4096)) -> ModelSpec:
    """VGG-B/D/E conv stacks lifted to 3D.

    Every conv is a 3x3x3 same-padded unit of the chosen flavor followed by BN
    and ReLU. A 2x2x2 max pool closes each stage while the spatial extent is at
    least 2, so small inputs simply skip the late pools. ``width`` scales every
    channel count; ``hidden`` sets the two hidden fully connected widths.
    """
    if variant not in VGG_CONFIGS:
        raise SpecError(f"VGG variant must be one of {sorted(VGG_CONFIGS)}, got {variant}")
    if resolution < 1:
        raise SpecError("resolution must be positive")
    flavor = L.canonical_flavor(flavor)
    ls = []
    extent = resolution
    for stage in VGG_CONFIGS[variant]:
        for c in stage:
            ls.append(layer("conv", out=max(1, int(round(c * width))), k=3))
        if extent >= 2:
            ls.append(layer("maxpool", k=2))
            extent //= 2
    ls.append(layer("flatten"))
    for h in hidden:
        ls += [layer("fc", out=h, bias=True), layer("relu")]
    ls.append(layer("fc", out=classes, bias=True))
    spec = ModelSpec(f"vgg{variant}", flavor, (in_channels, resolution, resolution, resolution), tuple(ls))
    return infer_shapes(spec)


ARCHS = ("rec6", "resrec6", "rec16", "resrec16", "vgg13", "vgg16", "vgg19")


def build_arch(arch: str, flavor: str = "standard", **kw) -> ModelSpec:
    arch = arch.lower()
    if arch in ("rec6", "resrec6", "rec16", "resrec16"):
        depth = 16 if arch.endswith("16") else 6
        return build_rec_decoder(depth, arch.startswith("res"), flavor, **kw)
    if arch in ("vgg13", "vgg16", "vgg19"):
        return build_vgg3d(int(arch[3:]), flavor, **kw)
    raise SpecError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


def with_flavor(spec: ModelSpec, flavor: str) -> ModelSpec:
    return replace(spec, flavor=L.canonical_flavor(flavor))


# ------------------------------------------------------------- instantiation

def _instantiate(ls: LayerSpec, flavor: str, seed: int, dtype) -> L.Layer:
    kind = ls.kind
    cin = ls.in_shape[0] if ls.in_shape else None
    if kind == "fc":
        return L.Linear(cin, ls.out, bias=ls.bias, seed=seed, dtype=dtype)
    if kind == "relu":
        return L.ReLU()
    if kind == "bn":
        return L.BatchNorm(cin, dtype=dtype)
    if kind == "reshape":
        return L.Reshape(ls.shape)
    if kind == "flatten":
        return L.Flatten()
    if kind == "maxpool":
        return L.MaxPool3d(ls.k)
    if kind == "convtranspose":
        return L.ConvTranspose3d(cin, ls.out, ls.k, ls.stride, seed=seed, dtype=dtype)
    if kind == "conv":
        return L.conv_unit(flavor, cin, ls.out, ls.k, seed=seed, dtype=dtype)
    if kind == "block":
        return L.ConvBlock(cin, flavor, residual=ls.residual, units=ls.units, k=ls.k,
                           seed=seed, dtype=dtype)
    if kind == "conv1x1":
        if ls.bias:
            return L.PointwiseConv3d(cin, ls.out, bias=True, seed=seed, dtype=dtype)
        return L.Conv3d(cin, ls.out, 1, seed=seed, dtype=dtype)
    raise SpecError(f"unknown layer type {kind!r}")


class Network:
    """A built :class:`ModelSpec`: sequential forward/backward over its layers."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=FLOAT32):
        if spec.layers and not spec.layers[0].in_shape:
            spec = infer_shapes(spec)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        names = [f"{i:02d}_{ls.kind}" for i, ls in enumerate(spec.layers)]
        mods = [_instantiate(ls, spec.flavor, child_seed(seed, i), self.dtype)
                for i, ls in enumerate(spec.layers)]
        self.body = L.Sequential(mods, names)

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        expected = tuple(self.spec.input_shape)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {x.shape[1:]} does not match model input {expected}")
        return self.body.forward(x.astype(self.dtype, copy=False), training)

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.body.backward(grad)

    def parameters(self) -> list[tuple[str, L.Param]]:
        return list(self.body.named_params())

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return list(self.body.named_buffers())

    def zero_grad(self) -> None:
        self.body.zero_grad()

    def num_params(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        """Trainable parameters then buffers, in declaration order."""
        out = {name: p.data for name, p in self.parameters()}
        out.update(self.buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: p.data for name, p in self.parameters()}
        targets.update(self.buffers())
        for name, dst in targets.items():
            if name not in state:
                raise KeyError(f"missing tensor {name!r}")
            src = state[name]
            if src.shape != dst.shape:
                raise ValueError(f"tensor {name!r}: shape {src.shape} != expected {dst.shape}")
            dst[...] = src


def build_network(spec: ModelSpec, seed: int = 0, dtype=FLOAT32) -> Network:
    return Network(spec, seed, dtype)
