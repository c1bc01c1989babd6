"""Layer descriptions and the stride / receptive-field calculator."""

from __future__ import annotations

from dataclasses import dataclass, field

from .engine import conv_output_size, pool_output_size

KINDS = ("conv", "maxpool", "relu", "upsample_bilinear", "add", "softmax2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad geometry for layer {self.name or self.kind}: "
                             f"kernel={self.kernel} stride={self.stride} padding={self.padding}")
        if self.kind == "conv" and (self.in_channels < 1 or self.out_channels < 1):
            raise ValueError(f"conv layer {self.name!r} needs positive in/out channels")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def conv(name: str, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None) -> LayerSpec:
    pad = kernel // 2 if padding is None else padding
    return LayerSpec("conv", kernel, stride, pad, cin, cout, name)


def relu(name: str) -> LayerSpec:
    return LayerSpec("relu", name=name)


def maxpool(name: str, kernel: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", kernel, stride, 0, name=name)


@dataclass(frozen=True)
class LayerGeometry:
    name: str
    kind: str
    stride: int
    receptive_field: int
    size: tuple[int, int]


@dataclass
class GeometryReport:
    input_size: tuple[int, int]
    layers: list[LayerGeometry] = field(default_factory=list)

    def __getitem__(self, name: str) -> LayerGeometry:
        for g in self.layers:
            if g.name == name:
                return g
        raise KeyError(name)

    def table(self) -> str:
        lines = [f"{'layer':<12} {'stride':>6} {'rf':>5}  size"]
        for g in self.layers:
            lines.append(f"{g.name:<12} {g.stride:>6} {g.receptive_field:>5}  {g.size[0]}x{g.size[1]}")
        return "\n".join(lines)


def geometry_report(layers: list[LayerSpec], input_size: tuple[int, int]) -> GeometryReport:
    """Cumulative stride, receptive field and output size after every layer of a chain.

    ``rf_L = rf_{L-1} + (k_L - 1) * stride_{L-1}``, ``stride_L = stride_{L-1} * s_L``.
    Pooling sizes follow the ceil-mode rule used by ``engine.maxpool2d``.
    """
    h, w = input_size
    stride, rf = 1, 1
    report = GeometryReport((h, w))
    for i, layer in enumerate(layers):
        if layer.kind == "conv":
            rf += (layer.kernel - 1) * stride
            h = conv_output_size(h, layer.kernel, layer.stride, layer.padding)
            w = conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            stride *= layer.stride
        elif layer.kind == "maxpool":
            rf += (layer.kernel - 1) * stride
            h = pool_output_size(h, layer.kernel, layer.stride, layer.padding)
            w = pool_output_size(w, layer.kernel, layer.stride, layer.padding)
            stride *= layer.stride
        elif layer.kind == "upsample_bilinear":
            if stride % layer.stride:
                raise ValueError(f"upsampling by {layer.stride} leaves a fractional stride at {layer.name}")
            stride //= layer.stride
            h, w = h * layer.stride, w * layer.stride
        if h < 1 or w < 1:
            raise ValueError(f"layer {layer.name or i} produces an empty map for input {input_size}")
        report.layers.append(LayerGeometry(layer.name or f"{layer.kind}{i}", layer.kind, stride, rf, (h, w)))
    return report
