"""Exact integer shape calculus for the conv-pool-conv-pool stack.

Feature-map sizes follow the classic output-size rule

    out = floor((in - kernel + 2 * padding) / stride) + 1

applied per axis with zero effective padding throughout (the encoding has no
padding variable) and pooling stride equal to pooling size (non-overlapping
windows).  Everything here is integer arithmetic; no floats are involved.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:  # pragma: no cover - import cycle guard for type checkers
    from .space import HyperparamVector

__all__ = [
    "Aspect",
    "ImageShape",
    "InfeasibleShape",
    "ShapeTrace",
    "classify_aspect",
    "layer_output_size",
    "parameter_count",
    "propagate_shapes",
]

LAYER_NAMES = ("conv1", "pool1", "conv2", "pool2")


class InfeasibleShape(Exception):
    """A layer would produce a feature map smaller than 1x1."""

    def __init__(self, layer: str, axis: str, size: int):
        self.layer = layer
        self.axis = axis
        self.size = size
        super().__init__(f"{layer} output {axis}-size is {size} (< 1)")


@dataclass(frozen=True)
class ImageShape:
    """Width x height x channels of an image or feature map, all >= 1."""

    width_x: int
    height_y: int
    channels: int

    def __post_init__(self) -> None:
        for name in ("width_x", "height_y", "channels"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def pixels(self) -> int:
        return self.width_x * self.height_y * self.channels

    def __str__(self) -> str:
        return f"{self.width_x}x{self.height_y}x{self.channels}"

    @classmethod
    def parse(cls, text: str) -> "ImageShape":
        """Parse the CLI form ``WxHxC``, e.g. ``28x28x1``."""
        parts = text.lower().split("x")
        if len(parts) != 3:
            raise ValueError(f"expected WxHxC, got {text!r}")
        w, h, c = (int(p) for p in parts)
        return cls(w, h, c)


class Aspect(enum.Enum):
    """Shape class of a feature map: wider (x>y), taller (x<y) or square."""

    WIDER = "wider"
    TALLER = "taller"
    SQUARE = "square"


def classify_aspect(s: ImageShape) -> Aspect:
    if s.width_x > s.height_y:
        return Aspect.WIDER
    if s.width_x < s.height_y:
        return Aspect.TALLER
    return Aspect.SQUARE


@dataclass(frozen=True)
class ShapeTrace:
    """Per-layer feature-map shapes plus flatten size and parameter count."""

    input: ImageShape
    o1: ImageShape  # after conv1
    o2: ImageShape  # after pool1
    o3: ImageShape  # after conv2
    o4: ImageShape  # after pool2
    flatten: int
    param_count: int

    def layers(self) -> tuple[ImageShape, ImageShape, ImageShape, ImageShape, ImageShape]:
        """Shapes in network order: input, conv1, pool1, conv2, pool2."""
        return (self.input, self.o1, self.o2, self.o3, self.o4)


def layer_output_size(i: int, k: int, p: int, s: int) -> int:
    """Output size of one axis after a conv or pool window.

    Pure arithmetic: the result may be <= 0 for infeasible inputs, and the
    caller is responsible for checking it.
    """
    if k < 1 or s < 1:
        raise ValueError(f"kernel and stride must be >= 1, got k={k}, s={s}")
    if p < 0:
        raise ValueError(f"padding must be >= 0, got p={p}")
    return (i - k + 2 * p) // s + 1


def _checked_size(i: int, k: int, s: int, layer: str, axis: str) -> int:
    size = layer_output_size(i, k, 0, s)
    if size < 1:
        raise InfeasibleShape(layer, axis, size)
    return size


def propagate_shapes(v: "HyperparamVector", input: ImageShape) -> ShapeTrace:
    """Trace feature-map shapes through conv1 -> pool1 -> conv2 -> pool2.

    Conv layers use the encoded strides; pooling strides equal the pooling
    sizes.  Raises :class:`InfeasibleShape` naming the first layer/axis whose
    output would drop below 1.
    """
    o1 = ImageShape(
        _checked_size(input.width_x, v.conv1_kernel_x, v.conv1_stride_x, "conv1", "x"),
        _checked_size(input.height_y, v.conv1_kernel_y, v.conv1_stride_y, "conv1", "y"),
        v.conv1_kernels,
    )
    o2 = ImageShape(
        _checked_size(o1.width_x, v.pool1_x, v.pool1_x, "pool1", "x"),
        _checked_size(o1.height_y, v.pool1_y, v.pool1_y, "pool1", "y"),
        v.conv1_kernels,
    )
    o3 = ImageShape(
        _checked_size(o2.width_x, v.conv2_kernel_x, v.conv2_stride_x, "conv2", "x"),
        _checked_size(o2.height_y, v.conv2_kernel_y, v.conv2_stride_y, "conv2", "y"),
        v.conv2_kernels,
    )
    o4 = ImageShape(
        _checked_size(o3.width_x, v.pool2_x, v.pool2_x, "pool2", "x"),
        _checked_size(o3.height_y, v.pool2_y, v.pool2_y, "pool2", "y"),
        v.conv2_kernels,
    )
    flatten = o4.pixels
    params = _count_parameters(v, input, o2, flatten, num_classes=10)
    return ShapeTrace(input, o1, o2, o3, o4, flatten, params)


def _count_parameters(
    v: "HyperparamVector",
    input: ImageShape,
    o2: ImageShape,
    flatten: int,
    num_classes: int,
) -> int:
    conv1 = v.conv1_kernels * (v.conv1_kernel_x * v.conv1_kernel_y * input.channels + 1)
    conv2 = v.conv2_kernels * (v.conv2_kernel_x * v.conv2_kernel_y * o2.channels + 1)
    dense = flatten * v.dense_units + v.dense_units
    output = v.dense_units * num_classes + num_classes
    return conv1 + conv2 + dense + output


def parameter_count(v: "HyperparamVector", input: ImageShape, num_classes: int = 10) -> int:
    """Total trainable weights and biases of the encoded network.

    Pooling layers contribute nothing; the batch-size variable never enters.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    trace = propagate_shapes(v, input)
    if num_classes == 10:
        return trace.param_count
    return _count_parameters(v, input, trace.o2, trace.flatten, num_classes)
