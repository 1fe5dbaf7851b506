"""Build the encoded CNN from a 16-integer hyperparameter vector.

The stack is conv -> relu -> maxpool -> conv -> relu -> maxpool -> flatten ->
dense(relu) -> dense(classes).  The softmax classifier lives in the
cross-entropy loss during training and in the argmax at prediction time.
Convolutions use no padding; pooling strides equal the pooling window.

Vector layout (x-axis is image width, y-axis is height): kernel count, kernel
size x/y and stride x/y of conv1, pool1 size x/y, then the same four for the
second conv/pool pair, dense units, batch size.  Torch wants (height, width)
tuples, so every (x, y) pair maps to (y, x) here.
"""

from __future__ import annotations

from torch import nn

__all__ = ["InfeasibleArchitecture", "build_model", "count_parameters", "trace_sizes"]


class InfeasibleArchitecture(ValueError):
    """Some layer of the encoded network would output an empty feature map."""

    def __init__(self, layer: str, axis: str, size: int):
        self.layer = layer
        self.axis = axis
        self.size = size
        super().__init__(f"{layer} output {axis}-size is {size} (< 1)")


def _out(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


def trace_sizes(vector: list[int], height: int, width: int) -> tuple[int, int]:
    """(height, width) after the conv/pool stack; raises if any size drops below 1."""
    x1, kx1, ky1, sx1, sy1, px1, py1, x8, kx2, ky2, sx2, sy2, px2, py2, _, _ = vector
    stages = (
        ("conv1", kx1, ky1, sx1, sy1),
        ("pool1", px1, py1, px1, py1),
        ("conv2", kx2, ky2, sx2, sy2),
        ("pool2", px2, py2, px2, py2),
    )
    h, w = height, width
    for layer, wx, wy, sx, sy in stages:
        w = _out(w, wx, sx)
        if w < 1:
            raise InfeasibleArchitecture(layer, "x", w)
        h = _out(h, wy, sy)
        if h < 1:
            raise InfeasibleArchitecture(layer, "y", h)
    return h, w


def build_model(
    vector: list[int],
    height: int,
    width: int,
    channels: int,
    num_classes: int = 10,
    pooling: str = "max",
) -> nn.Sequential:
    if len(vector) != 16:
        raise ValueError(f"expected 16 hyperparameters, got {len(vector)}")
    if pooling not in ("max", "avg"):
        raise ValueError(f"pooling must be 'max' or 'avg', got {pooling!r}")
    h, w = trace_sizes(vector, height, width)
    x1, kx1, ky1, sx1, sy1, px1, py1, x8, kx2, ky2, sx2, sy2, px2, py2, units, _ = vector
    pool = nn.MaxPool2d if pooling == "max" else nn.AvgPool2d
    flatten = h * w * x8
    return nn.Sequential(
        nn.Conv2d(channels, x1, kernel_size=(ky1, kx1), stride=(sy1, sx1)),
        nn.ReLU(),
        pool(kernel_size=(py1, px1), stride=(py1, px1)),
        nn.Conv2d(x1, x8, kernel_size=(ky2, kx2), stride=(sy2, sx2)),
        nn.ReLU(),
        pool(kernel_size=(py2, px2), stride=(py2, px2)),
        nn.Flatten(),
        nn.Linear(flatten, units),
        nn.ReLU(),
        nn.Linear(units, num_classes),
    )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
