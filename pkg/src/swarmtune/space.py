"""The 16-variable integer encoding and its dynamic per-variable bounds.

Variables are indexed 1..16 in network order: conv1 kernel count, conv1
kernel sizes (x, y), conv1 strides (x, y), pool1 sizes (x, y), conv2 kernel
count, conv2 kernel sizes (x, y), conv2 strides (x, y), pool2 sizes (x, y),
dense units, batch size.  Bounds for pool/kernel/stride variables of deeper
layers depend on the feature-map sizes produced by the earlier variables, so
they are derived left to right; sampling in that order is always feasible by
construction.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .shapes import ImageShape, InfeasibleShape, layer_output_size

__all__ = [
    "KERNEL_COUNT_CHOICES",
    "HyperparamVector",
    "IncompletePrefix",
    "SearchSpace",
    "VariableBounds",
    "Violation",
    "baseline_vector",
    "bounds_for",
    "repair",
    "sample_vector",
    "validate",
]

NUM_VARIABLES = 16

# Kernel counts span half to double the original LeNet kernel counts.
KERNEL_COUNT_CHOICES = (16, 24, 32, 40, 48, 52, 64)

VARIABLE_NAMES = (
    "conv1_kernels",
    "conv1_kernel_x",
    "conv1_kernel_y",
    "conv1_stride_x",
    "conv1_stride_y",
    "pool1_x",
    "pool1_y",
    "conv2_kernels",
    "conv2_kernel_x",
    "conv2_kernel_y",
    "conv2_stride_x",
    "conv2_stride_y",
    "pool2_x",
    "pool2_y",
    "dense_units",
    "batch_size",
)


class IncompletePrefix(ValueError):
    """A bound was requested before its upstream variables were set."""


@dataclass(frozen=True)
class HyperparamVector:
    """One CNN configuration: the 16 integers of the encoding.

    The canonical text form is 16 dash-separated decimal integers, e.g.
    ``32-5-5-1-1-2-2-64-5-5-1-1-2-2-100-10`` (the original LeNet encoding).
    """

    conv1_kernels: int
    conv1_kernel_x: int
    conv1_kernel_y: int
    conv1_stride_x: int
    conv1_stride_y: int
    pool1_x: int
    pool1_y: int
    conv2_kernels: int
    conv2_kernel_x: int
    conv2_kernel_y: int
    conv2_stride_x: int
    conv2_stride_y: int
    pool2_x: int
    pool2_y: int
    dense_units: int
    batch_size: int

    def __post_init__(self) -> None:
        for name in VARIABLE_NAMES:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    def values(self) -> tuple[int, ...]:
        """All 16 values in index order x1..x16."""
        return tuple(getattr(self, name) for name in VARIABLE_NAMES)

    def x(self, index: int) -> int:
        """Value of variable ``index`` (1-based)."""
        if not 1 <= index <= NUM_VARIABLES:
            raise IndexError(f"variable index must be 1..16, got {index}")
        return getattr(self, VARIABLE_NAMES[index - 1])

    @classmethod
    def from_values(cls, values: Iterable[int]) -> "HyperparamVector":
        vals = tuple(values)
        if len(vals) != NUM_VARIABLES:
            raise ValueError(f"expected 16 values, got {len(vals)}")
        return cls(*vals)

    def to_text(self) -> str:
        return "-".join(str(v) for v in self.values())

    @classmethod
    def from_text(cls, text: str) -> "HyperparamVector":
        parts = text.strip().split("-")
        if len(parts) != NUM_VARIABLES:
            raise ValueError(f"expected 16 dash-separated integers, got {text!r}")
        return cls.from_values(int(p) for p in parts)

    def __str__(self) -> str:
        return self.to_text()


def baseline_vector() -> HyperparamVector:
    """The original LeNet configuration used as the early-stop reference."""
    return HyperparamVector.from_values((32, 5, 5, 1, 1, 2, 2, 64, 5, 5, 1, 1, 2, 2, 100, 10))


@dataclass(frozen=True)
class VariableBounds:
    """Feasible values for one variable: an inclusive range or a value set."""

    index: int
    lo: int = 0
    hi: int = 0
    members: tuple[int, ...] | None = None
    depends_on: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.members is not None:
            if not self.members:
                raise ValueError(f"x{self.index}: empty value set")
        elif self.lo > self.hi:
            raise ValueError(f"x{self.index}: empty range [{self.lo}, {self.hi}]")

    @property
    def is_set(self) -> bool:
        return self.members is not None

    def contains(self, value: int) -> bool:
        if self.members is not None:
            return value in self.members
        return self.lo <= value <= self.hi

    def nearest(self, value: int) -> int:
        """Clamp into the range, or snap to the nearest set member (ties low)."""
        if self.members is not None:
            return min(self.members, key=lambda m: (abs(m - value), m))
        return min(max(value, self.lo), self.hi)

    def sample(self, rng: random.Random) -> int:
        if self.members is not None:
            return self.members[rng.randrange(len(self.members))]
        return rng.randint(self.lo, self.hi)

    def describe(self) -> str:
        if self.members is not None:
            return "{" + ", ".join(str(m) for m in self.members) + "}"
        return f"[{self.lo}, {self.hi}]"


@dataclass(frozen=True)
class Violation:
    """One failed bound check from :func:`validate`."""

    index: int
    value: int
    reason: str

    def __str__(self) -> str:
        return f"x{self.index}={self.value}: {self.reason}"


def _prefix_value(prefix: Sequence[int], index: int, needed_by: int) -> int:
    if len(prefix) < index:
        raise IncompletePrefix(f"x{needed_by} needs x{index}, but only {len(prefix)} variables are set")
    return prefix[index - 1]


def _axis_size(i: int, k: int, s: int, layer: str, axis: str) -> int:
    size = layer_output_size(i, k, 0, s)
    if size < 1:
        raise InfeasibleShape(layer, axis, size)
    return size


@dataclass(frozen=True)
class SearchSpace:
    """Bound derivation, sampling, repair and validation for one input shape.

    ``pins`` fixes chosen variables to single values (their bounds collapse to
    one-member sets); it is used to restrict the search to a sub-space, e.g.
    for brute-force comparisons on a slice.
    """

    input_shape: ImageShape
    pins: Mapping[int, int] = field(default_factory=dict)

    def with_pins(self, pins: Mapping[int, int]) -> "SearchSpace":
        merged = dict(self.pins)
        merged.update(pins)
        return SearchSpace(self.input_shape, merged)

    def bounds_for(self, index: int, prefix: Sequence[int]) -> VariableBounds:
        """Feasible bound for variable ``index`` given the values before it.

        Raises :class:`IncompletePrefix` if an upstream dependency is unset and
        propagates :class:`InfeasibleShape` when the prefix itself produces an
        impossible feature map.
        """
        bounds = self._raw_bounds(index, prefix)
        pinned = self.pins.get(index)
        if pinned is None:
            return bounds
        return VariableBounds(index, members=(pinned,), depends_on=bounds.depends_on)

    def _raw_bounds(self, index: int, prefix: Sequence[int]) -> VariableBounds:
        inp = self.input_shape
        if index in (1, 8):
            return VariableBounds(index, members=KERNEL_COUNT_CHOICES)
        if index in (2, 3):
            hi = min(11, inp.width_x if index == 2 else inp.height_y)
            return VariableBounds(index, min(2, hi), hi)
        if index in (4, 5):
            return VariableBounds(index, 1, 4)
        if index == 6:
            return VariableBounds(index, 1, self._o1_x(prefix, index), depends_on=(2, 4))
        if index == 7:
            return VariableBounds(index, 1, self._o1_y(prefix, index), depends_on=(3, 5))
        if index == 9:
            o2x = self._o2_x(prefix, index)
            return VariableBounds(index, min(2, o2x), o2x, depends_on=(2, 4, 6))
        if index == 10:
            o2y = self._o2_y(prefix, index)
            return VariableBounds(index, min(2, o2y), o2y, depends_on=(3, 5, 7))
        if index == 11:
            return VariableBounds(index, 1, min(4, self._o2_x(prefix, index)), depends_on=(2, 4, 6))
        if index == 12:
            return VariableBounds(index, 1, min(4, self._o2_y(prefix, index)), depends_on=(3, 5, 7))
        if index == 13:
            return VariableBounds(index, 1, self._o3_x(prefix, index), depends_on=(2, 4, 6, 9, 11))
        if index == 14:
            return VariableBounds(index, 1, self._o3_y(prefix, index), depends_on=(3, 5, 7, 10, 12))
        if index == 15:
            return VariableBounds(index, 50, 150)
        if index == 16:
            return VariableBounds(index, 10, 30)
        raise IndexError(f"variable index must be 1..16, got {index}")

    def _o1_x(self, prefix: Sequence[int], needed_by: int) -> int:
        k = _prefix_value(prefix, 2, needed_by)
        s = _prefix_value(prefix, 4, needed_by)
        return _axis_size(self.input_shape.width_x, k, s, "conv1", "x")

    def _o1_y(self, prefix: Sequence[int], needed_by: int) -> int:
        k = _prefix_value(prefix, 3, needed_by)
        s = _prefix_value(prefix, 5, needed_by)
        return _axis_size(self.input_shape.height_y, k, s, "conv1", "y")

    def _o2_x(self, prefix: Sequence[int], needed_by: int) -> int:
        p = _prefix_value(prefix, 6, needed_by)
        return _axis_size(self._o1_x(prefix, needed_by), p, p, "pool1", "x")

    def _o2_y(self, prefix: Sequence[int], needed_by: int) -> int:
        p = _prefix_value(prefix, 7, needed_by)
        return _axis_size(self._o1_y(prefix, needed_by), p, p, "pool1", "y")

    def _o3_x(self, prefix: Sequence[int], needed_by: int) -> int:
        k = _prefix_value(prefix, 9, needed_by)
        s = _prefix_value(prefix, 11, needed_by)
        return _axis_size(self._o2_x(prefix, needed_by), k, s, "conv2", "x")

    def _o3_y(self, prefix: Sequence[int], needed_by: int) -> int:
        k = _prefix_value(prefix, 10, needed_by)
        s = _prefix_value(prefix, 12, needed_by)
        return _axis_size(self._o2_y(prefix, needed_by), k, s, "conv2", "y")

    def sample_vector(self, rng: random.Random) -> HyperparamVector:
        """Draw a uniformly random feasible vector, left to right."""
        prefix: list[int] = []
        for index in range(1, NUM_VARIABLES + 1):
            prefix.append(self.bounds_for(index, prefix).sample(rng))
        return HyperparamVector.from_values(prefix)

    def repair(self, value: int, index: int, prefix: Sequence[int]) -> int:
        """Force ``value`` into the feasible bound for ``index``; idempotent."""
        return self.bounds_for(index, prefix).nearest(value)

    def validate(self, v: HyperparamVector) -> list[Violation]:
        """All bound violations, in index order; empty means feasible."""
        violations: list[Violation] = []
        values = v.values()
        for index in range(1, NUM_VARIABLES + 1):
            try:
                bounds = self.bounds_for(index, values[: index - 1])
            except InfeasibleShape as exc:
                violations.append(Violation(index, values[index - 1], f"no feasible values: {exc}"))
                break
            value = values[index - 1]
            if not bounds.contains(value):
                violations.append(Violation(index, value, f"outside {bounds.describe()}"))
        return violations


def bounds_for(index: int, partial: Sequence[int], input: ImageShape) -> VariableBounds:
    return SearchSpace(input).bounds_for(index, partial)


def sample_vector(rng: random.Random, input: ImageShape) -> HyperparamVector:
    return SearchSpace(input).sample_vector(rng)


def repair(value: int, index: int, partial: Sequence[int], input: ImageShape) -> int:
    return SearchSpace(input).repair(value, index, partial)


def validate(v: HyperparamVector, input: ImageShape) -> list[Violation]:
    return SearchSpace(input).validate(v)
