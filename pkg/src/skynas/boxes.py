"""Axis-aligned boxes shared by the data, head and scoring code."""
from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"invalid box {self}: min corner exceeds max corner")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def clipped(self, lo=0.0, hi=1.0):
        def c(v):
            return min(max(v, lo), hi)

        return Box(c(self.x_min), c(self.y_min), c(self.x_max), c(self.y_max))

    def scaled(self, s):
        return Box(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)
