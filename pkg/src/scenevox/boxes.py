"""Oriented 3D boxes used for ground truth and detections."""

import math
from dataclasses import dataclass, replace

import numpy as np

DIFFICULTIES = ("easy", "moderate", "hard")


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), 2.0 * np.pi)
    if np.ndim(theta) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Box3D:
    """Center/size/yaw box in the sensor frame.

    center is (x, y, z) in meters at the box centroid, size is (l, w, h) with
    l along the heading, yaw rotates l about +z and is wrapped to (-pi, pi].
    score is 1.0 for ground truth.
    """

    center: tuple
    size: tuple
    yaw: float
    cls: int = 0
    score: float = 1.0
    difficulty: str = "easy"

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box sizes must be positive, got {self.size}")
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def with_score(self, score):
        return replace(self, score=float(score))

    def as_array(self):
        """(x, y, z, l, w, h, yaw) as float64."""
        return np.array([*self.center, *self.size, self.yaw], dtype=np.float64)

    @property
    def volume(self):
        l, w, h = self.size
        return l * w * h

    def bev_corners(self):
        """(4, 2) BEV footprint corners, counter-clockwise."""
        x, y, _ = self.center
        l, w, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        half = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([x, y])

    def z_interval(self):
        z = self.center[2]
        h = self.size[2]
        return z - 0.5 * h, z + 0.5 * h


def box_from_array(arr, cls=0, score=1.0, difficulty="easy"):
    arr = np.asarray(arr, dtype=np.float64)
    return Box3D(tuple(arr[:3]), tuple(arr[3:6]), float(arr[6]),
                 cls=cls, score=score, difficulty=difficulty)


def difficulty_rank(difficulty):
    return DIFFICULTIES.index(difficulty)


def difficulty_from_range(distance, easy_below=20.0, moderate_below=35.0):
    """Range-based difficulty tag: easy < 20 m <= moderate < 35 m <= hard."""
    if distance < easy_below:
        return "easy"
    if distance < moderate_below:
        return "moderate"
    return "hard"
