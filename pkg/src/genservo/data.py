"""Observation and dataset containers.

Detections are stored as a dense ``(..., c, m, 2)`` float array with NaN
marking a feature that was not detected in that camera.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch


@dataclass(frozen=True, eq=False)
class Observation:
    joints: Optional[np.ndarray]  # (n,)
    pixels: np.ndarray  # (c, m, 2), NaN where missing

    @property
    def visible(self) -> np.ndarray:
        return ~np.isnan(self.pixels[..., 0])


@dataclass(frozen=True, eq=False)
class Dataset:
    pixels: np.ndarray  # (T, c, m, 2)
    joints: Optional[np.ndarray] = None  # (T, n); NaN rows for missing readings
    actions: Optional[np.ndarray] = None  # (T - 1, n)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 4 or px.shape[-1] != 2:
            raise DimensionMismatch(f"pixels must be (T, c, m, 2), got {px.shape}")
        # a detection is present only if both coordinates are
        missing = np.isnan(px).any(axis=-1, keepdims=True)
        px = np.where(missing, np.nan, px)
        if not np.all(np.isfinite(px[~np.isnan(px)])):
            raise ValueError("detections must be finite")
        object.__setattr__(self, "pixels", px)
        T = px.shape[0]
        if T < 1:
            raise DimensionMismatch("a dataset needs at least one sample")
        if self.joints is not None:
            j = np.asarray(self.joints, dtype=float).reshape(T, -1)
            object.__setattr__(self, "joints", j)
        if self.actions is not None:
            a = np.asarray(self.actions, dtype=float)
            if T > 1:
                a = a.reshape(T - 1, -1)
            else:
                a = a.reshape(0, a.shape[-1] if a.ndim > 1 else 0)
            object.__setattr__(self, "actions", a)
        if self.joints is None and self.actions is None:
            raise ValueError("a dataset without joint readings must carry actions")

    @property
    def T(self) -> int:
        return self.pixels.shape[0]

    @property
    def c(self) -> int:
        return self.pixels.shape[1]

    @property
    def m(self) -> int:
        return self.pixels.shape[2]

    @property
    def n(self) -> Optional[int]:
        if self.joints is not None:
            return self.joints.shape[1]
        if self.actions is not None:
            return self.actions.shape[1]
        return None

    @property
    def visible(self) -> np.ndarray:
        return ~np.isnan(self.pixels[..., 0])

    def __len__(self):
        return self.T

    def sample(self, t: int) -> Observation:
        return Observation(None if self.joints is None else self.joints[t], self.pixels[t])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        actions = None
        if self.actions is not None and len(idx) > 1 and np.all(np.diff(idx) == 1):
            actions = self.actions[idx[0] : idx[-1]]
        joints = None if self.joints is None else self.joints[idx]
        if joints is None and actions is None:
            raise ValueError("subset of an action-only dataset must be contiguous")
        return Dataset(self.pixels[idx], joints, actions)

    def head(self, k: int) -> "Dataset":
        return self.subset(np.arange(min(k, self.T)))

    def tail(self, k: int) -> "Dataset":
        return self.subset(np.arange(max(0, self.T - k), self.T))

    def without_joints(self) -> "Dataset":
        if self.actions is None:
            raise ValueError("dataset has no actions")
        return Dataset(self.pixels, None, self.actions)

    @staticmethod
    def concatenate(parts) -> "Dataset":
        parts = list(parts)
        pixels = np.concatenate([p.pixels for p in parts])
        joints = None
        if all(p.joints is not None for p in parts):
            joints = np.concatenate([p.joints for p in parts])
        return Dataset(pixels, joints, None)

    @staticmethod
    def from_observations(observations, actions=None) -> "Dataset":
        observations = list(observations)
        pixels = np.stack([o.pixels for o in observations])
        joints = None
        if all(o.joints is not None for o in observations):
            joints = np.stack([o.joints for o in observations])
        return Dataset(pixels, joints, actions)
