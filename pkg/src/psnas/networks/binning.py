"""Uniform bin codecs for light azimuth, elevation and intensity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene import INTENSITY_RANGE, LightSet, angles_from_direction, direction_from_angles


@dataclass(frozen=True)
class BinningSpec:
    lo: float
    hi: float
    bins: int

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bins

    def encode(self, values) -> np.ndarray:
        """Bin k covers [lo + k w, lo + (k+1) w); the top edge joins the last bin."""
        v = np.asarray(values, np.float64)
        if not np.isfinite(v).all() or (v < self.lo).any() or (v > self.hi).any():
            bad = v[~((v >= self.lo) & (v <= self.hi))]
            raise ValueError(f"values outside [{self.lo}, {self.hi}]: {bad[:3]}")
        k = np.floor((v - self.lo) / (self.hi - self.lo) * self.bins).astype(np.int64)
        return np.minimum(k, self.bins - 1)

    def decode(self, classes) -> np.ndarray:
        k = np.asarray(classes)
        if (k < 0).any() or (k >= self.bins).any():
            raise ValueError(f"class index outside [0, {self.bins})")
        return self.lo + (k + 0.5) * self.width

    def centers(self) -> np.ndarray:
        return self.decode(np.arange(self.bins))


AZIMUTH = BinningSpec(0.0, np.pi, 36)
ELEVATION = BinningSpec(-np.pi / 2, np.pi / 2, 36)
INTENSITY = BinningSpec(*INTENSITY_RANGE, 20)
HEAD_SIZES = (AZIMUTH.bins, ELEVATION.bins, INTENSITY.bins)


@dataclass
class LightEstimate:
    azimuth_class: np.ndarray
    elevation_class: np.ndarray
    intensity_class: np.ndarray
    phi: np.ndarray
    theta: np.ndarray
    intensity: np.ndarray
    directions: np.ndarray  # [n,3]

    def light_set(self) -> LightSet:
        return LightSet(self.directions, self.intensity)

    def to_text(self) -> str:
        rows = ["image azimuth_class elevation_class intensity_class phi theta e lx ly lz"]
        for i in range(len(self.phi)):
            d = self.directions[i]
            rows.append(f"{i} {self.azimuth_class[i]} {self.elevation_class[i]} "
                        f"{self.intensity_class[i]} {self.phi[i]:.6f} {self.theta[i]:.6f} "
                        f"{self.intensity[i]:.6f} {d[0]:.6f} {d[1]:.6f} {d[2]:.6f}")
        return "\n".join(rows) + "\n"


def encode_lights(lights: LightSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    phi, theta = angles_from_direction(lights.directions)
    return AZIMUTH.encode(phi), ELEVATION.encode(theta), INTENSITY.encode(lights.intensities)


def decode_bins(azimuth_class, elevation_class, intensity_class) -> LightEstimate:
    phi = AZIMUTH.decode(azimuth_class)
    theta = ELEVATION.decode(elevation_class)
    e = INTENSITY.decode(intensity_class)
    return LightEstimate(np.asarray(azimuth_class), np.asarray(elevation_class),
                         np.asarray(intensity_class), phi, theta, e,
                         direction_from_angles(phi, theta).reshape(-1, 3))
