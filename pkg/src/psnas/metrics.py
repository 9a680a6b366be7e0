"""Angular and intensity error metrics, plus the evaluation report."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _angles_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def mae_light(pred, truth) -> float:
    """Mean angle in degrees between paired unit directions, both [n,3]."""
    pred = np.asarray(pred, np.float64).reshape(-1, 3)
    truth = np.asarray(truth, np.float64).reshape(-1, 3)
    if pred.shape != truth.shape:
        raise ValueError(f"direction sets differ in shape: {pred.shape} vs {truth.shape}")
    if len(pred) == 0:
        raise ValueError("cannot average over zero directions")
    return float(_angles_deg(pred, truth).mean())


def mae_normal(pred, truth, mask=None) -> float:
    """Mean angle in degrees between normal maps [3,H,W] over the masked pixels.

    Accepts arrays or objects with ``normals`` and ``mask`` attributes.
    """
    if mask is None:
        mask = getattr(truth, "mask", None)
    pred = np.asarray(getattr(pred, "normals", pred), np.float64)
    truth = np.asarray(getattr(truth, "normals", truth), np.float64)
    if pred.shape != truth.shape or pred.shape[0] != 3:
        raise ValueError(f"normal maps differ in shape: {pred.shape} vs {truth.shape}")
    mask = np.ones(pred.shape[1:], bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("cannot average over an empty mask")
    return float(_angles_deg(pred[:, mask].T, truth[:, mask].T).mean())


def per_pixel_angles(pred, truth, mask) -> np.ndarray:
    return _angles_deg(np.asarray(pred, np.float64)[:, mask].T, np.asarray(truth, np.float64)[:, mask].T)


def intensity_scale(pred, truth) -> float:
    pred = np.asarray(pred, np.float64)
    truth = np.asarray(truth, np.float64)
    denom = float(np.sum(pred * pred))
    if denom == 0.0:
        raise ValueError("predicted intensities are all zero; scale is undefined")
    return float(np.sum(pred * truth)) / denom


def intensity_error(pred, truth) -> float:
    """Relative error after the least-squares global scale fit of ``pred`` onto ``truth``."""
    pred = np.asarray(pred, np.float64).ravel()
    truth = np.asarray(truth, np.float64).ravel()
    if pred.shape != truth.shape or len(pred) == 0:
        raise ValueError("intensity vectors must be non-empty and of equal length")
    if (truth <= 0).any():
        raise ValueError("true intensities must be positive")
    s = intensity_scale(pred, truth)
    return float(np.mean(np.abs(s * pred - truth) / truth))


@dataclass
class EvalReport:
    mae_light: float
    e_err: float
    mae_normal: float
    num_images: int
    num_pixels: int
    per_object: dict[str, dict[str, float]] = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("mae_light", "mae_normal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 180.0:
                raise ValueError(f"{name} out of range: {v}")
        if self.e_err < 0:
            raise ValueError("E_err must be >= 0")

    def to_text(self) -> str:
        lines = [f"MAE_light = {self.mae_light!r}",
                 f"E_err = {self.e_err!r}",
                 f"MAE_normal = {self.mae_normal!r}",
                 f"n = {self.num_images}",
                 f"m = {self.num_pixels}"]
        for name in sorted(self.per_object):
            for key, value in self.per_object[name].items():
                lines.append(f"{name}.{key} = {value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "EvalReport":
        values, per_object = {}, {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, value = line.partition(" = ")
            if not sep:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            if "." in key:
                obj, metric = key.rsplit(".", 1)
                per_object.setdefault(obj, {})[metric] = float(value)
            else:
                values[key] = value
        try:
            return cls(float(values["MAE_light"]), float(values["E_err"]),
                       float(values["MAE_normal"]), int(values["n"]), int(values["m"]), per_object)
        except KeyError as exc:
            raise ValueError(f"report is missing {exc.args[0]}") from None
