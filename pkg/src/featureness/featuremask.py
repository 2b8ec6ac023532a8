"""Binary featureness masks from keypoint probability and uncertainty."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import Keypoints
from .imgcore import write_image

STRICT = "strict"
INCLUSIVE = "inclusive"


@dataclass(frozen=True)
class Thresholds:
    p_t: float = 0.0
    sigma_t: float = 0.10
    prob_mode: str | None = None    # None: strict when p_t == 0, else inclusive

    def __post_init__(self):
        if not (0.0 <= self.p_t <= 1.0 and 0.0 <= self.sigma_t <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        if self.prob_mode not in (None, STRICT, INCLUSIVE):
            raise ValueError(f"prob_mode must be {STRICT!r} or {INCLUSIVE!r}")

    @property
    def mode(self) -> str:
        if self.prob_mode is not None:
            return self.prob_mode
        return STRICT if self.p_t == 0.0 else INCLUSIVE


@dataclass
class FeaturenessMaps:
    P: np.ndarray
    U: np.ndarray
    F: np.ndarray
    thresholds: Thresholds | None = None


def featureness_mask(P, U, thresholds: Thresholds) -> np.ndarray:
    P = np.asarray(P)
    U = np.asarray(U)
    if P.shape != U.shape:
        raise ValueError("P and U must have the same shape")
    prob_ok = P > thresholds.p_t if thresholds.mode == STRICT else P >= thresholds.p_t
    return prob_ok & (U <= thresholds.sigma_t)


def compute_featureness(model, image, thresholds: Thresholds | None = None) -> FeaturenessMaps:
    """One deterministic forward pass through detector + uncertainty head."""
    thresholds = thresholds or Thresholds()
    out = model.forward(image, descriptors=False, uncertainty=True)
    P = out["prob"][0].astype(np.float64)
    U = out["u"][0].astype(np.float64)
    return FeaturenessMaps(P, U, featureness_mask(P, U, thresholds), thresholds)


def round_half_up(v):
    return np.floor(np.asarray(v, dtype=np.float64) + 0.5).astype(np.int64)


def filter_keypoints(kps: Keypoints, F, border_policy: str = "error"):
    """Keep keypoints whose nearest pixel has F = 1, preserving order.

    ``border_policy`` "error" rejects keypoints outside the mask grid, "drop"
    silently discards them. Returns the kept keypoints and their indices.
    """
    F = np.asarray(F, dtype=bool)
    h, w = F.shape
    xy = round_half_up(kps.xy) if len(kps) else np.zeros((0, 2), np.int64)
    inside = (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
    if not inside.all() and border_policy == "error":
        bad = kps.xy[~inside][0]
        raise ValueError(f"keypoint ({bad[0]:.2f}, {bad[1]:.2f}) lies outside the {w}x{h} mask")
    keep = np.zeros(len(kps), dtype=bool)
    keep[inside] = F[xy[inside, 1], xy[inside, 0]]
    idx = np.nonzero(keep)[0]
    return kps.subset(idx), idx


def mask_area(F) -> float:
    F = np.asarray(F, dtype=bool)
    return 100.0 * float(F.sum()) / F.size


def mask_image(image, F) -> np.ndarray:
    """Zero the pixels outside the mask (image-space application)."""
    return np.where(np.asarray(F, dtype=bool), image, 0.0).astype(np.float32)


def write_csv_map(path, arr) -> None:
    np.savetxt(path, np.asarray(arr, dtype=np.float64), fmt="%.6f", delimiter=",")


def read_csv_map(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def export_heatmaps(maps: FeaturenessMaps, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "P.png": out / "P.png", "U.png": out / "U.png", "F.png": out / "F.png",
        "P.csv": out / "P.csv", "U.csv": out / "U.csv",
    }
    write_image(files["P.png"], np.clip(maps.P, 0, 1))
    write_image(files["U.png"], np.clip(maps.U, 0, 1))
    write_image(files["F.png"], maps.F.astype(np.float32))
    write_csv_map(files["P.csv"], maps.P)
    write_csv_map(files["U.csv"], maps.U)
    return files
