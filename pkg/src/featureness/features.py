"""Sparse keypoints, descriptors and matching for the VO front end."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from . import kernels
from .imgcore import as_image

BRIEF_BITS = 256
BRIEF_BORDER = 16


@dataclass
class Keypoints:
    xy: np.ndarray       # (N, 2) float, (x, y)
    score: np.ndarray    # (N,)

    def __len__(self):
        return len(self.xy)

    def subset(self, idx) -> "Keypoints":
        return Keypoints(self.xy[idx], self.score[idx])

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0))


@dataclass
class Matches:
    ia: np.ndarray
    ib: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.ia)


def nms_points(score, radius, limit=0):
    """Greedy non-maximum suppression over a score map.

    Candidates are the finite entries (mask others with -inf), visited by
    descending score with ties in raster order. Returns (K, 2) integer (x, y) positions; every pair is more
    than ``radius`` apart in Chebyshev distance.
    """
    h, w = score.shape
    flat = score.ravel()
    cand = np.nonzero(np.isfinite(flat))[0]
    order = cand[np.argsort(-flat[cand], kind="stable")]
    ys, xs = np.divmod(order, w)
    keep = kernels.greedy_nms(ys.astype(np.int64), xs.astype(np.int64), h, w, int(radius), int(limit))
    return np.stack([xs[keep], ys[keep]], axis=1)


def _nms_keypoints(score_map, radius, limit, floor=0.0):
    s = np.where(score_map > floor, score_map, -np.inf)
    xy = nms_points(s, radius, limit)
    return Keypoints(xy.astype(np.float64), score_map[xy[:, 1], xy[:, 0]].astype(np.float64))


# ------------------------------------------------------------------ FAST

def fast_detect(image, threshold=0.08, nms_radius=5, arc=9) -> Keypoints:
    """FAST-9 segment test with sum-of-absolute-difference scores and greedy NMS."""
    img = as_image(image).astype(np.float64)
    score = kernels.fast_score(img, float(threshold), int(arc))
    return _nms_keypoints(score, nms_radius, 0)


def fast_corner_map(image, threshold=0.08, arc=9) -> np.ndarray:
    """Boolean map of segment-test corners before NMS."""
    return kernels.fast_score(as_image(image).astype(np.float64), float(threshold), int(arc)) > 0


# ------------------------------------------------------------------ Shi-Tomasi

def structure_tensor(image, w=2):
    img = as_image(image).astype(np.float64)
    gy, gx = np.gradient(img)
    size = 2 * w + 1

    def box(a):
        ap = np.pad(a, w)
        return sliding_window_view(ap, (size, size)).sum(axis=(-1, -2))

    return box(gx * gx), box(gx * gy), box(gy * gy)


def min_eigenvalue_map(image, w=2):
    a, b, c = structure_tensor(image, w)
    lam = (a + c) / 2.0 - np.sqrt(((a - c) / 2.0) ** 2 + b * b)
    return np.maximum(lam, 0.0)


def shi_tomasi(image, w=2, top_n=1000, min_quality=0.01, nms_radius=3) -> Keypoints:
    if w < 1:
        raise ValueError("window half-size must be >= 1")
    resp = min_eigenvalue_map(image, w)
    peak = resp.max()
    if peak <= 0:
        return Keypoints.empty()
    return _nms_keypoints(resp, nms_radius, top_n, floor=max(min_quality * peak, 0.0))


# ------------------------------------------------------------------ BRIEF

@lru_cache(maxsize=16)
def brief_pattern(seed=0, sigma=6.5):
    rng = np.random.default_rng(seed)
    pts = np.rint(rng.normal(0.0, sigma, size=(BRIEF_BITS, 4)))
    return np.clip(pts, -(BRIEF_BORDER - 1), BRIEF_BORDER - 1).astype(np.int64)


def brief_describe(image, keypoints: Keypoints, seed=0):
    """BRIEF-256 on a Gaussian-smoothed image.

    Keypoints closer than 16 px to the border are dropped. Returns the packed
    descriptors (K, 32) uint8 and the indices of the kept keypoints.
    """
    img = gaussian_filter(as_image(image).astype(np.float64), 2.0)
    h, w = img.shape
    xy = np.rint(keypoints.xy).astype(np.int64)
    keep = np.nonzero((xy[:, 0] >= BRIEF_BORDER) & (xy[:, 0] < w - BRIEF_BORDER)
                      & (xy[:, 1] >= BRIEF_BORDER) & (xy[:, 1] < h - BRIEF_BORDER))[0]
    pat = brief_pattern(seed)
    x = xy[keep, 0][:, None]
    y = xy[keep, 1][:, None]
    bits = img[y + pat[:, 1], x + pat[:, 0]] < img[y + pat[:, 3], x + pat[:, 2]]
    return np.packbits(bits, axis=1), keep


# ------------------------------------------------------------------ learned

def learned_detect_describe(model, image, top_n=500, nms_radius=2, outputs=None):
    """Top-n keypoints from the probability map and their dense descriptors."""
    out = outputs if outputs is not None else model.forward(image)
    prob = out["prob"][0]
    xy = nms_points(prob.astype(np.float64), nms_radius, top_n)
    kps = Keypoints(xy.astype(np.float64), prob[xy[:, 1], xy[:, 0]].astype(np.float64))
    desc = out["desc"][0][xy[:, 1], xy[:, 0]].astype(np.float32)
    return kps, desc


# ------------------------------------------------------------------ matching

def descriptor_kind(desc):
    d = np.asarray(desc)
    return "binary" if d.dtype == np.uint8 else "float"


def distance_matrix(desc_a, desc_b):
    ka, kb = descriptor_kind(desc_a), descriptor_kind(desc_b)
    if ka != kb:
        raise TypeError(f"cannot match {ka} descriptors against {kb} descriptors")
    if ka == "binary":
        return kernels.hamming_matrix(np.ascontiguousarray(desc_a), np.ascontiguousarray(desc_b)).astype(np.float64)
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def match(desc_a, desc_b, mutual=True, ratio=None) -> Matches:
    """Nearest-neighbour matching with optional mutual check and Lowe ratio test.

    Ties resolve to the lower index on either side.
    """
    if descriptor_kind(desc_a) != descriptor_kind(desc_b):
        raise TypeError("cannot match binary descriptors against float descriptors")
    if len(desc_a) == 0 or len(desc_b) == 0:
        return Matches(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    d = distance_matrix(desc_a, desc_b)
    ia = np.arange(d.shape[0])
    nn = d.argmin(axis=1)
    best = d[ia, nn]
    ok = np.ones(len(ia), dtype=bool)
    if mutual:
        ok &= d.argmin(axis=0)[nn] == ia
    if ratio is not None and d.shape[1] >= 2:
        second = np.partition(d, 1, axis=1)[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            ok &= np.where(second > 0, best / second, np.inf) < ratio
    return Matches(ia[ok], nn[ok], best[ok])


def write_keypoints_csv(path, kps: Keypoints):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "score"])
        for (x, y), s in zip(kps.xy, kps.score):
            w.writerow([f"{x:.6f}", f"{y:.6f}", f"{s:.6f}"])


def write_matches_csv(path, m: Matches):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["i", "j", "distance"])
        for i, j, d in zip(m.ia, m.ib, m.distance):
            w.writerow([int(i), int(j), f"{d:.6f}"])
