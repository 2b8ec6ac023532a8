"""Grayscale rasters, homographies, bilinear warping and image file I/O.

Images are 2-D float32 arrays with values in [0, 1]; row index is y, column
index is x. Pixel coordinates are (x, y) with the origin on pixel centres.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import kernels

DET_EPS = 1e-12
W_EPS = 1e-12


class DegenerateHomographyError(ValueError):
    pass


class PointAtInfinityError(ValueError):
    pass


def as_image(data) -> np.ndarray:
    """Validate and return a float32 image array."""
    img = np.asarray(data, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if img.size and (not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("image intensities must be finite and within [0, 1]")
    return img


@dataclass(frozen=True)
class Homography:
    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if not np.isfinite(m).all() or abs(np.linalg.det(m)) <= DET_EPS or abs(m[2, 2]) <= DET_EPS:
            raise DegenerateHomographyError("homography is singular or not normalizable")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise DegenerateHomographyError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)


def apply_homography(h: Homography, pts) -> np.ndarray:
    """Map (x, y) points, shape (2,) or (N, 2), through ``h``."""
    p = np.asarray(pts, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    q = p @ h.m[:, :2].T + h.m[:, 2]
    w = q[:, 2]
    if np.any(np.abs(w) < W_EPS):
        raise PointAtInfinityError("point maps to infinity under the homography")
    out = q[:, :2] / w[:, None]
    return out[0] if single else out


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width]
    return xs.astype(np.float64), ys.astype(np.float64)


def warp_image(img, h: Homography, out_size: tuple[int, int] | None = None):
    """Inverse-map bilinear warp of ``img`` by ``h``.

    ``out_size`` is (height, width); defaults to the input size. Returns the
    warped image and a boolean validity mask; pixels whose source falls outside
    [0, W-1] x [0, H-1] are invalid and set to 0.
    """
    img = as_image(img)
    oh, ow = out_size if out_size is not None else img.shape
    xs, ys = pixel_grid(oh, ow)
    hinv = h.inverse().m
    den = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    safe = np.abs(den) >= W_EPS
    den = np.where(safe, den, 1.0)
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / den
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / den
    # points behind the projective horizon have no source pixel
    sx = np.where(safe & (den > 0), sx, -1.0)
    out, valid = kernels.bilinear_sample(img, sx, sy)
    return np.clip(out, 0.0, 1.0).astype(np.float32), valid


def sample_homography(rng: np.random.Generator, rotation_deg: float = 15.0,
                      scale: tuple[float, float] = (0.8, 1.2), translation: float = 0.1,
                      perspective: float = 1e-4, size: tuple[int, int] = (96, 96)) -> Homography:
    """Random rotation/anisotropic scale/translation/perspective about the image centre.

    Bounds are clamped to the defaults' safe ranges: rotation to [0, 15] deg,
    scales to [0.8, 1.2], translation to [0, 0.1] of the image side and
    perspective to [0, 1e-4]. All-zero bounds (rotation 0, scale (1, 1),
    translation 0, perspective 0) give the identity.
    """
    rot = np.deg2rad(float(np.clip(rotation_deg, 0.0, 15.0)))
    s_lo, s_hi = sorted((float(np.clip(scale[0], 0.8, 1.2)), float(np.clip(scale[1], 0.8, 1.2))))
    tr = float(np.clip(translation, 0.0, 0.1))
    pers = float(np.clip(perspective, 0.0, 1e-4))
    hgt, wid = size
    # fixed draw order keeps streams comparable across bound settings
    u = rng.uniform(-1.0, 1.0, size=7)
    theta = u[0] * rot
    sx = s_lo + (s_hi - s_lo) * (u[1] + 1.0) / 2.0
    sy = s_lo + (s_hi - s_lo) * (u[2] + 1.0) / 2.0
    tx, ty = u[3] * tr * wid, u[4] * tr * hgt
    px, py = u[5] * pers, u[6] * pers
    cx, cy = (wid - 1) / 2.0, (hgt - 1) / 2.0
    centre = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    affine = np.array([[c * sx, -s * sy, 0], [s * sx, c * sy, 0], [px, py, 1]])
    back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1]], dtype=np.float64)
    return Homography(back @ affine @ centre)


def rotation_angle_deg(h: Homography) -> float:
    """Rotation of the linear part, via its polar decomposition."""
    u, _, vt = np.linalg.svd(h.m[:2, :2])
    r = u @ vt
    return float(np.degrees(np.arctan2(r[1, 0], r[0, 0])))


def to_gray(rgb) -> np.ndarray:
    """Rec.601 luma of an (H, W, 3) image in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3), got {rgb.shape}")
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    return np.clip(gray, 0.0, 1.0).astype(np.float32)


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Read an 8-bit PNG/PGM (gray or RGB) as a [0, 1] grayscale image."""
    with PILImage.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P"):
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            return to_gray(arr)
        if im.mode != "L":
            im = im.convert("L")
        return (np.asarray(im, dtype=np.float32) / 255.0).astype(np.float32)


def write_image(path, img) -> None:
    """Write a grayscale image; the suffix picks PNG or binary PGM (P5)."""
    path = Path(path)
    data = to_uint8(img)
    if data.ndim != 2:
        raise ValueError("only grayscale images are written")
    if path.suffix.lower() == ".pgm":
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (data.shape[1], data.shape[0]))
            f.write(data.tobytes())
    else:
        PILImage.fromarray(data, mode="L").save(path, format="PNG")
