"""Synthetic training imagery, a rendered corridor VO sequence, and KITTI I/O."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, ImageDraw

from . import kernels
from .imgcore import (Homography, as_image, read_image, sample_homography,
                      warp_image, write_image)


@dataclass
class HomographyBounds:
    rotation_deg: float = 15.0
    scale: tuple = (0.8, 1.2)
    translation: float = 0.1
    perspective: float = 1e-4

    @classmethod
    def zero(cls) -> "HomographyBounds":
        return cls(0.0, (1.0, 1.0), 0.0, 0.0)


@dataclass
class PhotometricConfig:
    noise_sigma: float = 0.02
    brightness: float = 0.1     # additive offset drawn from +-brightness
    contrast: float = 0.1       # gain drawn from 1 +- contrast
    bounds: HomographyBounds = field(default_factory=HomographyBounds)

    @classmethod
    def zero(cls) -> "PhotometricConfig":
        return cls(0.0, 0.0, 0.0, HomographyBounds.zero())


@dataclass
class TrainingPair:
    img_a: np.ndarray
    img_b: np.ndarray
    h_ab: Homography
    valid_b: np.ndarray


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def check(self, height: int, width: int) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= width - 1 and 0 <= self.cy <= height - 1):
            raise ValueError("principal point lies outside the image")


@dataclass
class SceneSequence:
    frames: list
    poses_gt: list              # 4x4 camera-to-world
    intrinsics: CameraIntrinsics
    unreliable_zones: list = field(default_factory=list)   # (x0, y0, x1, y1), half-open

    def __post_init__(self):
        if len(self.frames) != len(self.poses_gt) or len(self.frames) < 2:
            raise ValueError("a sequence needs >= 2 frames and one pose per frame")


# ------------------------------------------------------------------ textures

def _value_noise(rng, shape, cell):
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out, _ = kernels.bilinear_sample(grid, xs / cell, ys / cell)
    return out


def gen_texture_image(rng: np.random.Generator, size=(96, 96), n_polygons=None) -> np.ndarray:
    """Value noise + filled polygons + a linear gradient, stretched to [0, 1].

    Polygon sizes are absolute (8-24 px radius); their count defaults to
    3-7 per 96x96 of area.
    """
    h, w = size
    if h < 32 or w < 32:
        raise ValueError("texture images must be at least 32x32")
    img = np.zeros((h, w))
    amp = 1.0
    for cell in (16, 8, 4, 2):
        img += amp * _value_noise(rng, (h, w), cell)
        amp *= 0.6
    img /= img.max()
    ys, xs = np.mgrid[0:h, 0:w]
    ang = rng.uniform(0, 2 * np.pi)
    grad = (np.cos(ang) * xs / w + np.sin(ang) * ys / h)
    img = 0.7 * img + 0.3 * (grad - grad.min()) / max(np.ptp(grad), 1e-9)

    canvas = PILImage.new("F", (w, h), 0.0)
    alpha = PILImage.new("L", (w, h), 0)
    area_units = (h * w) / (96.0 * 96.0)
    n_poly = int(rng.integers(3, 8) * max(1.0, area_units)) if n_polygons is None else int(n_polygons)
    side = min(h, w, 96)
    for _ in range(n_poly):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(0.08, 0.25) * side
        k = int(rng.integers(3, 7))
        th = np.sort(rng.uniform(0, 2 * np.pi, k))
        rad = r * rng.uniform(0.5, 1.0, k)
        pts = [(float(cx + a * np.cos(t)), float(cy + a * np.sin(t))) for a, t in zip(rad, th)]
        val = float(rng.uniform(0, 1))
        ImageDraw.Draw(canvas).polygon(pts, fill=val)
        ImageDraw.Draw(alpha).polygon(pts, fill=255)
    a = np.asarray(alpha, dtype=np.float64) / 255.0
    img = img * (1 - 0.85 * a) + 0.85 * a * np.asarray(canvas, dtype=np.float64)

    img = (img - img.min()) / max(np.ptp(img), 1e-9)
    return img.astype(np.float32)


def gen_pair(rng: np.random.Generator, img, photometric: PhotometricConfig | None = None) -> TrainingPair:
    """Warp ``img`` by a sampled homography and add photometric jitter."""
    cfg = photometric or PhotometricConfig()
    img = as_image(img)
    b = cfg.bounds
    h_ab = sample_homography(rng, b.rotation_deg, b.scale, b.translation, b.perspective, img.shape)
    warped, valid = warp_image(img, h_ab)
    gain = 1.0 + rng.uniform(-1, 1) * cfg.contrast
    offset = rng.uniform(-1, 1) * cfg.brightness
    noise = rng.standard_normal(img.shape) * cfg.noise_sigma
    out = (warped.astype(np.float64) - 0.5) * gain + 0.5 + offset + noise
    out = np.where(valid, np.clip(out, 0.0, 1.0), 0.0).astype(np.float32)
    return TrainingPair(img, out, h_ab, valid)


def gen_corpus(rng: np.random.Generator, n: int, size=(96, 96)) -> list:
    return [gen_texture_image(rng, size) for _ in range(n)]


# ------------------------------------------------------------------ renderer

@dataclass
class SequenceConfig:
    n_frames: int = 100
    height: int = 240
    width: int = 320
    fx: float = 300.0
    fy: float = 300.0
    cx: float | None = None
    cy: float | None = None
    forward_speed: float = 0.1      # metres per frame
    yaw_rate_deg: float = 0.0       # degrees per frame, positive turns right
    lateral_speed: float = 0.0      # metres per frame along camera x
    half_width: float = 0.4         # corridor walls at x = +-half_width
    camera_height: float = 0.3      # floor at y = +camera_height (y points down)
    ceiling_height: float | None = 0.3    # ceiling at y = -ceiling_height, None for open
    texels_per_metre: float = 200.0
    texture_size: int = 512
    fog_distance: float = 4.0
    zones: list = field(default_factory=list)   # screen rectangles (x0, y0, x1, y1)
    zone_mode: str = "noise"                    # "noise" | "uniform"

    def intrinsics(self) -> CameraIntrinsics:
        cx = (self.width - 1) / 2.0 if self.cx is None else self.cx
        cy = (self.height - 1) / 2.0 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy)


def _rot_y(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def step_transform(cfg: SequenceConfig) -> np.ndarray:
    """Camera motion from frame k to k+1, expressed in camera k."""
    t = np.eye(4)
    t[:3, :3] = _rot_y(cfg.yaw_rate_deg)
    t[:3, 3] = [cfg.lateral_speed, 0.0, cfg.forward_speed]
    return t


def _sample_wrapped(tex_padded, u, v, size):
    u = np.mod(u, size)
    v = np.mod(v, size)
    out, _ = kernels.bilinear_sample(tex_padded, u, v)
    return out


def render_sequence(config: SequenceConfig, rng: np.random.Generator) -> SceneSequence:
    cfg = config
    if cfg.n_frames < 2:
        raise ValueError("need at least 2 frames")
    intr = cfg.intrinsics()
    intr.check(cfg.height, cfg.width)

    step = step_transform(cfg)
    poses = [np.eye(4)]
    for _ in range(cfg.n_frames - 1):
        poses.append(poses[-1] @ step)
    margin = 0.05
    for k, T in enumerate(poses):
        if abs(T[0, 3]) >= cfg.half_width - margin:
            raise ValueError(f"camera path hits a wall at frame {k}")
        if T[1, 3] >= cfg.camera_height - margin or (
                cfg.ceiling_height is not None and T[1, 3] <= -cfg.ceiling_height + margin):
            raise ValueError(f"camera path leaves the corridor vertically at frame {k}")

    n = cfg.texture_size
    textures = []
    n_planes = 3 if cfg.ceiling_height is None else 4
    for _ in range(n_planes):
        tex = gen_texture_image(rng, (n, n)).astype(np.float64)
        textures.append(np.pad(tex, ((0, 1), (0, 1)), mode="wrap"))
    zone_rng_seed = int(rng.integers(0, 2**63 - 1))

    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    rays = np.stack([(xs - intr.cx) / intr.fx, (ys - intr.cy) / intr.fy, np.ones_like(xs)], -1)
    fog_value = 0.5
    frames = []
    for k, T in enumerate(poses):
        d = rays @ T[:3, :3].T
        o = T[:3, 3]
        t_best = np.full(xs.shape, np.inf)
        u = np.zeros_like(xs)
        v = np.zeros_like(xs)
        which = np.full(xs.shape, -1)
        with np.errstate(divide="ignore", invalid="ignore"):
            planes = [
                (0, (cfg.camera_height - o[1]) / d[..., 1], d[..., 1] > 1e-9),
                (1, (cfg.half_width - o[0]) / d[..., 0], d[..., 0] > 1e-9),
                (2, (-cfg.half_width - o[0]) / d[..., 0], d[..., 0] < -1e-9),
            ]
            if cfg.ceiling_height is not None:
                planes.append((3, (-cfg.ceiling_height - o[1]) / d[..., 1], d[..., 1] < -1e-9))
        for idx, t, ok in planes:
            hit = ok & (t > 0) & (t < t_best)
            t_best = np.where(hit, t, t_best)
            which = np.where(hit, idx, which)
        p = o + d * np.where(np.isfinite(t_best), t_best, 0.0)[..., None]
        img = np.full(xs.shape, fog_value)
        scale = cfg.texels_per_metre
        for idx in range(n_planes):
            sel = which == idx
            if not sel.any():
                continue
            if idx in (0, 3):
                uu, vv = p[sel, 0], p[sel, 2]
            else:
                uu, vv = p[sel, 2], p[sel, 1]
            img[sel] = _sample_wrapped(textures[idx], uu * scale, vv * scale, n)
        dist = np.where(np.isfinite(t_best), t_best * np.linalg.norm(rays, axis=-1), np.inf)
        fog = np.exp(-dist / cfg.fog_distance)
        img = fog * img + (1 - fog) * fog_value
        if cfg.zones:
            zrng = np.random.default_rng([zone_rng_seed, k])
            for (x0, y0, x1, y1) in cfg.zones:
                shape = (y1 - y0, x1 - x0)
                if cfg.zone_mode == "noise":
                    img[y0:y1, x0:x1] = zrng.random(shape)
                else:
                    img[y0:y1, x0:x1] = zrng.random()
        frames.append(np.clip(img, 0, 1).astype(np.float32))
    return SceneSequence(frames, poses, intr, [tuple(z) for z in cfg.zones])


def zone_covering(fraction: float, height: int = 240, width: int = 320,
                  anchor: str = "bottom-right") -> tuple:
    """Axis-aligned rectangle with the frame's aspect ratio covering ``fraction`` of it."""
    s = np.sqrt(fraction)
    zw, zh = int(round(width * s)), int(round(height * s))
    if anchor == "bottom-right":
        x0, y0 = width - zw - 8, height - zh - 8
    else:
        x0, y0 = (width - zw) // 2, (height - zh) // 2
    return (x0, y0, x0 + zw, y0 + zh)


# ------------------------------------------------------------------ KITTI I/O

class KittiFormatError(ValueError):
    pass


def parse_pose_line(line: str, lineno: int = 1) -> np.ndarray:
    parts = line.split()
    try:
        vals = [float(x) for x in parts]
    except ValueError:
        raise KittiFormatError(f"poses.txt line {lineno}: not numeric: {line.strip()!r}") from None
    if len(vals) != 12:
        raise KittiFormatError(f"poses.txt line {lineno}: expected 12 values, got {len(vals)}")
    T = np.eye(4)
    T[:3, :] = np.array(vals).reshape(3, 4)
    return T


def read_calib(path) -> CameraIntrinsics:
    for line in Path(path).read_text().splitlines():
        if line.startswith("P0:"):
            vals = [float(x) for x in line[3:].split()]
            if len(vals) != 12:
                raise KittiFormatError("calib.txt: P0 needs 12 values")
            return CameraIntrinsics(fx=vals[0], fy=vals[5], cx=vals[2], cy=vals[6])
    raise KittiFormatError("calib.txt: no P0 line")


def load_kitti(directory, frame_range=None) -> SceneSequence:
    """Load a KITTI-odometry style sequence; poses are re-based to the first loaded frame."""
    d = Path(directory)
    img_dir = d / "image_0"
    images = sorted(p for p in img_dir.iterdir() if re.fullmatch(r"\d{6}\.(png|pgm)", p.name))
    lines = [ln for ln in (d / "poses.txt").read_text().splitlines() if ln.strip()]
    if len(images) != len(lines):
        raise KittiFormatError(f"{len(images)} images but {len(lines)} pose lines")
    start, stop = (0, len(images)) if frame_range is None else frame_range
    if stop > len(images) or start < 0 or stop - start < 2:
        raise KittiFormatError(
            f"frame range {start}..{stop} needs {stop} frames, only {len(images)} available "
            f"(short by {max(0, stop - len(images))})")
    intr = read_calib(d / "calib.txt")
    poses = [parse_pose_line(lines[i], i + 1) for i in range(start, stop)]
    base = np.linalg.inv(poses[0])
    poses = [base @ T for T in poses]
    frames = [read_image(images[i]) for i in range(start, stop)]
    return SceneSequence(frames, poses, intr)


def write_kitti(seq: SceneSequence, directory) -> None:
    d = Path(directory)
    (d / "image_0").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        write_image(d / "image_0" / f"{i:06d}.png", f)
    with open(d / "poses.txt", "w") as fh:
        for T in seq.poses_gt:
            fh.write(" ".join(f"{v:.12e}" for v in T[:3, :].ravel()) + "\n")
    k = seq.intrinsics
    p0 = [k.fx, 0, k.cx, 0, 0, k.fy, k.cy, 0, 0, 0, 1, 0]
    with open(d / "calib.txt", "w") as fh:
        fh.write("P0: " + " ".join(f"{v:.12e}" for v in p0) + "\n")
