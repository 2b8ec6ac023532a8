"""Frame-to-frame monocular visual odometry and trajectory metrics.

Correspondences are calibrated (intrinsics removed) points. An essential
matrix E relates them as ``x2^T E x1 = 0`` for ``X2 = R X1 + t``; camera
poses are camera-to-world, so the motion of camera 2 expressed in camera 1 is
``(R^T, -R^T t)``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import features as feat
from .featuremask import Thresholds, compute_featureness, filter_keypoints, mask_area

log = logging.getLogger(__name__)


class DegenerateConfigurationError(ValueError):
    pass


class TrackingFailure(RuntimeError):
    pass


class PoseRecoveryError(RuntimeError):
    pass


class VOAbort(RuntimeError):
    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []


# ------------------------------------------------------------------ two-view geometry

def homogeneous(x):
    x = np.asarray(x, dtype=np.float64)
    return np.hstack([x, np.ones((len(x), 1))])


def _hartley(x):
    c = x.mean(axis=0)
    d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def project_to_essential(e):
    u, _, vt = np.linalg.svd(e)
    return u @ np.diag([1.0, 1.0, 0.0]) @ vt


def eight_point(x1, x2, rank_tol=1e-9):
    """Normalised 8-point essential matrix with singular values (1, 1, 0).

    Raises :class:`DegenerateConfigurationError` when the epipolar design
    matrix has rank below 8 (e.g. pure rotation or too few distinct points).
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if len(x1) < 8 or len(x1) != len(x2):
        raise DegenerateConfigurationError("need >= 8 correspondences")
    t1, t2 = _hartley(x1), _hartley(x2)
    h1 = homogeneous(x1) @ t1.T
    h2 = homogeneous(x2) @ t2.T
    a = (h2[:, :, None] * h1[:, None, :]).reshape(len(x1), 9)
    _, s, vt = np.linalg.svd(a, full_matrices=True)
    if len(s) < 8 or s[7] <= rank_tol * s[0]:
        raise DegenerateConfigurationError("epipolar design matrix is rank deficient")
    e = t2.T @ vt[-1].reshape(3, 3) @ t1
    return project_to_essential(e)


def epipolar_residuals(e, x1, x2):
    return np.einsum("ij,ij->i", homogeneous(x2), homogeneous(x1) @ e.T)


def sampson_error(e, x1, x2):
    """Squared first-order geometric error of each correspondence."""
    h1, h2 = homogeneous(x1), homogeneous(x2)
    ex1 = h1 @ e.T
    etx2 = h2 @ e
    num = np.einsum("ij,ij->i", h2, ex1) ** 2
    den = ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2
    return num / np.maximum(den, 1e-300)


@dataclass
class RansacConfig:
    threshold: float = 3.0 / 300.0      # normalised units, i.e. 3 px at fx = 300
    max_iters: int = 1000
    confidence: float = 0.999
    seed: int = 0


def adaptive_iterations(inlier_ratio, confidence, sample_size=8):
    w = inlier_ratio ** sample_size
    if w <= 0:
        return math.inf
    if w >= 1:
        return 1
    den = math.log1p(-w)
    return math.log1p(-confidence) / den if den < 0 else math.inf


def _score(e, x1, x2, thr2):
    err = sampson_error(e, x1, x2)
    mask = err <= thr2
    return (int(mask.sum()), -float(np.minimum(err, thr2).sum())), mask


def _local_refit(x1, x2, e, mask, thr2, rng, reps=8, rounds=4):
    """Inner RANSAC on non-minimal subsets of the inliers, each polished by refits.

    Returns the best (E, mask, score) found, never worse than the input.
    """
    score, _ = _score(e, x1, x2, thr2)
    best = (e, mask, score)
    for rep in range(reps + 1):
        idx = np.nonzero(best[1])[0]
        if rep > 0:
            k = max(16, len(idx) // 2)
            if len(idx) <= k:
                break
            idx = rng.choice(idx, k, replace=False)
        cur_mask = np.zeros(len(x1), dtype=bool)
        cur_mask[idx] = True
        cand_best = None
        for _ in range(rounds):
            try:
                cand = eight_point(x1[cur_mask], x2[cur_mask])
            except DegenerateConfigurationError:
                break
            sc, cur_mask = _score(cand, x1, x2, thr2)
            if cand_best is not None and sc <= cand_best[2]:
                break
            cand_best = (cand, cur_mask, sc)
        if cand_best is not None and cand_best[2] > best[2]:
            best = cand_best
    return best


def estimate_essential_ransac(x1, x2, config: RansacConfig | None = None):
    """RANSAC over 8-point samples with a Sampson inlier test; returns (E, inlier indices).

    Every new best hypothesis is polished by a local optimisation on its
    inliers, which keeps noisy minimal samples from ending the search on a
    tilted model.
    """
    cfg = config or RansacConfig()
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = len(x1)
    if n < 8:
        raise TrackingFailure(f"only {n} correspondences")
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.threshold ** 2
    best_score, best_e, best_mask = (0, -math.inf), None, None
    needed = cfg.max_iters
    it = 0
    while it < min(needed, cfg.max_iters):
        sample = rng.choice(n, 8, replace=False)
        it += 1
        try:
            e = eight_point(x1[sample], x2[sample])
        except (DegenerateConfigurationError, np.linalg.LinAlgError):
            continue
        score, mask = _score(e, x1, x2, thr2)
        if score > best_score:
            if score[0] >= 8:
                e, mask, score = _local_refit(x1, x2, e, mask, thr2, rng)
            best_score, best_e, best_mask = score, e, mask
            needed = adaptive_iterations(score[0] / n, cfg.confidence)
    if best_score[0] < 8:
        raise TrackingFailure(f"best hypothesis has {best_score[0]} inliers")
    return best_e, np.nonzero(best_mask)[0]


def triangulate(r, t, x1, x2):
    """Linear triangulation for P1 = [I|0], P2 = [R|t]; returns (N, 3) points in camera 1."""
    p1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    p2 = np.hstack([r, np.asarray(t, dtype=np.float64).reshape(3, 1)])
    out = np.empty((len(x1), 3))
    for i, (a, b) in enumerate(zip(x1, x2)):
        m = np.stack([a[0] * p1[2] - p1[0], a[1] * p1[2] - p1[1],
                      b[0] * p2[2] - p2[0], b[1] * p2[2] - p2[1]])
        _, _, vt = np.linalg.svd(m)
        X = vt[-1]
        out[i] = X[:3] / X[3] if abs(X[3]) > 1e-300 else X[:3] * 1e300
    return out


def pose_candidates(e):
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    ra, rb = u @ w @ vt, u @ w.T @ vt
    t = u[:, 2]
    return [(ra, t), (ra, -t), (rb, t), (rb, -t)]


def cheirality_count(r, t, x1, x2):
    X = triangulate(r, t, x1, x2)
    z1 = X[:, 2]
    z2 = (X @ r.T + t)[:, 2]
    return int(((z1 > 0) & (z2 > 0)).sum())


def recover_pose(e, x1, x2):
    """(R, unit t) maximising the number of points in front of both cameras."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if len(x1) < 1:
        raise PoseRecoveryError("no inliers")
    best, best_count = None, -1
    for r, t in pose_candidates(e):
        c = cheirality_count(r, t, x1, x2)
        if c > best_count:
            best, best_count = (r, t), c
    if best_count * 2 <= len(x1):
        raise PoseRecoveryError(f"best candidate has only {best_count}/{len(x1)} points in front")
    r, t = best
    return r, t / np.linalg.norm(t)


def relative_motion(r, t):
    """4x4 motion of camera 2 in camera 1's frame from X2 = R X1 + t."""
    T = np.eye(4)
    T[:3, :3] = r.T
    T[:3, 3] = -r.T @ t
    return T


def rotation_angle(r):
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def angle_between(a, b):
    a = np.asarray(a, float) / np.linalg.norm(a)
    b = np.asarray(b, float) / np.linalg.norm(b)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


# ------------------------------------------------------------------ metrics

def umeyama(src, dst, with_scale=True):
    """Similarity (s, R, t) minimising ||dst - (s R src + t)||^2."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sgn = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2, 2] = -1
    r = u @ sgn @ vt
    var_s = (xs ** 2).sum() / len(src)
    s = float(np.trace(np.diag(d) @ sgn) / var_s) if with_scale and var_s > 0 else 1.0
    t = mu_d - s * r @ mu_s
    return s, r, t


def positions(traj):
    return np.array([np.asarray(T)[:3, 3] for T in traj])


def align_and_rmse(estimated, gt, mode="similarity"):
    """Positional RMSE in metres, optionally after least-squares similarity alignment."""
    if len(estimated) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(estimated)} vs {len(gt)}")
    pe, pg = positions(estimated), positions(gt)
    if mode == "similarity":
        if len(pe) >= 3 or np.ptp(pe, axis=0).any():
            s, r, t = umeyama(pe, pg)
            pe = pe @ (s * r).T + t
    elif mode != "none":
        raise ValueError(f"unknown alignment mode {mode!r}")
    return float(np.sqrt(((pe - pg) ** 2).sum(axis=1).mean()))


def reduction_pct(kp_mean_unfiltered, kp_mean_filtered):
    if kp_mean_unfiltered <= 0:
        raise ValueError("unfiltered keypoint mean must be positive")
    return 100.0 * (1.0 - kp_mean_filtered / kp_mean_unfiltered)


# ------------------------------------------------------------------ pipeline

@dataclass
class FrontendConfig:
    feature: str = "fast"               # fast | shi-tomasi | learned
    fast_threshold: float = 0.08
    fast_nms: int = 5
    st_window: int = 2
    st_top_n: int = 1000
    st_min_quality: float = 0.01
    st_nms: int = 3
    learned_top_n: int = 500
    learned_nms: int = 2
    brief_seed: int = 0
    ratio: float | None = None          # defaults: None for binary, 0.8 for float
    mutual: bool = True
    # integer-pixel corners: a 1 px gate keeps the refit clean
    ransac: RansacConfig = field(default_factory=lambda: RansacConfig(threshold=1.0 / 300.0))
    min_parallax_px: float = 0.1
    max_failure_fraction: float = 0.2


@dataclass
class FrameRecord:
    index: int
    status: str
    n_kp_raw: int
    n_kp: int
    n_matches: int = 0
    n_inliers: int = 0
    f_area_pct: float | None = None
    time_ms: float = 0.0
    kp_outside_mask: int = 0
    note: str = ""


@dataclass
class VOReport:
    rmse_m: float
    rmse_unaligned_m: float
    mean_frame_time_ms: float
    kp_mean: float
    kp_reduction_pct: float | None
    f_area_mean_pct: float | None
    n_frames: int
    n_failed: int
    feature: str
    featureness: bool
    frames: list = field(default_factory=list)

    def to_json(self, path=None, **extra):
        d = asdict(self)
        d.update(extra)
        text = json.dumps(d, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text


def _extract(frame, cfg: FrontendConfig, learned_model, fmaps):
    if cfg.feature == "fast":
        kps = feat.fast_detect(frame, cfg.fast_threshold, cfg.fast_nms)
    elif cfg.feature == "shi-tomasi":
        kps = feat.shi_tomasi(frame, cfg.st_window, cfg.st_top_n, cfg.st_min_quality, cfg.st_nms)
    elif cfg.feature == "learned":
        if learned_model is None:
            raise ValueError("learned features need a detector model")
        out = learned_model.forward(frame)
        kps, desc = feat.learned_detect_describe(learned_model, frame, cfg.learned_top_n, cfg.learned_nms, out)
    else:
        raise ValueError(f"unknown feature type {cfg.feature!r}")
    n_raw = len(kps)
    if fmaps is not None:
        kps, idx = filter_keypoints(kps, fmaps.F)
        if cfg.feature == "learned":
            desc = desc[idx]
    if cfg.feature != "learned":
        desc, keep = feat.brief_describe(frame, kps, cfg.brief_seed)
        kps = kps.subset(keep)
    return kps, desc, n_raw


def run_vo(sequence, frontend: FrontendConfig | None = None, featureness_model=None,
           thresholds: Thresholds | None = None, learned_model=None):
    """Frame-to-frame monocular VO with ground-truth scale injection.

    ``featureness_model`` switches featureness filtering on. Returns the
    estimated trajectory, the report, and the per-frame keypoints that were
    actually used (for auditing against the masks).
    """
    cfg = frontend or FrontendConfig()
    thresholds = thresholds or Thresholds()
    kinv = np.linalg.inv(sequence.intrinsics.matrix())
    ratio = cfg.ratio if cfg.ratio is not None else (0.8 if cfg.feature == "learned" else None)
    traj = [np.eye(4)]
    records = []
    used = []
    last_motion = np.eye(4)
    prev = None
    n_failed = 0
    for k, frame in enumerate(sequence.frames):
        t0 = time.perf_counter()
        fmaps = compute_featureness(featureness_model, frame, thresholds) if featureness_model is not None else None
        kps, desc, n_raw = _extract(frame, cfg, learned_model, fmaps)
        rec = FrameRecord(k, "first", n_raw, len(kps),
                          f_area_pct=mask_area(fmaps.F) if fmaps is not None else None)
        if fmaps is not None:
            xy = np.floor(kps.xy + 0.5).astype(int)
            rec.kp_outside_mask = int((~fmaps.F[xy[:, 1], xy[:, 0]]).sum()) if len(xy) else 0
        if prev is not None:
            gt_rel = np.linalg.inv(sequence.poses_gt[k - 1]) @ sequence.poses_gt[k]
            scale = float(np.linalg.norm(gt_rel[:3, 3]))
            motion, status, note, nm, ni = _relative_pose(prev, (kps, desc), kinv, cfg, ratio, k, scale)
            rec.n_matches, rec.n_inliers, rec.note = nm, ni, note
            if motion is None:
                motion = last_motion
                n_failed += 1
                status = "failed"
            rec.status = status
            traj.append(traj[-1] @ motion)
            last_motion = motion
        rec.time_ms = (time.perf_counter() - t0) * 1000.0
        records.append(rec)
        used.append(kps.xy.copy())
        prev = (kps, desc)

    n_pairs = len(sequence.frames) - 1
    if n_failed > cfg.max_failure_fraction * n_pairs:
        raise VOAbort(f"{n_failed}/{n_pairs} frame pairs failed to track", records)
    report = VOReport(
        rmse_m=align_and_rmse(traj, sequence.poses_gt, "similarity"),
        rmse_unaligned_m=align_and_rmse(traj, sequence.poses_gt, "none"),
        mean_frame_time_ms=float(np.mean([r.time_ms for r in records])),
        kp_mean=float(np.mean([r.n_kp for r in records])),
        kp_reduction_pct=None,
        f_area_mean_pct=(float(np.mean([r.f_area_pct for r in records]))
                         if featureness_model is not None else None),
        n_frames=len(records),
        n_failed=n_failed,
        feature=cfg.feature,
        featureness=featureness_model is not None,
        frames=[asdict(r) for r in records],
    )
    return traj, report, used


def _relative_pose(prev, cur, kinv, cfg, ratio, k, scale):
    (kp_a, d_a), (kp_b, d_b) = prev, cur
    if len(kp_a) < 8 or len(kp_b) < 8:
        return None, "failed", "too few keypoints", 0, 0
    m = feat.match(d_a, d_b, mutual=cfg.mutual, ratio=ratio)
    if len(m) < 8:
        return None, "failed", "too few matches", len(m), 0
    pa, pb = kp_a.xy[m.ia], kp_b.xy[m.ib]
    if np.median(np.linalg.norm(pa - pb, axis=1)) < cfg.min_parallax_px:
        return np.eye(4), "stationary", "no parallax", len(m), len(m)
    x1 = homogeneous(pa) @ kinv.T
    x2 = homogeneous(pb) @ kinv.T
    x1, x2 = x1[:, :2], x2[:, :2]
    rcfg = RansacConfig(cfg.ransac.threshold, cfg.ransac.max_iters, cfg.ransac.confidence,
                        cfg.ransac.seed + k)
    try:
        e, inl = estimate_essential_ransac(x1, x2, rcfg)
        r, t = recover_pose(e, x1[inl], x2[inl])
    except (TrackingFailure, PoseRecoveryError, DegenerateConfigurationError) as exc:
        return None, "failed", str(exc), len(m), 0
    motion = relative_motion(r, t)
    motion[:3, 3] *= scale
    return motion, "ok", "", len(m), len(inl)


def write_trajectory_csv(path, traj):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "tx", "ty", "tz"] + [f"r{i}{j}" for i in range(3) for j in range(3)])
        for k, T in enumerate(traj):
            T = np.asarray(T)
            w.writerow([k] + [repr(float(v)) for v in T[:3, 3]] + [repr(float(v)) for v in T[:3, :3].ravel()])


def read_trajectory_csv(path):
    traj = []
    with open(path) as f:
        for row in csv.DictReader(f):
            T = np.eye(4)
            T[:3, 3] = [float(row[c]) for c in ("tx", "ty", "tz")]
            T[:3, :3] = np.array([float(row[f"r{i}{j}"]) for i in range(3) for j in range(3)]).reshape(3, 3)
            traj.append(T)
    return traj
