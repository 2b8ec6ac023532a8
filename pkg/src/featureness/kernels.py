"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The public names at the bottom of the module resolve to one implementation
according to :data:`featureness._jit.USE_NUMBA`. The ``*_nb`` / ``*_np``
variants stay importable so the two paths can be checked against each other.
"""
import numpy as np

from ._jit import njit, pick

# 16-pixel Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy)
CIRCLE = np.array(
    [(0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
     (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3)],
    dtype=np.int64,
)
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


# ---------------------------------------------------------------- bilinear

@njit
def bilinear_sample_nb(img, xs, ys):
    h, w = img.shape
    n = xs.size
    fx = xs.ravel()
    fy = ys.ravel()
    out = np.zeros(n, dtype=img.dtype)
    valid = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        x = fx[i]
        y = fy[i]
        if not (x >= 0.0 and y >= 0.0 and x <= w - 1 and y <= h - 1):
            continue
        x0 = int(x)
        y0 = int(y)
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        ax = x - x0
        ay = y - y0
        top = img[y0, x0] * (1.0 - ax) + img[y0, x1] * ax
        bot = img[y1, x0] * (1.0 - ax) + img[y1, x1] * ax
        out[i] = top * (1.0 - ay) + bot * ay
        valid[i] = True
    return out.reshape(xs.shape), valid.reshape(xs.shape)


def bilinear_sample_np(img, xs, ys):
    h, w = img.shape
    valid = (xs >= 0) & (ys >= 0) & (xs <= w - 1) & (ys <= h - 1)
    x = np.where(valid, xs, 0.0)
    y = np.where(valid, ys, 0.0)
    x0 = x.astype(np.int64)
    y0 = y.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = x - x0
    ay = y - y0
    top = img[y0, x0] * (1.0 - ax) + img[y0, x1] * ax
    bot = img[y1, x0] * (1.0 - ax) + img[y1, x1] * ax
    out = (top * (1.0 - ay) + bot * ay).astype(img.dtype)
    out[~valid] = 0
    return out, valid


# ---------------------------------------------------------------- FAST-9

@njit
def fast_score_nb(img, t, arc):
    h, w = img.shape
    score = np.zeros((h, w), dtype=np.float64)
    ring = np.empty(16, dtype=np.float64)
    for y in range(3, h - 3):
        for x in range(3, w - 3):
            p = img[y, x]
            for k in range(16):
                ring[k] = img[y + CIRCLE[k, 1], x + CIRCLE[k, 0]]
            best = 0.0
            for sign in (1.0, -1.0):
                # walk the ring twice to catch arcs that wrap past index 15
                run = 0
                acc = 0.0
                for k in range(32):
                    d = sign * (ring[k % 16] - p)
                    if d > t:
                        run += 1
                        acc += d
                        if run > 16:
                            # full circle: drop the element leaving the window
                            acc -= sign * (ring[(k - 16) % 16] - p)
                            run = 16
                        if run >= arc and acc > best:
                            best = acc
                    else:
                        run = 0
                        acc = 0.0
            score[y, x] = best
    return score


def fast_score_np(img, t, arc):
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    score = np.zeros((h, w))
    if h < 7 or w < 7:
        return score
    core = img[3:h - 3, 3:w - 3]
    ring = np.stack(
        [img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in CIRCLE], axis=0
    )
    best = np.zeros_like(core)
    for sign in (1.0, -1.0):
        d = sign * (ring - core[None])
        ok = d > t
        # every window of `arc`..16 contiguous ring positions, with wraparound
        for length in range(arc, 17):
            for start in range(16):
                idx = [(start + j) % 16 for j in range(length)]
                hit = ok[idx].all(axis=0)
                if hit.any():
                    s = np.where(hit, d[idx].sum(axis=0), 0.0)
                    np.maximum(best, s, out=best)
    score[3:h - 3, 3:w - 3] = best
    return score


# ---------------------------------------------------------------- greedy NMS

@njit
def greedy_nms_nb(ys, xs, h, w, radius, limit):
    """Accept candidates in the given order unless a kept point is within radius."""
    blocked = np.zeros((h, w), dtype=np.bool_)
    keep = np.empty(ys.size, dtype=np.int64)
    n = 0
    for i in range(ys.size):
        y = ys[i]
        x = xs[i]
        if blocked[y, x]:
            continue
        keep[n] = i
        n += 1
        if limit > 0 and n >= limit:
            break
        for yy in range(max(0, y - radius), min(h, y + radius + 1)):
            for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                blocked[yy, xx] = True
    return keep[:n]


def greedy_nms_np(ys, xs, h, w, radius, limit):
    blocked = np.zeros((h, w), dtype=bool)
    keep = []
    for i, (y, x) in enumerate(zip(ys.tolist(), xs.tolist())):
        if blocked[y, x]:
            continue
        keep.append(i)
        if limit > 0 and len(keep) >= limit:
            break
        blocked[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1] = True
    return np.asarray(keep, dtype=np.int64)


# ---------------------------------------------------------------- Hamming

@njit
def hamming_matrix_nb(a, b):
    n, nbytes = a.shape
    m = b.shape[0]
    out = np.empty((n, m), dtype=np.int64)
    for i in range(n):
        for j in range(m):
            s = 0
            for k in range(nbytes):
                s += _POPCOUNT[a[i, k] ^ b[j, k]]
            out[i, j] = s
    return out


def hamming_matrix_np(a, b):
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.int64)
    # chunk rows to bound the (rows, m, bytes) intermediate
    step = max(1, 4_000_000 // max(1, b.size))
    for s in range(0, a.shape[0], step):
        x = np.bitwise_xor(a[s:s + step, None, :], b[None, :, :])
        out[s:s + step] = _POPCOUNT[x].sum(axis=-1, dtype=np.int64)
    return out


bilinear_sample = pick(bilinear_sample_nb, bilinear_sample_np)
fast_score = pick(fast_score_nb, fast_score_np)
greedy_nms = pick(greedy_nms_nb, greedy_nms_np)
hamming_matrix = pick(hamming_matrix_nb, hamming_matrix_np)
