"""Stage 1: self-supervised dense keypoint detector and descriptor.

Descriptors learn through a double-softmax matching likelihood over sampled
ground-truth correspondences; keypoint probabilities learn to predict which
pixels survive round-trip nearest-neighbour matching.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import datagen
from .imgcore import Homography, apply_homography
from .nn import Adam, Model, NonFiniteError, bce_with_logits, sigmoid, train_step

log = logging.getLogger(__name__)


@dataclass
class DenseOutputs:
    prob: np.ndarray    # (H, W)
    desc: np.ndarray    # (H, W, D)
    feat: np.ndarray    # (H, W, C)
    logit: np.ndarray | None = None


@dataclass
class CorrespondenceSet:
    a_xy: np.ndarray         # (N, 2) integer pixels in A
    b_xy: np.ndarray         # (N, 2) true sub-pixel positions in B
    h_ab: Homography | None = None

    @property
    def b_pix(self):
        return np.rint(self.b_xy).astype(np.int64)

    def __len__(self):
        return len(self.a_xy)


def detector_infer(model: Model, image) -> DenseOutputs:
    out = model.forward(image)
    return DenseOutputs(out["prob"][0], out["desc"][0], out["feat"][0], out["logit"][0])


# ------------------------------------------------------------------ matching

def _log_softmax(s, axis):
    m = s.max(axis=axis, keepdims=True)
    return s - m - np.log(np.exp(s - m).sum(axis=axis, keepdims=True))


def double_softmax_match(desc_a, desc_b, tau=0.1):
    """Row-softmax times column-softmax of the similarity matrix scaled by 1/tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = np.asarray(desc_a, dtype=np.float64) @ np.asarray(desc_b, dtype=np.float64).T / tau
    return np.exp(_log_softmax(s, 1) + _log_softmax(s, 0))


def _unique_argmax(sim):
    """Row-wise argmax plus a flag that the maximum is not shared."""
    idx = sim.argmax(axis=1)
    top = sim[np.arange(len(sim)), idx]
    unique = (sim == top[:, None]).sum(axis=1) == 1
    return idx, unique


def round_trip_labels(desc_a, desc_b, query, true_b_xy, pos_b, tol=1.0):
    """1 where a query survives round-trip nearest-neighbour matching.

    ``desc_a`` (Na, D) and ``desc_b`` (Nb, D) are the full candidate sets,
    ``query`` indexes rows of ``desc_a``, ``true_b_xy`` (Nq, 2) holds each
    query's true position in B and ``pos_b`` (Nb, 2) the candidates' positions.
    A label is 1 iff the query's nearest neighbour in B lies within ``tol``
    pixels (per axis) of the true position and that neighbour's nearest
    neighbour in A is the query itself. Ties on either side give 0.
    """
    query = np.asarray(query, dtype=np.int64)
    if query.size == 0:
        raise ValueError("empty correspondence set")
    da = np.asarray(desc_a, dtype=np.float32)
    db = np.asarray(desc_b, dtype=np.float32)
    nn_b, uniq_b = _unique_argmax(da[query] @ db.T)
    close = np.abs(np.asarray(pos_b)[nn_b] - np.asarray(true_b_xy)).max(axis=1) <= tol
    nn_a, uniq_a = _unique_argmax(db[nn_b] @ da.T)
    return (uniq_b & close & uniq_a & (nn_a == query)).astype(np.float32)


def correspondence_round_trip(desc_a, desc_b, corr: CorrespondenceSet, tol=1.0):
    """Round-trip labels of both sides of ``corr``, matched within the set.

    A side: query i's candidates are the B descriptors at the rounded true
    positions of every sampled pixel. B side: the same with roles swapped,
    the true A position coming from the inverse homography.
    """
    ap, bp = corr.a_xy, corr.b_pix
    da = desc_a[ap[:, 1], ap[:, 0]]
    db = desc_b[bp[:, 1], bp[:, 0]]
    q = np.arange(len(corr))
    lab_a = round_trip_labels(da, db, q, corr.b_xy, bp, tol)
    a_true = apply_homography(corr.h_ab.inverse(), bp) if corr.h_ab is not None else ap
    lab_b = round_trip_labels(db, da, q, a_true, ap, tol)
    return lab_a, lab_b


def sample_correspondences(h_ab: Homography, valid_b, shape, n, rng) -> CorrespondenceSet:
    """Uniformly sample A pixels whose rounded image under ``h_ab`` is a valid B pixel."""
    hgt, wid = shape
    ys, xs = np.mgrid[0:hgt, 0:wid]
    a_all = np.stack([xs.ravel(), ys.ravel()], axis=1)
    b_all = apply_homography(h_ab, a_all)
    bp = np.rint(b_all).astype(np.int64)
    inside = (bp[:, 0] >= 0) & (bp[:, 0] < wid) & (bp[:, 1] >= 0) & (bp[:, 1] < hgt)
    ok = np.zeros(len(a_all), dtype=bool)
    ok[inside] = valid_b[bp[inside, 1], bp[inside, 0]]
    cand = np.nonzero(ok)[0]
    if len(cand) == 0:
        raise ValueError("no covisible pixels between the pair")
    pick = rng.choice(cand, size=min(n, len(cand)), replace=False)
    pick.sort()
    return CorrespondenceSet(a_all[pick], b_all[pick], h_ab)


# ------------------------------------------------------------------ loss

@dataclass
class LossParts:
    total: float
    desc: float
    kp: float
    labels: np.ndarray


def silk_loss(out_a: DenseOutputs, out_b: DenseOutputs, corr: CorrespondenceSet,
              tau=0.1, lambda_kp=1.0, labels=None, grads=False):
    """Descriptor matching loss plus weighted keypoint BCE for one pair.

    ``labels`` may be given to freeze the round-trip targets (they are a
    stop-gradient quantity). With ``grads=True`` returns
    ``(LossParts, dlogit_a, dlogit_b, ddesc_a, ddesc_b)``.
    """
    n = len(corr)
    if n == 0:
        raise ValueError("empty correspondence set")
    ap = corr.a_xy
    bp = corr.b_pix
    da = out_a.desc[ap[:, 1], ap[:, 0]].astype(np.float64)
    db = out_b.desc[bp[:, 1], bp[:, 0]].astype(np.float64)
    s = da @ db.T / tau
    lr = _log_softmax(s, 1)
    lc = _log_softmax(s, 0)
    diag = np.arange(n)
    desc_loss = float(-(lr[diag, diag] + lc[diag, diag]).mean())

    if labels is None:
        labels = np.concatenate(correspondence_round_trip(out_a.desc, out_b.desc, corr))
    z = np.concatenate([out_a.logit[ap[:, 1], ap[:, 0]], out_b.logit[bp[:, 1], bp[:, 0]]]).astype(np.float64)
    kp_loss = float(bce_with_logits(z, labels).mean())
    total = desc_loss + lambda_kp * kp_loss
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite silk loss (desc {desc_loss}, kp {kp_loss})")
    parts = LossParts(total, desc_loss, kp_loss, labels)
    if not grads:
        return parts

    ds = ((np.exp(lr) - np.eye(n)) + (np.exp(lc) - np.eye(n))) / n / tau
    g_da = ds @ db
    g_db = ds.T @ da
    ddesc_a = np.zeros(out_a.desc.shape)
    ddesc_b = np.zeros(out_b.desc.shape)
    np.add.at(ddesc_a, (ap[:, 1], ap[:, 0]), g_da)
    np.add.at(ddesc_b, (bp[:, 1], bp[:, 0]), g_db)
    gz = lambda_kp * (sigmoid(z) - labels) / len(z)
    dlogit_a = np.zeros(out_a.prob.shape)
    dlogit_b = np.zeros(out_b.prob.shape)
    np.add.at(dlogit_a, (ap[:, 1], ap[:, 0]), gz[:n])
    np.add.at(dlogit_b, (bp[:, 1], bp[:, 0]), gz[n:])
    return parts, dlogit_a, dlogit_b, ddesc_a, ddesc_b


# ------------------------------------------------------------------ training

@dataclass
class CorpusConfig:
    n_images: int = 256
    size: int = 96
    n_heldout: int = 16
    photometric: datagen.PhotometricConfig = field(default_factory=datagen.PhotometricConfig)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_pairs: int = 4
    lr: float = 1e-3
    n_corr: int = 512
    tau: float = 0.1
    lambda_kp: float = 1.0
    warmup_epochs: int = 3
    eval_top_k: int = 200
    eval_nms: int = 1
    arch: dict = field(default_factory=dict)


@dataclass
class PairBatch:
    pairs: list
    corrs: list
    labels: list | None = None


def make_batch(pairs, n_corr, rng):
    corrs = [sample_correspondences(p.h_ab, p.valid_b, p.img_a.shape, n_corr, rng) for p in pairs]
    return PairBatch(pairs, corrs)


def _valid_a(pair):
    """A pixels whose image under h_ab lands on a valid B pixel."""
    hgt, wid = pair.img_a.shape
    ys, xs = np.mgrid[0:hgt, 0:wid]
    b = np.rint(apply_homography(pair.h_ab, np.stack([xs.ravel(), ys.ravel()], 1))).astype(np.int64)
    inside = (b[:, 0] >= 0) & (b[:, 0] < wid) & (b[:, 1] >= 0) & (b[:, 1] < hgt)
    ok = np.zeros(len(b), dtype=bool)
    ok[inside] = pair.valid_b[b[inside, 1], b[inside, 0]]
    return ok.reshape(hgt, wid)


def pair_mask_source(pairs) -> np.ndarray:
    """Dropout mask sources for a batch stacked as [A_0..A_k-1, B_0..B_k-1].

    A pixels draw their own masks (-1). A B pixel points at the A pixel its
    centre maps to under the inverse homography, so both views of a scene point
    pass through the same sampled network; B pixels with no A preimage draw
    their own.
    """
    k = len(pairs)
    h, w = pairs[0].img_a.shape
    src = np.full((2 * k, h, w), -1, dtype=np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.stack([xs.ravel(), ys.ravel()], 1).astype(np.float64)
    for i, pair in enumerate(pairs):
        a = np.rint(apply_homography(pair.h_ab.inverse(), grid)).astype(np.int64)
        ok = (a[:, 0] >= 0) & (a[:, 0] < w) & (a[:, 1] >= 0) & (a[:, 1] < h)
        src[k + i] = np.where(ok, i * h * w + a[:, 1] * w + a[:, 0], -1).reshape(h, w)
    return src


def make_silk_objective(tau=0.1, lambda_kp=1.0, extra=None):
    """Loss function for :func:`featureness.nn.train_step` over a :class:`PairBatch`.

    ``extra(model, grad)`` adds a parameter-space term (the stage-2 KL proxy).
    The dropout stream, if any, is ``batch.rng``; B pixels reuse the dropout
    draws of their A correspondents (see :func:`pair_mask_source`).
    """
    def loss_fn(model, batch, grad=False):
        imgs = np.stack([p.img_a for p in batch.pairs] + [p.img_b for p in batch.pairs])
        rng = getattr(batch, "rng", None)
        source = pair_mask_source(batch.pairs) if rng is not None and model.dropout_active else None
        out = model.forward(imgs, rng=rng, keep_cache=grad, mask_source=source)
        k = len(batch.pairs)
        total = 0.0
        parts = []
        g_logit = np.zeros(out["logit"].shape)
        g_desc = np.zeros(out["desc"].shape)
        for i, (pair, corr) in enumerate(zip(batch.pairs, batch.corrs)):
            oa = DenseOutputs(out["prob"][i], out["desc"][i], None, out["logit"][i])
            ob = DenseOutputs(out["prob"][k + i], out["desc"][k + i], None, out["logit"][k + i])
            labels = batch.labels[i] if batch.labels is not None else None
            res = silk_loss(oa, ob, corr, tau, lambda_kp, labels=labels, grads=grad)
            p = res[0] if grad else res
            parts.append(p)
            total += p.total / k
            if grad:
                _, gla, glb, gda, gdb = res
                g_logit[i] += gla / k
                g_logit[k + i] += glb / k
                g_desc[i] += gda / k
                g_desc[k + i] += gdb / k
        if grad:
            model.backward(g_logit, g_desc)
        if extra is not None:
            total += extra(model, grad)
        batch.parts = parts
        return total
    return loss_fn


def heldout_pairs(rng, cfg: CorpusConfig):
    imgs = datagen.gen_corpus(rng, cfg.n_heldout, (cfg.size, cfg.size))
    return [datagen.gen_pair(rng, im, cfg.photometric) for im in imgs]


def top_keypoints(prob, mask, k, nms_radius):
    from .features import nms_points
    score = np.where(mask, prob, -np.inf)
    return nms_points(score, nms_radius, k)


def roundtrip_success(model, pairs, top_k=200, nms_radius=1, random_desc_rng=None):
    """Fraction of the top-k keypoints of A that survive round-trip matching.

    Candidates in B are the true correspondents of the keypoints, so the
    chance level is about 1/k. With ``random_desc_rng`` the descriptors are
    replaced by random unit vectors, which gives that baseline.
    """
    hits = total = 0
    for pair in pairs:
        out = model.forward(np.stack([pair.img_a, pair.img_b]))
        da, db = out["desc"][0], out["desc"][1]
        if random_desc_rng is not None:
            da = random_desc_rng.standard_normal(da.shape).astype(np.float32)
            db = random_desc_rng.standard_normal(db.shape).astype(np.float32)
            da /= np.linalg.norm(da, axis=-1, keepdims=True)
            db /= np.linalg.norm(db, axis=-1, keepdims=True)
        kps = top_keypoints(out["prob"][0], _valid_a(pair), top_k, nms_radius)
        a_xy = kps.astype(np.int64)
        corr = CorrespondenceSet(a_xy, apply_homography(pair.h_ab, a_xy), pair.h_ab)
        lab = correspondence_round_trip(da, db, corr)[0]
        hits += lab.sum()
        total += len(lab)
    return float(hits / max(total, 1))


def evaluate_loss(model, pairs, rng, cfg: TrainConfig):
    """Mean silk loss over held-out pairs with deterministic correspondences."""
    fn = make_silk_objective(cfg.tau, cfg.lambda_kp)
    vals = []
    for i in range(0, len(pairs), cfg.batch_pairs):
        batch = make_batch(pairs[i:i + cfg.batch_pairs], cfg.n_corr, rng)
        vals.append(fn(model, batch, grad=False))
    return float(np.mean(vals))


METRIC_COLUMNS = ["epoch", "silk_loss", "desc_loss", "kp_loss", "roundtrip_success"]


def write_metrics(rows, path, columns=METRIC_COLUMNS):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})


def run_training(model, corpus, photometric, cfg: TrainConfig, rng, objective,
                 heldout=None, on_epoch=None, dropout=False):
    """Shared epoch loop for stages 1 and 2; returns per-epoch metric rows."""
    opt = Adam(lr=cfg.lr)
    rows = []
    initial = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        sums = np.zeros(3)
        steps = 0
        for s in range(0, len(order), cfg.batch_pairs):
            pairs = [datagen.gen_pair(rng, corpus[j], photometric) for j in order[s:s + cfg.batch_pairs]]
            batch = make_batch(pairs, cfg.n_corr, rng)
            if dropout:
                batch.rng = np.random.default_rng([int(rng.integers(2**63)), epoch, s])
            loss = train_step(model, batch, objective, opt)
            if initial is None:
                initial = loss
            sums += [loss, np.mean([p.desc for p in batch.parts]), np.mean([p.kp for p in batch.parts])]
            steps += 1
        mean = sums / max(steps, 1)
        row = {"epoch": epoch, "silk_loss": mean[0], "desc_loss": mean[1], "kp_loss": mean[2]}
        if heldout:
            row["roundtrip_success"] = roundtrip_success(model, heldout, cfg.eval_top_k, cfg.eval_nms)
        rows.append(row)
        log.info("epoch %d loss %.4f desc %.4f kp %.4f rt %s", epoch, *mean, row.get("roundtrip_success"))
        if mean[0] > 10 * initial:
            raise NonFiniteError(f"training diverged at epoch {epoch}: loss {mean[0]:.4g} vs initial {initial:.4g}")
        if on_epoch is not None:
            on_epoch(epoch, row)
    return rows


def train_stage1(corpus_cfg: CorpusConfig | None = None, train_cfg: TrainConfig | None = None,
                 rng: np.random.Generator | None = None, seed: int = 0, on_epoch=None,
                 corpus=None):
    """Train the deterministic detector; returns (model, metric rows).

    ``corpus`` overrides the generated training images (a list of 2-D float32
    arrays), e.g. a corpus materialised on disk by ``gen-data``.
    """
    corpus_cfg = corpus_cfg or CorpusConfig()
    train_cfg = train_cfg or TrainConfig()
    rng = rng if rng is not None else np.random.default_rng(seed)
    model = Model(train_cfg.arch, seed=int(rng.integers(2**31)))
    if corpus is None:
        corpus = datagen.gen_corpus(rng, corpus_cfg.n_images, (corpus_cfg.size, corpus_cfg.size))
    heldout = heldout_pairs(np.random.default_rng(rng.integers(2**63)), corpus_cfg)
    objective = make_silk_objective(train_cfg.tau, train_cfg.lambda_kp)
    rows = run_training(model, corpus, corpus_cfg.photometric, train_cfg, rng, objective,
                        heldout, on_epoch)
    model.stage = "stage1"
    return model, rows


def config_dict(obj):
    return asdict(obj)
