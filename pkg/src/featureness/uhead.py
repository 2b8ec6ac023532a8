"""Stage 3: distil MC-dropout variance into a single-pass uncertainty head."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import datagen
from .bayes import VAR_MAX, mc_variance
from .detector import CorpusConfig
from .nn import (Adam, CheckpointError, Model, NonFiniteError, Sequential, bce_with_logits,
                 file_sha256, make_uncertainty_head, read_checkpoint, save_checkpoint, sigmoid,
                 uhead_input)

log = logging.getLogger(__name__)
UHEAD_WIDTHS = [16, 16]


class DetectorHashMismatch(CheckpointError):
    pass


@dataclass
class Stage3Config:
    epochs: int = 30
    batch_images: int = 4
    lr: float = 1e-3
    mc_passes: int = 16
    target_seed: int = 1234
    heldout_seed: int = 98765
    target_mode: str = "soft"        # "soft" | "binary"
    binary_threshold: float = 0.5


def zero_head(c_feat=64, widths=UHEAD_WIDTHS) -> Sequential:
    return make_uncertainty_head(c_feat, widths, rng=None)


def uhead_infer(head: Sequential, feat, prob) -> np.ndarray:
    """U in [0, 1] from backbone features (H, W, C) and probabilities (H, W)."""
    feat = np.asarray(feat)
    prob = np.asarray(prob)
    single = feat.ndim == 3
    if single:
        feat, prob = feat[None], prob[None]
    if feat.shape[:3] != prob.shape:
        raise ValueError(f"feature map {feat.shape[:3]} and probability map {prob.shape} differ")
    expected = head.convs()[0].cin - 1
    if feat.shape[-1] != expected:
        raise ValueError(f"head expects {expected} feature channels, got {feat.shape[-1]}")
    dtype = head.convs()[0].weight.dtype
    z = head.forward(uhead_input(feat.astype(dtype), prob), stop_before_last=True)[..., 0]
    u = sigmoid(z)
    return u[0] if single else u


def variance_to_target(var) -> np.ndarray:
    v = np.asarray(var, dtype=np.float64)
    if (v < 0).any():
        raise ValueError("variance must be non-negative")
    return np.minimum(1.0, v / VAR_MAX)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def attach_head(detector: Model, head: Sequential | None = None) -> Model:
    """Deterministic detector plus uncertainty head in one model."""
    arch = {**detector.arch, "dropout_rate": None, "uhead": list(UHEAD_WIDTHS)}
    full = Model(arch, dtype=detector.dtype, stage="stage3", init="zeros")
    params = {k: v for k, v in detector.params().items() if not k.startswith("uncertainty.")}
    if head is not None:
        params.update(head.params())
    else:
        params.update(full.uncertainty_head.params())
    full.load_params(params)
    return full


def build_targets(bayes_model: Model, images, passes, seed, mode="soft", threshold=0.5):
    out = []
    for i, img in enumerate(images):
        _, var = mc_variance(bayes_model, img, passes, seed + i)
        t = variance_to_target(var)
        if mode == "binary":
            t = (t >= threshold).astype(np.float64)
        out.append(t.astype(np.float32))
    return np.stack(out)


def _det_outputs(detector: Model, imgs):
    out = detector.forward(imgs, descriptors=False)
    return out["feat"], out["prob"]


def heldout_pearson(detector: Model, head: Sequential, bayes_model: Model, images, passes=16, seed=98765):
    """Pearson correlation of U against freshly sampled MC-variance targets."""
    us, ts = [], []
    for i, img in enumerate(images):
        feat, prob = _det_outputs(detector, img[None])
        us.append(uhead_infer(head, feat[0], prob[0]))
        _, var = mc_variance(bayes_model, img, passes, seed + 7919 * i)
        ts.append(variance_to_target(var))
    return pearson(np.concatenate([u.ravel() for u in us]), np.concatenate([t.ravel() for t in ts]))


def stage3_images(rng, corpus_cfg: CorpusConfig, n):
    """Training imagery for the head: raw textures and photometric/warped variants."""
    imgs = datagen.gen_corpus(rng, n, (corpus_cfg.size, corpus_cfg.size))
    out = []
    for img in imgs:
        pair = datagen.gen_pair(rng, img, corpus_cfg.photometric)
        out.append(img if rng.random() < 0.5 else np.where(pair.valid_b, pair.img_b, img).astype(np.float32))
    return out


def train_stage3(detector: Model, bayes_model: Model, corpus_cfg: CorpusConfig | None = None,
                 cfg: Stage3Config | None = None, rng: np.random.Generator | None = None,
                 seed: int = 0, on_epoch=None):
    """Fit the uncertainty head to MC-variance targets; the detector stays frozen."""
    corpus_cfg = corpus_cfg or CorpusConfig()
    cfg = cfg or Stage3Config()
    rng = rng if rng is not None else np.random.default_rng(seed)
    if not bayes_model.is_bayesian:
        raise ValueError("stage 3 needs the stage-2 Bayesian model for supervision")
    c_feat = detector.arch["backbone"][-1]
    head = make_uncertainty_head(c_feat, UHEAD_WIDTHS, rng=np.random.default_rng(rng.integers(2**31)))
    images = stage3_images(rng, corpus_cfg, corpus_cfg.n_images)
    held = stage3_images(np.random.default_rng(rng.integers(2**63)), corpus_cfg, corpus_cfg.n_heldout)
    targets = build_targets(bayes_model, images, cfg.mc_passes, cfg.target_seed,
                            cfg.target_mode, cfg.binary_threshold)
    # detector outputs are fixed, so compute them once per image
    inputs = []
    for s in range(0, len(images), cfg.batch_images):
        feat, prob = _det_outputs(detector, np.stack(images[s:s + cfg.batch_images]))
        inputs.append(uhead_input(feat, prob))
    inputs = np.concatenate(inputs)

    opt = Adam(lr=cfg.lr)
    rows = []
    initial = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        losses = []
        for s in range(0, len(order), cfg.batch_images):
            idx = np.sort(order[s:s + cfg.batch_images])
            for c in head.convs():
                c.zero_grad()
            z = head.forward(inputs[idx], keep_cache=True, stop_before_last=True)[..., 0]
            t = targets[idx]
            loss = float(bce_with_logits(z.astype(np.float64), t).mean())
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite stage-3 loss at epoch {epoch}")
            g = ((sigmoid(z.astype(np.float64)) - t) / t.size)[..., None].astype(z.dtype)
            head.backward(g, skip_last=True)
            opt.step(head.params(), head.grads())
            losses.append(loss)
            initial = loss if initial is None else initial
        mean = float(np.mean(losses))
        row = {"epoch": epoch, "bce": mean}
        if epoch == cfg.epochs - 1 or (epoch + 1) % 5 == 0:
            row["pearson"] = heldout_pearson(detector, head, bayes_model, held, cfg.mc_passes, cfg.heldout_seed)
        rows.append(row)
        log.info("stage3 epoch %d bce %.5f pearson %s", epoch, mean, row.get("pearson"))
        if mean > 10 * initial:
            raise NonFiniteError(f"stage-3 training diverged at epoch {epoch}")
        if on_epoch is not None:
            on_epoch(epoch, row)
    return head, rows


def save_stage3(head_model: Model, path, detector_checkpoint, extra=None) -> None:
    """Write only the head parameters, bound to the detector checkpoint's SHA-256."""
    meta = {"detector_sha256": file_sha256(detector_checkpoint), **(extra or {})}
    save_checkpoint(head_model, path, stage="stage3", extra=meta, only_prefix="uncertainty.")


def load_featureness_model(detector_checkpoint, head_checkpoint) -> Model:
    """Stage-1 detector + stage-3 head, refusing mismatched pairs."""
    from .nn import load_checkpoint
    stage, cfg, params = read_checkpoint(head_checkpoint)
    if stage != "stage3" or not cfg.get("head_only"):
        raise CheckpointError(f"{head_checkpoint} is not a stage-3 head checkpoint")
    digest = file_sha256(detector_checkpoint)
    if cfg.get("detector_sha256") != digest:
        raise DetectorHashMismatch(
            f"head was trained against detector {cfg.get('detector_sha256')}, got {digest}")
    detector = load_checkpoint(detector_checkpoint)
    full = attach_head(detector)
    merged = {**{k: v for k, v in full.params().items() if not k.startswith("uncertainty.")}, **params}
    full.load_params(merged)
    return full
