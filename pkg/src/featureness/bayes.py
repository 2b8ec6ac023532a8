"""Stage 2: Monte-Carlo dropout conversion, KL-regularised retraining, MC variance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import datagen
from .detector import (CorpusConfig, TrainConfig, heldout_pairs, make_silk_objective,
                       run_training)
from .nn import Model

VAR_MAX = 0.25


@dataclass
class BayesConfig:
    dropout_rate: float = 0.2
    kl_weight: float = 1e-5
    mc_passes: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.mc_passes < 2:
            raise ValueError("mc_passes must be >= 2")


def bayesify(model: Model, config: BayesConfig | None = None) -> Model:
    """Copy of ``model`` with a dropout layer after every backbone activation."""
    config = config or BayesConfig()
    if model.is_bayesian:
        raise ValueError("model is already Bayesian")
    arch = {**model.arch, "dropout_rate": config.dropout_rate}
    out = Model(arch, dtype=model.dtype, stage="stage2", init="zeros")
    out.load_params(model.params())
    return out


def kl_proxy(model: Model, beta: float, grad: bool = False) -> float:
    """beta * sum of squared conv weights (biases excluded) over detector layers."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    total = 0.0
    for name in ("backbone", "keypoint", "descriptor"):
        for conv in model.heads()[name].convs():
            total += float((conv.weight.astype(np.float64) ** 2).sum())
            if grad and beta:
                conv.gweight += (2.0 * beta * conv.weight).astype(conv.gweight.dtype)
    return beta * total


@dataclass
class Stage2TrainConfig(TrainConfig):
    # a short, gentle round: every extra epoch under dropout costs this small
    # network some deterministic matching quality
    epochs: int = 1
    lr: float = 1e-5


def train_stage2(model: Model, corpus_cfg: CorpusConfig | None = None,
                 train_cfg: TrainConfig | None = None, bayes_cfg: BayesConfig | None = None,
                 rng: np.random.Generator | None = None, seed: int = 0, on_epoch=None,
                 corpus=None):
    """Retrain a bayesified model on silk + KL proxy with dropout active."""
    if not model.is_bayesian:
        raise ValueError("train_stage2 expects a bayesified model")
    corpus_cfg = corpus_cfg or CorpusConfig()
    train_cfg = train_cfg or Stage2TrainConfig()
    bayes_cfg = bayes_cfg or BayesConfig()
    rng = rng if rng is not None else np.random.default_rng(seed)
    if corpus is None:
        corpus = datagen.gen_corpus(rng, corpus_cfg.n_images, (corpus_cfg.size, corpus_cfg.size))
    heldout = heldout_pairs(np.random.default_rng(rng.integers(2**63)), corpus_cfg)
    beta = bayes_cfg.kl_weight
    objective = make_silk_objective(train_cfg.tau, train_cfg.lambda_kp,
                                    extra=lambda m, grad: kl_proxy(m, beta, grad))
    model.dropout_active = True
    rows = run_training(model, corpus, corpus_cfg.photometric, train_cfg, rng, objective,
                        heldout, on_epoch, dropout=True)
    model.stage = "stage2"
    return model, rows


def pass_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def mc_prob_samples(model: Model, image, passes: int, seed: int = 0) -> np.ndarray:
    """(T, H, W) probability maps from independent dropout streams."""
    if passes < 2:
        raise ValueError("need at least 2 Monte-Carlo passes")
    img = np.asarray(image)
    out = np.empty((passes,) + img.shape[-2:], dtype=np.float64)
    for t in range(passes):
        out[t] = model.forward(img, rng=pass_rng(seed, t), descriptors=False)["prob"][0]
    return out


def population_variance(samples) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(samples, dtype=np.float64)
    mean = s.mean(axis=0)
    var = ((s - mean) ** 2).mean(axis=0)
    return mean, np.clip(var, 0.0, VAR_MAX)


def mc_variance(model: Model, image, passes: int = 16, seed: int = 0):
    """Per-pixel mean and population variance of the keypoint probability."""
    return population_variance(mc_prob_samples(model, image, passes, seed))


def write_variance_grid(path, var) -> None:
    """float32 grid: u32 height, u32 width, then row-major little-endian data."""
    v = np.ascontiguousarray(var, dtype="<f4")
    with open(path, "wb") as f:
        f.write(np.array(v.shape, dtype="<u4").tobytes())
        f.write(v.tobytes())


def read_variance_grid(path) -> np.ndarray:
    data = open(path, "rb").read()
    h, w = np.frombuffer(data[:8], dtype="<u4")
    arr = np.frombuffer(data[8:], dtype="<f4")
    if arr.size != h * w:
        raise ValueError("variance grid size does not match its header")
    return arr.reshape(int(h), int(w)).copy()


def write_variance_png(path, var) -> None:
    from .imgcore import write_image
    write_image(path, np.clip(np.asarray(var) * 4.0, 0.0, 1.0))
