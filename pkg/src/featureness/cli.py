"""Command-line front end: gen-data, train, infer, vo, report.

Every command prints machine-readable ``key=value`` lines on stdout and
exits non-zero when something could not be written.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen, vo
from .bayes import BayesConfig, Stage2TrainConfig, bayesify, train_stage2
from .datagen import PhotometricConfig, SequenceConfig
from .detector import CorpusConfig, TrainConfig, train_stage1, write_metrics
from .featuremask import Thresholds, compute_featureness, export_heatmaps, mask_area
from .imgcore import read_image, write_image
from .nn import load_checkpoint, save_checkpoint
from .uhead import Stage3Config, attach_head, load_featureness_model, save_stage3, train_stage3

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class PrerequisiteError(FileNotFoundError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class DataSection:
    n_images: int = 256
    size: int = 96
    n_heldout: int = 16
    photometric: PhotometricConfig = field(default_factory=PhotometricConfig)
    sequence: SequenceConfig = field(default_factory=SequenceConfig)
    zone_fraction: float = 0.2      # unreliable zone for the second rendered sequence


@dataclass
class Train2Section(Stage2TrainConfig):
    dropout_rate: float = 0.2
    kl_weight: float = 1e-5


@dataclass
class FeaturenessSection:
    p_t: float = 0.0
    sigma_t: float = 0.10
    prob_mode: str | None = None
    detector: str | None = None     # checkpoint paths; default to <out>/stage1.pixr, <out>/stage3.pixr
    head: str | None = None


@dataclass
class VOSection(vo.FrontendConfig):
    sequence_dir: str | None = None


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    train1: TrainConfig = field(default_factory=TrainConfig)
    train2: Train2Section = field(default_factory=Train2Section)
    train3: Stage3Config = field(default_factory=Stage3Config)
    featureness: FeaturenessSection = field(default_factory=FeaturenessSection)
    vo: VOSection = field(default_factory=VOSection)


PATH_FIELDS = {("featureness", "detector"), ("featureness", "head"), ("vo", "sequence_dir")}


def _build(cls, values, where, base=None):
    """Dataclass ``cls`` from a dict layered over ``base``; unknown keys are rejected."""
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    base = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, v in values.items():
        current = getattr(base, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), v, f"{where}.{name}", current)
        elif isinstance(current, tuple) and isinstance(v, list):
            kwargs[name] = tuple(v)
        else:
            kwargs[name] = v
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path=None) -> RunConfig:
    """RunConfig from a JSON file; relative paths resolve against the file's directory."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = _build(RunConfig, raw, "config")
    base = path.resolve().parent
    for section, name in PATH_FIELDS:
        sec = getattr(cfg, section)
        v = getattr(sec, name)
        if v is not None and not Path(v).is_absolute():
            setattr(sec, name, str(base / v))
    return cfg


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Independent stream per pipeline stage, all fanned out from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


def corpus_config(cfg: RunConfig) -> CorpusConfig:
    d = cfg.data
    return CorpusConfig(d.n_images, d.size, d.n_heldout, d.photometric)


# ------------------------------------------------------------------ layout

def paths(out):
    out = Path(out)
    return {
        "corpus": out / "data" / "corpus.npy",
        "corpus_png": out / "data" / "corpus",
        "sequence": out / "data" / "sequence",
        "sequence_clean": out / "data" / "sequence_clean",
        "stage1": out / "stage1.pixr",
        "stage2": out / "stage2.pixr",
        "stage3": out / "stage3.pixr",
    }


def _emit(**kv):
    for k, v in kv.items():
        print(f"{k}={v}")


def _require(*files):
    for f in files:
        if not Path(f).is_file():
            raise PrerequisiteError(f"missing prerequisite checkpoint: {f}")


# ------------------------------------------------------------------ commands

def cmd_gen_data(cfg: RunConfig, seed: int, out) -> dict:
    p = paths(out)
    d = cfg.data
    corpus = datagen.gen_corpus(derive_rng(seed, "data.corpus"), d.n_images, (d.size, d.size))
    p["corpus_png"].mkdir(parents=True, exist_ok=True)
    np.save(p["corpus"], np.stack(corpus))
    for i, img in enumerate(corpus):
        write_image(p["corpus_png"] / f"{i:06d}.png", img)

    clean = datagen.render_sequence(dataclasses.replace(d.sequence, zones=[]),
                                    derive_rng(seed, "data.sequence"))
    datagen.write_kitti(clean, p["sequence_clean"])
    seq_cfg = d.sequence
    if d.zone_fraction > 0 and not seq_cfg.zones:
        seq_cfg = dataclasses.replace(
            seq_cfg, zones=[datagen.zone_covering(d.zone_fraction, seq_cfg.height, seq_cfg.width)])
    zoned = datagen.render_sequence(seq_cfg, derive_rng(seed, "data.sequence"))
    datagen.write_kitti(zoned, p["sequence"])
    res = {"corpus_images": len(corpus), "corpus": p["corpus"], "sequence": p["sequence"],
           "sequence_clean": p["sequence_clean"], "frames": len(zoned.frames)}
    _emit(**res)
    return res


def _load_corpus(cfg, seed, out):
    f = paths(out)["corpus"]
    if f.is_file():
        return list(np.load(f))
    d = cfg.data
    return datagen.gen_corpus(derive_rng(seed, "data.corpus"), d.n_images, (d.size, d.size))


def cmd_train(stage: int, cfg: RunConfig, seed: int, out) -> dict:
    p = paths(out)
    Path(out).mkdir(parents=True, exist_ok=True)
    ccfg = corpus_config(cfg)
    if stage == 1:
        model, rows = train_stage1(ccfg, cfg.train1, derive_rng(seed, "train1"),
                                   corpus=_load_corpus(cfg, seed, out))
        save_checkpoint(model, p["stage1"], "stage1",
                        extra={"train": dataclasses.asdict(cfg.train1), "seed": seed})
        ckpt = p["stage1"]
    elif stage == 2:
        _require(p["stage1"])
        t2 = cfg.train2
        bcfg = BayesConfig(t2.dropout_rate, t2.kl_weight)
        model = bayesify(load_checkpoint(p["stage1"]), bcfg)
        tcfg = Stage2TrainConfig(**{f.name: getattr(t2, f.name)
                                    for f in dataclasses.fields(Stage2TrainConfig)})
        model, rows = train_stage2(model, ccfg, tcfg, bcfg, derive_rng(seed, "train2"),
                                   corpus=_load_corpus(cfg, seed, out))
        save_checkpoint(model, p["stage2"], "stage2",
                        extra={"train": dataclasses.asdict(t2), "seed": seed})
        ckpt = p["stage2"]
    elif stage == 3:
        _require(p["stage1"], p["stage2"])
        detector = load_checkpoint(p["stage1"])
        bayes_model = load_checkpoint(p["stage2"])
        head, rows = train_stage3(detector, bayes_model, ccfg, cfg.train3, derive_rng(seed, "train3"))
        save_stage3(attach_head(detector, head), p["stage3"], p["stage1"],
                    extra={"train": dataclasses.asdict(cfg.train3), "seed": seed})
        ckpt = p["stage3"]
    else:
        raise ConfigError(f"unknown stage {stage}")
    metrics = Path(out) / f"stage{stage}_metrics.csv"
    if stage == 3:
        cols = ["epoch", "bce", "pearson"]
        write_metrics(rows, metrics, cols)
    else:
        write_metrics(rows, metrics)
    res = {"stage": f"stage{stage}", "checkpoint": ckpt, "metrics": metrics, "epochs": len(rows)}
    last = rows[-1] if rows else {}
    for k in ("roundtrip_success", "pearson"):
        if last.get(k) is not None:
            res[k] = f"{last[k]:.6f}"
    _emit(**res)
    return res


def _thresholds(cfg: RunConfig) -> Thresholds:
    f = cfg.featureness
    return Thresholds(f.p_t, f.sigma_t, f.prob_mode)


def _featureness_model(cfg: RunConfig, out):
    p = paths(out)
    det = cfg.featureness.detector or p["stage1"]
    head = cfg.featureness.head or p["stage3"]
    for f in (det, head):
        if not Path(f).is_file():
            raise PrerequisiteError(f"checkpoint not found: {f}")
    return load_featureness_model(det, head)


def cmd_infer(image, cfg: RunConfig, out) -> dict:
    if not Path(image).is_file():
        raise FileNotFoundError(f"image not found: {image}")
    model = _featureness_model(cfg, out)
    maps = compute_featureness(model, read_image(image), _thresholds(cfg))
    files = export_heatmaps(maps, out)
    res = {"mask_area": f"{mask_area(maps.F):.4f}", **{k: v for k, v in files.items()}}
    _emit(**res)
    return res


def _frontend(cfg: RunConfig) -> vo.FrontendConfig:
    names = [f.name for f in dataclasses.fields(vo.FrontendConfig)]
    return vo.FrontendConfig(**{n: getattr(cfg.vo, n) for n in names})


def run_tag(feature, featureness_on):
    return f"{feature}_{'on' if featureness_on else 'off'}"


def cmd_vo(cfg: RunConfig, out, featureness: str = "off", sequence_dir=None) -> dict:
    seq_dir = Path(sequence_dir or cfg.vo.sequence_dir or paths(out)["sequence"])
    if not seq_dir.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {seq_dir}")
    seq = datagen.load_kitti(seq_dir)
    fe = _frontend(cfg)
    learned = load_checkpoint(paths(out)["stage1"]) if fe.feature == "learned" else None
    modes = {"off": [False], "on": [True], "both": [False, True]}[featureness]
    fmodel = _featureness_model(cfg, out) if True in modes else None
    Path(out).mkdir(parents=True, exist_ok=True)
    res = {}
    reports = {}
    for on in modes:
        traj, report, _ = vo.run_vo(seq, fe, fmodel if on else None, _thresholds(cfg), learned)
        tag = run_tag(fe.feature, on)
        tfile = Path(out) / f"trajectory_{tag}.csv"
        rfile = Path(out) / f"report_{tag}.json"
        vo.write_trajectory_csv(tfile, traj)
        report.to_json(rfile, sequence=str(seq_dir), thresholds=dataclasses.asdict(_thresholds(cfg))
                       if on else None)
        reports[on] = rfile
        res.update({f"{tag}.rmse_m": f"{report.rmse_m:.6f}", f"{tag}.kp_mean": f"{report.kp_mean:.2f}",
                    f"{tag}.trajectory": tfile, f"{tag}.report": rfile})
    # a paired run, or an "on" run next to an existing "off" report, yields a comparison row
    off_file = Path(out) / f"report_{run_tag(fe.feature, False)}.json"
    if True in reports and off_file.is_file():
        row = report_rows([off_file, reports[True]])[0]
        res["comparison"] = ",".join(f"{k}:{row[k]}" for k in REPORT_COLUMNS)
    _emit(**res)
    return res


REPORT_COLUMNS = ["feature", "featureness", "RMSE (m)", "RMSE off (m)", "Time (ms)", "KP_mean", "KP_mean^%"]


def report_rows(report_files) -> list:
    """One row per feature type; an off/on pair collapses into a comparison row."""
    groups = {}
    for f in report_files:
        rep = json.loads(Path(f).read_text())
        groups.setdefault(rep["feature"], {})["on" if rep["featureness"] else "off"] = rep
    rows = []
    for feature, g in groups.items():
        main = g.get("on") or g["off"]
        off = g.get("off") if "on" in g else None
        rows.append({
            "feature": feature,
            "featureness": "on" if "on" in g else "off",
            "RMSE (m)": repr(float(main["rmse_m"])),
            "RMSE off (m)": repr(float(off["rmse_m"])) if off else "",
            "Time (ms)": repr(float(main["mean_frame_time_ms"])),
            "KP_mean": repr(float(main["kp_mean"])),
            "KP_mean^%": repr(vo.reduction_pct(off["kp_mean"], main["kp_mean"])) if off else "",
        })
    return rows


def format_table(rows) -> str:
    def short(col, v):
        if v == "" or col in ("feature", "featureness"):
            return v
        return f"{float(v):.{4 if 'RMSE' in col else 2}f}"
    cells = [REPORT_COLUMNS] + [[short(c, r[c]) for c in REPORT_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_report_csv(text) -> list:
    return list(csv.DictReader(io.StringIO(text)))


def cmd_report(report_files, csv_path=None) -> list:
    for f in report_files:
        if not Path(f).is_file():
            raise FileNotFoundError(f"report not found: {f}")
    rows = report_rows(report_files)
    print(format_table(rows))
    if csv_path is not None:
        Path(csv_path).write_text(rows_to_csv(rows))
        _emit(csv=csv_path)
    for r in rows:
        _emit(**{f"{r['feature']}.{k}": r[k] for k in ("RMSE (m)", "KP_mean^%")})
    return rows


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="featureness", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="RunConfig JSON")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="run")

    def thresholds(p):
        p.add_argument("--p-t", type=float)
        p.add_argument("--sigma-t", type=float)
        p.add_argument("--prob-mode", choices=["strict", "inclusive"])
        p.add_argument("--detector", help="stage-1 checkpoint (default <out>/stage1.pixr)")
        p.add_argument("--head", help="stage-3 checkpoint (default <out>/stage3.pixr)")

    common(sub.add_parser("gen-data", help="training corpus + rendered sequences"))
    p = sub.add_parser("train", help="one training round")
    common(p)
    p.add_argument("--stage", type=int, choices=[1, 2, 3], required=True)
    p.add_argument("--epochs", type=int, help="override the stage's epoch count")
    p = sub.add_parser("infer", help="P/U/F maps for one image")
    common(p)
    thresholds(p)
    p.add_argument("image")
    p = sub.add_parser("vo", help="monocular VO over a KITTI-layout sequence")
    common(p)
    thresholds(p)
    p.add_argument("sequence", nargs="?", help="sequence dir (default <out>/data/sequence)")
    p.add_argument("--featureness", choices=["on", "off", "both"], default="off")
    p.add_argument("--feature", choices=["fast", "shi-tomasi", "learned"])
    p = sub.add_parser("report", help="Table-style summary of VO reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--csv", help="also write the table as CSV")
    return ap


def _apply_overrides(cfg: RunConfig, args):
    f = cfg.featureness
    for attr, name in (("p_t", "p_t"), ("sigma_t", "sigma_t"), ("prob_mode", "prob_mode"),
                       ("detector", "detector"), ("head", "head")):
        v = getattr(args, name, None)
        if v is not None:
            setattr(f, attr, v)
    if getattr(args, "feature", None):
        cfg.vo.feature = args.feature
    if getattr(args, "epochs", None) is not None:
        sec = {1: cfg.train1, 2: cfg.train2, 3: cfg.train3}[args.stage]
        sec.epochs = args.epochs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "report":
            cmd_report(args.reports, args.csv)
            return 0
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.seed, args.out)
        elif args.command == "train":
            cmd_train(args.stage, cfg, args.seed, args.out)
        elif args.command == "infer":
            Path(args.out).mkdir(parents=True, exist_ok=True)
            cmd_infer(args.image, cfg, args.out)
        elif args.command == "vo":
            cmd_vo(cfg, args.out, args.featureness, args.sequence)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error={type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
