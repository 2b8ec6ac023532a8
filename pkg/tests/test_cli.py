"""End-to-end CLI runs on a tiny configuration."""
import json
import os
from pathlib import Path

import numpy as np
import pytest

from featureness import cli, nn
from featureness.imgcore import read_image
from featureness.vo import reduction_pct

TINY = {
    "data": {"n_images": 4, "size": 32, "n_heldout": 2,
             "sequence": {"n_frames": 6}},
    "train1": {"epochs": 1, "n_corr": 64, "eval_top_k": 20},
    "train2": {"epochs": 1, "n_corr": 64, "eval_top_k": 20},
    "train3": {"epochs": 1, "batch_images": 2, "mc_passes": 2},
}


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """gen-data and the three training rounds, run once for the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "run"
    base = ["--config", str(cfg), "--seed", "3", "--out", str(out)]
    assert cli.main(["gen-data", *base]) == 0
    for stage in (1, 2, 3):
        assert cli.main(["train", "--stage", str(stage), *base]) == 0
    return root, cfg, out, base


def test_config_rejects_unknown_keys(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train1": {"epochs": 1, "bogus": 2}}))
    with pytest.raises(cli.ConfigError, match="bogus"):
        cli.load_config(f)
    f.write_text(json.dumps({"nosuchsection": {}}))
    with pytest.raises(cli.ConfigError):
        cli.load_config(f)


def test_config_defaults_and_relative_paths(tmp_path):
    cfg = cli.load_config(None)
    assert cfg.data.n_images == 256 and cfg.data.sequence.n_frames == 100
    assert cfg.featureness.sigma_t == 0.10 and cfg.featureness.p_t == 0.0
    f = tmp_path / "sub" / "c.json"
    f.parent.mkdir()
    f.write_text(json.dumps({"featureness": {"detector": "ckpt/d.pixr"}, "vo": {"sequence_dir": "/abs/seq"}}))
    cfg = cli.load_config(f)
    assert Path(cfg.featureness.detector) == f.parent.resolve() / "ckpt" / "d.pixr"
    assert cfg.vo.sequence_dir == "/abs/seq"


def test_derived_streams_are_fixed_and_distinct():
    a = cli.derive_rng(7, "train1").random(4)
    assert np.array_equal(a, cli.derive_rng(7, "train1").random(4))
    assert not np.array_equal(a, cli.derive_rng(7, "train2").random(4))
    assert not np.array_equal(a, cli.derive_rng(8, "train1").random(4))


def test_gen_data_is_byte_identical(run, tmp_path, capsys):
    root, cfg, out, _ = run
    again = tmp_path / "again"
    assert cli.main(["gen-data", "--config", str(cfg), "--seed", "3", "--out", str(again)]) == 0
    res = kv(capsys.readouterr().out)
    assert res["corpus_images"] == "4" and res["frames"] == "6"
    for sub in ("data/corpus.npy", "data/sequence/calib.txt", "data/sequence/poses.txt",
                "data/sequence_clean/poses.txt", "data/sequence/image_0/000005.png"):
        assert (again / sub).read_bytes() == (out / sub).read_bytes(), sub


def test_gen_data_unwritable_output_fails(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen-data", "--out", str(blocker / "run")]) != 0
    assert "error=" in capsys.readouterr().err


def test_stage_tags_and_metrics(run):
    _, _, out, _ = run
    for stage in (1, 2, 3):
        stage_tag, _, _ = nn.read_checkpoint(out / f"stage{stage}.pixr")
        assert stage_tag == f"stage{stage}"
        assert (out / f"stage{stage}_metrics.csv").is_file()


def test_stage3_without_stage2_names_missing_checkpoint(run, tmp_path, capsys):
    _, cfg, out, _ = run
    fresh = tmp_path / "fresh"
    fresh.mkdir()
    (fresh / "stage1.pixr").write_bytes((out / "stage1.pixr").read_bytes())
    code = cli.main(["train", "--stage", "3", "--config", str(cfg), "--out", str(fresh)])
    assert code != 0
    assert "stage2.pixr" in capsys.readouterr().err


def test_training_is_deterministic(run, tmp_path):
    _, cfg, out, _ = run
    other = tmp_path / "other"
    assert cli.main(["train", "--stage", "1", "--config", str(cfg), "--seed", "3", "--out", str(other)]) == 0
    assert (other / "stage1.pixr").read_bytes() == (out / "stage1.pixr").read_bytes()


def test_infer_writes_maps(run, capsys):
    _, cfg, out, base = run
    image = out / "data" / "corpus" / "000000.png"
    infer_out = out.parent / "infer"
    assert cli.main(["infer", str(image), "--config", str(cfg), "--out", str(infer_out),
                     "--detector", str(out / "stage1.pixr"), "--head", str(out / "stage3.pixr"),
                     "--sigma-t", "0.15"]) == 0
    res = kv(capsys.readouterr().out)
    area = float(res["mask_area"])
    assert 0.0 <= area <= 100.0
    for key in ("P", "U", "F"):
        assert any(k.startswith(key) for k in res), res
    files = [v for v in res.values() if v.endswith(".png")]
    assert files and all(os.path.isfile(f) for f in files)


def test_infer_vacuous_sigma_keeps_every_positive_pixel(run, capsys):
    _, cfg, out, _ = run
    image = out / "data" / "corpus" / "000001.png"
    infer_out = out.parent / "infer_vacuous"
    assert cli.main(["infer", str(image), "--config", str(cfg), "--out", str(infer_out),
                     "--detector", str(out / "stage1.pixr"), "--head", str(out / "stage3.pixr"),
                     "--sigma-t", "1.0"]) == 0
    capsys.readouterr()
    from featureness.featuremask import Thresholds, compute_featureness
    from featureness.uhead import load_featureness_model
    model = load_featureness_model(out / "stage1.pixr", out / "stage3.pixr")
    maps = compute_featureness(model, read_image(image), Thresholds(0.0, 1.0))
    assert np.array_equal(maps.F, maps.P > 0)


def test_infer_missing_checkpoint_names_path(run, tmp_path, capsys):
    _, cfg, out, _ = run
    image = out / "data" / "corpus" / "000000.png"
    missing = tmp_path / "nope.pixr"
    code = cli.main(["infer", str(image), "--config", str(cfg), "--out", str(tmp_path),
                     "--detector", str(missing), "--head", str(out / "stage3.pixr")])
    assert code != 0
    assert str(missing) in capsys.readouterr().err


def test_vo_pair_and_report_round_trip(run, capsys):
    _, cfg, out, base = run
    assert cli.main(["vo", *base, "--featureness", "both", "--sigma-t", "1.0"]) == 0
    res = kv(capsys.readouterr().out)
    assert "comparison" in res
    for tag in ("fast_off", "fast_on"):
        assert float(res[f"{tag}.rmse_m"]) >= 0.0
        assert Path(res[f"{tag}.trajectory"]).is_file()
    reports = [res["fast_off.report"], res["fast_on.report"]]
    csv_path = out / "table.csv"
    assert cli.main(["report", *reports, "--csv", str(csv_path)]) == 0
    text = capsys.readouterr().out
    assert "RMSE (m)" in text and "KP_mean^%" in text
    rows = cli.read_report_csv(csv_path.read_text())
    assert rows == cli.report_rows(reports)
    off = json.loads(Path(reports[0]).read_text())
    on = json.loads(Path(reports[1]).read_text())
    assert float(rows[0]["KP_mean^%"]) == reduction_pct(off["kp_mean"], on["kp_mean"])
    # one report alone leaves the reduction blank
    single = cli.report_rows(reports[:1])
    assert single[0]["KP_mean^%"] == "" and single[0]["RMSE off (m)"] == ""


def test_report_reduction_arithmetic(tmp_path):
    files = []
    for on, kp in ((False, 752.34), (True, 342.89)):
        f = tmp_path / f"r{int(on)}.json"
        f.write_text(json.dumps({"feature": "brisk", "featureness": on, "rmse_m": 1.0,
                                 "mean_frame_time_ms": 5.0, "kp_mean": kp}))
        files.append(f)
    row = cli.report_rows(files)[0]
    assert abs(float(row["KP_mean^%"]) - 54.42) <= 0.01


def test_report_missing_file_fails(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path / "none.json")]) != 0
    assert "none.json" in capsys.readouterr().err
