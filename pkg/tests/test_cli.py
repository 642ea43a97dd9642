import csv
import json

import numpy as np
import pytest

from nlosloc.cli import main, read_estimates
from nlosloc.config import ExperimentConfig, load_config, parse_config
from nlosloc.dataio import load_scene, read_manifest
from nlosloc.errors import ConfigInvalid
from nlosloc.metrics import localization_error
from nlosloc.sampling import load_mask_txt

ORACLE_CONFIG = """
[scenes]
grid_size = 32
buildings_min = 2
buildings_max = 5
train_count = 0
test_count = 5

[sampling]
strategies = edge, vertex, budget_matched_random@edge, hybrid

[model]
denoiser = oracle
steps = 10
ensemble = 2

[localize]
estimators = argmax, topk_wc, trc, lbc, ls, awls, mbe, nls
"""

STAGES = ("synth", "sample", "reconstruct", "localize", "evaluate")


def run_pipeline(cfg_path, out, *extra, stages=STAGES):
    for stage in stages:
        assert main([stage, "--config", str(cfg_path), "--out", str(out), *extra]) == 0, stage


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def oracle_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("oracle")
    cfg_path = root / "run.ini"
    cfg_path.write_text(ORACLE_CONFIG)
    run_pipeline(cfg_path, root / "a", "--seed", "7")
    return cfg_path, root / "a"


def test_oracle_pipeline_reconstructs(oracle_run):
    _, out = oracle_run
    rows = read_csv(out / "report.csv")
    nmse = [float(r["value"]) for r in rows if r["metric"] == "NMSE"]
    assert len(nmse) == 5 * 4 and max(nmse) < 1e-3
    assert (out / "summary.txt").read_text().splitlines()[2].startswith("Method")


def test_rerun_is_byte_identical(oracle_run, tmp_path):
    cfg_path, out = oracle_run
    run_pipeline(cfg_path, tmp_path / "b", "--seed", "7")
    for name in ("manifest.csv", "estimates.csv", "report.csv", "summary.txt"):
        assert (out / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    mask = "samples/budget_matched_random-edge/scene0000.rss.csv"
    assert (out / mask).read_bytes() == (tmp_path / "b" / mask).read_bytes()


def test_workers_do_not_change_outputs(oracle_run, tmp_path):
    cfg_path, out = oracle_run
    run_pipeline(cfg_path, tmp_path / "c", "--seed", "7", "--workers", "2")
    for name in ("estimates.csv", "report.csv"):
        assert (out / name).read_bytes() == (tmp_path / "c" / name).read_bytes()


def test_summary_ratio_ordering_and_value(oracle_run):
    cfg_path, out = oracle_run
    cfg = load_config(cfg_path, {"run": {"out": str(out)}})
    rows = read_csv(out / "report.csv")
    ratio = {(r["scene_id"], r["group"]): float(r["value"]) for r in rows if r["metric"] == "Sampling Ratio"}
    for row in read_manifest(out):
        if row["split"] != "test":
            continue
        rec = load_scene(out, row, split=cfg.scenes.split)
        for tag in ("edge", "vertex"):
            mask = load_mask_txt(out / "samples" / tag / f"{rec.scene_id}.mask.txt")
            assert ratio[(rec.scene_id, tag)] == pytest.approx(len(mask) / rec.env.free.sum(), abs=1e-9)
        assert ratio[(rec.scene_id, "vertex")] < ratio[(rec.scene_id, "edge")]
    table = {line.split()[0]: line.split() for line in (out / "summary.txt").read_text().splitlines()
             if line and not line.startswith(("#", "-", "Method"))}
    assert float(table["vertex"][-1].rstrip("%")) < float(table["edge"][-1].rstrip("%"))


def test_le_column_matches_estimates(oracle_run):
    _, out = oracle_run
    manifest = {r["scene_id"]: r for r in read_manifest(out)}
    per_group = {}
    for e in read_estimates(out / "estimates.csv"):
        tag, name = e["method"].split("/")
        if name != "argmax":
            continue
        rec = load_scene(out, manifest[e["scene_id"]])
        le = localization_error((float(e["row"]), float(e["col"])), rec.tx, rec.env.cell_size)
        assert float(e["le_m"]) == pytest.approx(le, abs=1e-9)
        per_group.setdefault(tag, []).append(le)
    rows = read_csv(out / "report.csv")
    for tag, les in per_group.items():
        reported = [float(r["value"]) for r in rows if r["group"] == tag and r["metric"] == "LE"]
        assert np.mean(reported) == pytest.approx(np.mean(les), abs=1e-9)
    assert {e["method"].split("/")[1] for e in read_estimates(out / "estimates.csv")} == \
        {"argmax", "topk_wc", "trc", "lbc", "ls", "awls", "mbe", "nls"}


def test_run_manifest_log(oracle_run):
    _, out = oracle_run
    lines = [json.loads(x) for x in (out / "run_manifest.jsonl").read_text().splitlines()]
    assert [x["command"] for x in lines] == list(STAGES)
    assert len({x["config_hash"] for x in lines}) == 1 and lines[0]["seed"] == 7
    assert not list(out.rglob("*.tmp"))


def test_analyze_sampling(oracle_run, tmp_path):
    cfg_path, out = oracle_run
    assert main(["analyze-sampling", "--config", str(cfg_path), "--out", str(out), "--seed", "7"]) == 0
    greedy = read_csv(out / "analysis_greedy.csv")
    assert greedy and all(r["is_edge"] in ("0", "1") for r in greedy)
    by_face = {}
    for r in greedy:
        by_face.setdefault((r["scene_id"], r["building"]), []).append(float(r["mi_nats"]))
    for total in by_face.values():
        # the column is cumulative MI, so the per-step gains must shrink
        gains = np.diff([0.0, *total])
        assert np.all(gains > 0) and np.all(np.diff(gains) <= 1e-9)


def test_ridge_pipeline_runs(tmp_path):
    cfg_path = tmp_path / "ridge.ini"
    cfg_path.write_text(ORACLE_CONFIG.replace("denoiser = oracle", "denoiser = ridge")
                        .replace("train_count = 0", "train_count = 4"))
    run_pipeline(cfg_path, tmp_path / "r", stages=("synth", "train", "sample", "reconstruct", "localize", "evaluate"))
    assert (tmp_path / "r" / "model" / "ridge.bin").exists()
    stack = np.load(tmp_path / "r" / "recon" / "edge" / "scene0000.npy")
    assert stack.shape == (2, 32, 32) and stack.min() >= 0 and stack.max() <= 1


def test_missing_upstream_and_bad_config(tmp_path, capsys):
    cfg_path = tmp_path / "c.ini"
    cfg_path.write_text(ORACLE_CONFIG)
    assert main(["localize", "--config", str(cfg_path), "--out", str(tmp_path / "empty")]) == 1
    assert "UpstreamArtifactMissing" in capsys.readouterr().err
    run_pipeline(cfg_path, tmp_path / "d", stages=("synth", "sample"))
    assert main(["localize", "--config", str(cfg_path), "--out", str(tmp_path / "d")]) == 1
    assert "reconstruct" in capsys.readouterr().err
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nsteps = many\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "ConfigInvalid" in capsys.readouterr().err
    assert main(["synth", "--config", str(tmp_path / "nope.ini")]) == 1


def test_config_parsing_and_flag_precedence(tmp_path):
    cfg = parse_config(ORACLE_CONFIG + "\n[run]\nseed = 3\nout = from_file\n")
    assert cfg.model.denoiser == "oracle" and cfg.sampling.strategies[2] == "budget_matched_random@edge"
    path = tmp_path / "p.ini"
    path.write_text(ORACLE_CONFIG + "\n[run]\nseed = 3\nout = from_file\n")
    merged = load_config(path, {"run": {"seed": "11"}, "model": {"steps": "4"}})
    assert merged.run.seed == 11 and merged.model.steps == 4 and merged.run.out == "from_file"
    assert parse_config(cfg.to_text()) == cfg
    assert cfg.config_hash() == parse_config(cfg.to_text().replace("workers = 1", "workers = 3")).config_hash()
    assert cfg.config_hash() != parse_config(cfg.to_text().replace("steps = 10", "steps = 11")).config_hash()
    for text in ("[nope]\nx = 1\n", "[model]\nwhat = 1\n", "[sampling]\nstrategies = diagonal\n",
                 "[model]\ndenoiser = transformer\n", "[evaluate]\nle_estimator = mbe\n[localize]\nestimators = argmax\n"):
        with pytest.raises(ConfigInvalid):
            load_config(_write(tmp_path, text))
    assert ExperimentConfig().validate().model.denoiser == "ridge"


def _write(tmp_path, text):
    p = tmp_path / "t.ini"
    p.write_text(text)
    return p
