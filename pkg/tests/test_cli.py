import csv
import json
import logging
import os

import numpy as np
import pytest

from connrank.cli import main
from connrank.graphs import pearson_adjacency
from connrank.reliability import edgewise_rank_sums, random_pairing
from connrank.synth import CohortSpec, generate_cohort


def run_cli(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def perfect_cohort(tmp_path_factory):
    out = tmp_path_factory.mktemp("perfect")
    assert run_cli("synth", "--out-dir", out, "--n-subjects", 6, "--n-rois", 12, "--n-timepoints", 150,
                   "--seed", 1) == 0
    return out / "manifest.json"


def test_synth_writes_manifest(perfect_cohort):
    entries = json.loads(perfect_cohort.read_text())
    assert len(entries) == 12
    meta = json.loads((perfect_cohort.parent / "run_metadata.json").read_text())
    assert meta["errors"] == [] and meta["seed"] == 1


def test_infer_caches_and_reuses(perfect_cohort, tmp_path, caplog):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"window_seconds": 60}))
    out = tmp_path / "out"
    assert run_cli("infer", "--manifest", perfect_cohort, "--config", cfg, "--out-dir", out) == 0
    meta = json.loads((out / "run_metadata.json").read_text())
    assert meta["cache"] == {"hits": 0, "computed": 12}
    files = [f for f in os.listdir(out / "cache" / meta["config_hash"]) if f.endswith(".npz")]
    assert len(files) == 12
    with caplog.at_level(logging.INFO):
        assert run_cli("infer", "--manifest", perfect_cohort, "--config", cfg, "--out-dir", out) == 0
    assert json.loads((out / "run_metadata.json").read_text())["cache"] == {"hits": 12, "computed": 0}
    assert "12 hits" in caplog.text
    meta_files = [f for f in os.listdir(out / "cache" / meta["config_hash"]) if f.endswith(".json")]
    assert json.loads((out / "cache" / meta["config_hash"] / meta_files[0]).read_text())["config"]["window_seconds"] == 60


def test_reliability_perfect_and_deterministic(perfect_cohort, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli("reliability", "--manifest", perfect_cohort, "--out-dir", a, "-B", 200, "--svg") == 0
    assert run_cli("reliability", "--manifest", perfect_cohort, "--out-dir", b, "-B", 200) == 0
    ra, rb = (a / "reliability.json").read_bytes(), (b / "reliability.json").read_bytes()
    assert ra == rb
    rep = json.loads(ra)
    assert rep["rank_sum"] == 12
    assert rep["p_value"] == pytest.approx(1 / 201)
    assert rep["seed"] == 0 and rep["B"] == 200 and rep["tie_rule"]
    assert len(rep["config_hash"]) == 16
    assert (a / "matrices.svg").read_text().lstrip().startswith("<?xml")


def test_reliability_null_cohort_near_expectation(tmp_path):
    out = tmp_path / "null"
    assert run_cli("synth", "--out-dir", out, "--n-subjects", 20, "--n-rois", 8, "--n-timepoints", 40,
                   "--subject-signal", 0, "--session-noise", 0.3) == 0
    assert run_cli("reliability", "--manifest", out / "manifest.json", "--out-dir", out, "-B", 500) == 0
    rep = json.loads((out / "reliability.json").read_text())
    # the null distribution of a 40-scan rank sum has sd ~ 70
    assert abs(rep["rank_sum"] - 800) < 250
    assert rep["p_value"] > 0.01


def test_reliability_requires_labels(tmp_path):
    out = tmp_path / "u"
    assert run_cli("synth", "--out-dir", out, "--n-subjects", 2, "--n-rois", 4, "--n-timepoints", 20,
                   "--unlabeled") == 0
    assert run_cli("reliability", "--manifest", out / "manifest.json", "--out-dir", out) == 1
    assert json.loads((out / "run_metadata.json").read_text())["errors"]


def test_missing_scan_file_is_manifest_error(perfect_cohort, tmp_path):
    entries = json.loads(perfect_cohort.read_text())
    for e in entries:
        e["path"] = str(perfect_cohort.parent / e["path"])
    entries[0]["path"] = str(tmp_path / "gone.csv")
    m = tmp_path / "m.json"
    m.write_text(json.dumps(entries))
    assert run_cli("reliability", "--manifest", m, "--out-dir", tmp_path / "o") == 1
    errors = json.loads((tmp_path / "o" / "run_metadata.json").read_text())["errors"]
    assert "missing file" in errors[0]


def test_sweep_time_and_threshold(perfect_cohort, tmp_path):
    assert run_cli("sweep", "--manifest", perfect_cohort, "--out-dir", tmp_path, "--axis", "time",
                   "--grid", "1,2,5", "--svg") == 0
    rows = read_csv(tmp_path / "sweep_time.csv")
    assert [r["value"] for r in rows] == ["1", "2", "5"]
    assert [r["n_datapoints"] for r in rows] == ["30", "60", "150"]
    assert len({r["config_hash"] for r in rows}) == 3
    assert (tmp_path / "sweep_time.svg").exists()
    assert run_cli("sweep", "--manifest", perfect_cohort, "--out-dir", tmp_path, "--axis", "threshold",
                   "--grid", "0,25,50") == 0
    rows = read_csv(tmp_path / "sweep_threshold.csv")
    assert [int(r["rank_sum"]) for r in rows] == [12, 12, 12]


def test_sweep_invalid_point_reported_and_skipped(perfect_cohort, tmp_path):
    assert run_cli("sweep", "--manifest", perfect_cohort, "--out-dir", tmp_path, "--axis", "rois",
                   "--grid", "4,13,6") == 1
    rows = read_csv(tmp_path / "sweep_rois.csv")
    assert [r["n_rois"] for r in rows] == ["4", "6"]
    errors = json.loads((tmp_path / "run_metadata.json").read_text())["errors"]
    assert len(errors) == 1 and "13" in errors[0]


def test_sort_perfect_with_certification(perfect_cohort, tmp_path):
    assert run_cli("sort", "--manifest", perfect_cohort, "--out-dir", tmp_path) == 0
    rep = json.loads((tmp_path / "sort.json").read_text())
    assert rep["perfect"] is True
    assert rep["fitness"] == 12
    assert rep["exact_optimum_certified"] is True
    assert len(rep["pairs"]) == 6


def test_sort_unlabeled_omits_truth(tmp_path):
    out = tmp_path / "u"
    assert run_cli("synth", "--out-dir", out, "--n-subjects", 4, "--n-rois", 6, "--n-timepoints", 60,
                   "--unlabeled") == 0
    assert run_cli("sort", "--manifest", out / "manifest.json", "--out-dir", out) == 0
    rep = json.loads((out / "sort.json").read_text())
    assert "perfect" not in rep
    assert sorted(rep["partner"]) == list(range(8))


def test_sort_time_grid(perfect_cohort, tmp_path):
    assert run_cli("sort", "--manifest", perfect_cohort, "--out-dir", tmp_path, "--time-grid", "2,5",
                   "--subsample", "3,6", "--repeats", 2) == 0
    rows = read_csv(tmp_path / "sort_sweep.csv")
    assert [r["N"] for r in rows] == ["3", "3", "6"]
    summary = json.loads((tmp_path / "sort_summary.json").read_text())
    assert set(summary["median_min_time_minutes"]) == {"3", "6"}


def test_localize_refuses_thresholded(perfect_cohort, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"threshold": 25}))
    assert run_cli("localize", "--manifest", perfect_cohort, "--config", cfg, "--out-dir", tmp_path) == 1
    errors = json.loads((tmp_path / "run_metadata.json").read_text())["errors"]
    assert "unthresholded" in errors[0]
    assert not (tmp_path / "edges.csv").exists()


def test_localize_single_edge(tmp_path):
    out = tmp_path / "edge"
    # with 15 edges the 5th-percentile cutoff admits only the lowest edge
    assert run_cli("synth", "--out-dir", out, "--n-subjects", 10, "--n-rois", 6, "--n-timepoints", 300,
                   "--single-edge", "2,5", "--session-noise", 0.0) == 0
    assert run_cli("localize", "--manifest", out / "manifest.json", "--out-dir", out) == 0
    edges = read_csv(out / "edges.csv")
    assert (edges[0]["roi_i"], edges[0]["roi_j"]) == ("3", "6")
    assert int(edges[0]["edge_rank_sum"]) < int(edges[1]["edge_rank_sum"])
    rois = read_csv(out / "rois.csv")
    assert {rois[0]["roi"], rois[1]["roi"]} == {"3", "6"}
    assert [r["score"] for r in rois] == ["1", "1", "0", "0", "0", "0"]


def test_localize_two_rois(tmp_path):
    out = tmp_path / "c2"
    assert run_cli("synth", "--out-dir", out, "--n-subjects", 3, "--n-rois", 2, "--n-timepoints", 30) == 0
    assert run_cli("localize", "--manifest", out / "manifest.json", "--out-dir", out) == 0
    assert len(read_csv(out / "edges.csv")) == 1
    assert all(r["score"] in ("0", "1") for r in read_csv(out / "rois.csv"))


def test_localize_null_cohort_scores_exchangeable():
    ok = 0
    runs = 20
    for seed in range(runs):
        spec = CohortSpec(n_subjects=10, n_rois=8, n_timepoints=40, subject_signal=0.0, session_noise=0.3,
                          seed=seed)
        _, series, pairing = generate_cohort(spec)
        graphs = [pearson_adjacency(ts) for ts in series]
        observed = edgewise_rank_sums(graphs, pairing).roi_scores
        rng = np.random.default_rng(seed)
        null = np.array([edgewise_rank_sums(graphs, random_pairing(len(graphs), rng, pairing)).roi_scores
                         for _ in range(200)])
        ok += not np.any(observed > np.percentile(null, 99, axis=0))
    assert ok >= 0.9 * runs


def test_cli_requires_manifest(tmp_path):
    assert run_cli("reliability", "--out-dir", tmp_path) == 1
