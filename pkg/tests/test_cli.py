import json
import os

import numpy as np
import pytest

import mirrordiff as md
from mirrordiff.cli import main


def run(argv):
    try:
        rc = main(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    return rc


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


TRAIN_CFG = {
    "version": 1,
    "schedule": {"kind": "linear", "T": 8, "beta_min": 1e-2, "beta_max": 0.1},
    "arch": {"hidden_dim": 8, "n_res_blocks": 1, "embed_dim": 4, "norm_groups": 2},
    "train": {"n_steps": 12, "batch_size": 16, "seed": 3, "trace_every": 4},
}


# ---------------------------------------------------------------------------
# batch container
# ---------------------------------------------------------------------------


def test_sample_batch_validates_primal_rows():
    ball = md.BallConstraint(radius_sq=1.0)
    with pytest.raises(md.PointOutsideSet):
        md.SampleBatch(data=np.array([[2.0, 0.0]]), space=md.PRIMAL, constraint=ball)
    with pytest.raises(ValueError):
        md.SampleBatch(data=np.zeros((1, 2)), space="nowhere")


def test_batch_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    sb = md.SampleBatch(data=rng.normal(size=(31, 3)), space=md.DUAL)
    stem = str(tmp_path / "b")
    md.save_batch(sb, stem)
    back = md.load_batch(stem)
    np.testing.assert_array_equal(back.data, sb.data)
    assert back.space == md.DUAL and back.constraint is None


def test_batch_round_trip_with_polytope(tmp_path):
    poly = md.PolytopeConstraint.build(md.orthonormalize_tokens(1, 2, 5), -0.9, 0.9)
    rng = np.random.default_rng(1)
    y = rng.normal(size=(20, 5))
    sb = md.SampleBatch(data=md.mirror_inverse(poly, y), space=md.PRIMAL,
                        constraint=poly)
    stem = str(tmp_path / "p")
    md.save_batch(sb, stem)
    back = md.load_batch(stem)
    np.testing.assert_array_equal(back.data, sb.data)
    np.testing.assert_array_equal(back.constraint.tokens, poly.tokens)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def test_gen_data_dirichlet_and_rerun_identical(tmp_path):
    stem = str(tmp_path / "dir")
    argv = ["gen-data", "--kind", "dirichlet", "--alpha", "2,4,8",
            "--n", "50", "--seed", "7", "--out", stem]
    assert run(argv) == 0
    first_csv = read(stem + ".csv")
    first_json = read(stem + ".json")
    data = md.load_csv_matrix(stem + ".csv")
    assert data.shape == (50, 2)   # reduced coordinates of a 3-component simplex
    assert run(argv) == 0
    assert read(stem + ".csv") == first_csv
    assert read(stem + ".json") == first_json


def test_gen_data_missing_alpha_usage_error(tmp_path):
    assert run(["gen-data", "--kind", "dirichlet", "--n", "5", "--seed", "1",
                "--out", str(tmp_path / "x")]) == 2
    assert run(["gen-data", "--kind", "gmm_ball", "--n", "5", "--seed", "1",
                "--out", str(tmp_path / "y")]) == 2   # missing --d


def test_gen_data_writes_constraint_sidecar(tmp_path):
    stem = str(tmp_path / "cube")
    assert run(["gen-data", "--kind", "hypercube_corners", "--d", "3",
                "--n", "20", "--seed", "2", "--out", stem]) == 0
    with open(stem + ".json") as fh:
        doc = json.load(fh)
    assert doc["constraint"]["kind"] == "hypercube"
    assert doc["dataset"]["kind"] == "hypercube_corners"


# ---------------------------------------------------------------------------
# train / sample / eval / elbo pipeline
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    data = str(root / "data")
    ck = str(root / "ck")
    assert run(["gen-data", "--kind", "gmm_ball", "--d", "2", "--n", "64",
                "--seed", "5", "--out", data]) == 0
    cfg_path = str(root / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump(TRAIN_CFG, fh)
    assert run(["train", "--config", cfg_path, "--data", data, "--out", ck]) == 0
    return root, data, ck, cfg_path


def test_train_writes_artifacts(pipeline):
    root, data, ck, _ = pipeline
    assert os.path.exists(ck + ".json")
    assert os.path.exists(ck + ".params.bin")
    assert os.path.exists(ck + ".ema.bin")
    assert os.path.exists(ck + ".loss.csv")
    bundle = md.load_checkpoint(ck)
    assert bundle.step == 12
    assert isinstance(bundle.constraint, md.BallConstraint)


def test_train_resume_continues_counter(pipeline, tmp_path):
    root, data, ck, cfg_path = pipeline
    out2 = str(tmp_path / "ck2")
    assert run(["train", "--config", cfg_path, "--data", data, "--out", out2,
                "--resume", ck, "--steps", "5"]) == 0
    assert md.load_checkpoint(out2).step == 17


def test_train_constraint_mismatch_is_usage_error(tmp_path):
    data = str(tmp_path / "dir")
    assert run(["gen-data", "--kind", "dirichlet", "--alpha", "1,1,1",
                "--n", "30", "--seed", "1", "--out", data]) == 0
    cfg = dict(TRAIN_CFG)
    cfg["constraint"] = {"kind": "ball", "radius_sq": 1.0, "gamma": 1.0}
    cfg_path = str(tmp_path / "bad.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    assert run(["train", "--config", cfg_path, "--data", data,
                "--out", str(tmp_path / "ck")]) == 2


def test_sample_zero_violation_and_deterministic(pipeline, tmp_path):
    _, _, ck, _ = pipeline
    out = str(tmp_path / "s1")
    assert run(["sample", "--checkpoint", ck, "--n", "40", "--seed", "9",
                "--out", out]) == 0
    with open(out + ".report.json") as fh:
        rep = json.load(fh)
    assert rep["violation_rate_percent"] == 0.0
    rows = md.load_csv_matrix(out + ".csv")
    assert rows.shape == (40, 2)
    assert np.all(np.sum(rows ** 2, axis=1) < 1.0)

    out2 = str(tmp_path / "s2")
    assert run(["sample", "--checkpoint", ck, "--n", "40", "--seed", "9",
                "--out", out2]) == 0
    assert read(out + ".csv") == read(out2 + ".csv")


def test_sample_empty(pipeline, tmp_path):
    _, _, ck, _ = pipeline
    out = str(tmp_path / "empty")
    assert run(["sample", "--checkpoint", ck, "--n", "0", "--seed", "1",
                "--out", out]) == 0
    with open(out + ".csv") as fh:
        lines = fh.read().strip().splitlines()
    assert lines == ["x0,x1"]


def test_eval_identical_files_zero(pipeline, tmp_path):
    root, data, ck, _ = pipeline
    report = str(tmp_path / "rep.json")
    assert run(["eval", "--a", data + ".csv", "--b", data + ".csv",
                "--trials", "3", "--n-eval", "64", "--out", report,
                "--metrics", "sw,w1,mmd"]) == 0
    with open(report) as fh:
        doc = json.load(fh)
    assert doc["metrics"]["sw"]["value"] == 0.0
    assert abs(doc["metrics"]["w1"]["value"]) < 1e-6
    assert doc["metrics"]["mmd"]["value"] == 0.0
    assert len(doc["metrics"]["sw"]["per_trial"]) == 3


def test_eval_dimension_mismatch(tmp_path):
    a = str(tmp_path / "a.csv")
    b = str(tmp_path / "b.csv")
    with open(a, "w") as fh:
        fh.write("x0,x1\n0.1,0.2\n")
    with open(b, "w") as fh:
        fh.write("x0,x1,x2\n0.1,0.2,0.3\n")
    assert run(["eval", "--a", a, "--b", b]) == 2


def test_eval_histogram_emission(pipeline, tmp_path):
    root, data, _, _ = pipeline
    hist = str(tmp_path / "h")
    assert run(["eval", "--a", data + ".csv", "--b", data + ".csv",
                "--metrics", "sw", "--n-eval", "64", "--hist-out", hist,
                "--hist-bins", "8"]) == 0
    with open(hist + ".hist.csv") as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0] == "bin_i,bin_j,count_a,count_b"
    assert len(lines) == 1 + 8 * 8
    counts = sum(int(l.split(",")[2]) for l in lines[1:])
    assert counts == 64


def test_elbo_flags_boundary_rows(pipeline, tmp_path):
    _, _, ck, _ = pipeline
    samples = str(tmp_path / "pts.csv")
    with open(samples, "w") as fh:
        fh.write("x0,x1\n0.1,0.2\n1.5,0.0\n")
    out = str(tmp_path / "e")
    assert run(["elbo", "--checkpoint", ck, "--samples", samples,
                "--out", out]) == 1
    with open(out + ".elbo.csv") as fh:
        lines = fh.read().strip().splitlines()
    assert len(lines) == 3
    assert lines[1].endswith(",")          # clean row, empty error column
    assert "PointOutsideSet" in lines[2]
    with open(out + ".elbo.json") as fh:
        summary = json.load(fh)
    assert summary["n_ok"] == 1 and summary["n_errors"] == 1
    assert np.isfinite(summary["mean_bound_nats"])


def test_elbo_single_interior_point(pipeline, tmp_path):
    _, _, ck, _ = pipeline
    samples = str(tmp_path / "one.csv")
    with open(samples, "w") as fh:
        fh.write("x0,x1\n0.05,-0.1\n")
    out = str(tmp_path / "e1")
    assert run(["elbo", "--checkpoint", ck, "--samples", samples,
                "--out", out]) == 0


# ---------------------------------------------------------------------------
# watermark commands
# ---------------------------------------------------------------------------


def test_watermark_cli_flow(tmp_path):
    key = str(tmp_path / "key")
    assert run(["watermark", "keygen", "--seed", "3", "--m", "4", "--d", "8",
                "--b", "0.9", "--out", key]) == 0

    rng = np.random.default_rng(0)
    raw = str(tmp_path / "raw.csv")
    with open(raw, "w") as fh:
        fh.write(",".join(f"x{i}" for i in range(8)) + "\n")
        np.savetxt(fh, 3.0 * rng.normal(size=(25, 8)), fmt="%.17g", delimiter=",")

    marked = str(tmp_path / "marked")
    assert run(["watermark", "embed", "--key", key, "--input", raw,
                "--out", marked]) == 0

    # every projected sample passes detection; raw ones do not
    assert run(["watermark", "detect", "--key", key,
                "--input", marked + ".csv"]) == 0
    rep = str(tmp_path / "det.json")
    assert run(["watermark", "detect", "--key", key, "--input", raw,
                "--out", rep]) == 1
    with open(rep) as fh:
        doc = json.load(fh)
    assert doc["detected"] < doc["n"]

    assert run(["watermark", "fp-rate", "--key", key, "--n", "2000",
                "--out", str(tmp_path / "fp.json")]) == 0
    with open(tmp_path / "fp.json") as fh:
        fp = json.load(fh)
    assert 0.0 <= fp["monte_carlo"] <= 1.0 and 0.14 < fp["analytic"] < 0.18


def test_watermark_keygen_invalid_usage(tmp_path):
    assert run(["watermark", "keygen", "--seed", "1", "--m", "9", "--d", "4",
                "--b", "1.0", "--out", str(tmp_path / "k")]) == 2
