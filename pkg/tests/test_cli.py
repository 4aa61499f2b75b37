import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from fairsvdd import cli
from fairsvdd.data import load_csv
from fairsvdd.nn import load_checkpoint

SCHEMAS = Path(__file__).resolve().parent.parent / "schemas"
FAST = ["--pretrain-epochs", "2", "--adv-epochs", "3", "--n-per-group", "120"]


def schema(name):
    return json.loads((SCHEMAS / name).read_text())


def check_csv(path, name):
    s = schema(name)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        rows = list(reader)
    if "x-columns-prefix" not in s:
        assert header == s["x-columns"]
    for row in rows:
        jsonschema.validate(row, s)
    return rows


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["synth", "--out-dir", str(d), "--seed", "1", *FAST]) == 0
    return d


def train(data_dir, out, *extra):
    return cli.main(["train", "--train", str(data_dir / "train.csv"), "--out-dir", str(out), "--seed", "1",
                     *FAST, *extra])


def evaluate(ckpt, data_dir, out, *extra):
    return cli.main(["evaluate", "--checkpoint", str(ckpt), "--test", str(data_dir / "test.csv"),
                     "--out-dir", str(out), *extra])


# -- config ----------------------------------------------------------------------


def test_config_round_trip(tmp_path, capsys):
    cfg = cli.RunConfig.from_dict({"seed": 4, "training": {"lambda_fair": 2.5}, "synth": {"n_dims": 6}})
    again = cli.RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg and again.train_config().lambda_fair == 2.5 and again.synth_spec().n_dims == 6
    jsonschema.validate(cfg.to_dict(), schema("config.schema.json"))

    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert cli.main(["train", "--config", str(path), "--lambda", "7", "--dump-config"]) == 0
    dumped = json.loads(capsys.readouterr().out)
    assert dumped["training"]["lambda_fair"] == 7.0 and dumped["seed"] == 4


def test_default_config_matches_schema_defaults():
    s = schema("config.schema.json")["properties"]
    d = cli.RunConfig().to_dict()
    for group in ("synth", "training"):
        for key, spec in s[group]["properties"].items():
            assert d[group][key] == spec["default"], (group, key)
    assert set(s["synth"]["properties"]) == set(d["synth"])
    assert set(s["training"]["properties"]) == set(d["training"])


@pytest.mark.parametrize(
    "payload", [{"sed": 1}, {"training": {"lamda": 1}}, {"synth": {"bias": 0.2}}, {"training": {"batch_size": 0}}]
)
def test_bad_config_exits_2(tmp_path, payload, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(payload))
    assert cli.main(["synth", "--config", str(path), "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_required_setting_exits_2(tmp_path):
    assert cli.main(["train", "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG


# -- synth -------------------------------------------------------------------------


def test_synth_outputs(data_dir, tmp_path, capsys):
    tr = load_csv(data_dir / "train.csv", "psv", "label")
    te = load_csv(data_dir / "test.csv", "psv", "label")
    assert not tr.labels.any() and te.labels.any()
    assert tr.group_counts() == (120, 36)

    assert cli.main(["synth", "--out-dir", str(tmp_path), "--seed", "1", *FAST]) == 0
    assert "psv=0: 120, psv=1: 36" in capsys.readouterr().out
    for name in ("train.csv", "test.csv"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_synth_balanced(tmp_path):
    assert cli.main(["synth", "--balanced", "--out-dir", str(tmp_path), *FAST]) == 0
    assert load_csv(tmp_path / "train.csv", "psv").group_counts() == (36, 36)


# -- train / evaluate ----------------------------------------------------------------


def test_train_plain_and_evaluate(data_dir, tmp_path, capsys):
    assert train(data_dir, tmp_path, "--fair", "false") == 0
    out = capsys.readouterr().out
    assert "plain model" in out and "epoch 5" in out  # K + T epochs
    rows = check_csv(tmp_path / "trace.csv", "trace.csv.schema.json")
    assert {r["phase"] for r in rows} == {"pretrain"} and len(rows) == 5

    assert evaluate(tmp_path / "model.json", data_dir, tmp_path) == 0
    assert "80% rule" in capsys.readouterr().out
    report = json.loads((tmp_path / "report.json").read_text())
    jsonschema.validate(report, schema("report.schema.json"))
    check_csv(tmp_path / "scores.csv", "scores.csv.schema.json")
    check_csv(tmp_path / "embeddings.csv", "embeddings.csv.schema.json")


def test_fair_trace_has_three_phases(data_dir, tmp_path):
    assert train(data_dir, tmp_path, "--fair", "--lambda", "1") == 0
    rows = check_csv(tmp_path / "trace.csv", "trace.csv.schema.json")
    assert [r["phase"] for r in rows] == ["pretrain"] * 2 + ["disc_init"] * 2 + ["adversarial"] * 3
    _, meta = load_checkpoint(tmp_path / "model.json")
    assert meta["kind"] == "fair" and "scaler" in meta


def test_fair_lambda_zero_matches_plain_checkpoint(data_dir, tmp_path):
    assert train(data_dir, tmp_path / "f", "--fair", "--lambda", "0") == 0
    assert train(data_dir, tmp_path / "p", "--fair", "false") == 0
    nf, _ = load_checkpoint(tmp_path / "f" / "model.json")
    np_, _ = load_checkpoint(tmp_path / "p" / "model.json")
    assert nf["encoder"].to_dict() == np_["encoder"].to_dict()


def test_report_rederived_from_scores_csv(data_dir, tmp_path):
    assert train(data_dir, tmp_path) == 0
    assert evaluate(tmp_path / "model.json", data_dir, tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    with open(tmp_path / "scores.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    s = np.array([float(r["score"]) for r in rows])
    z = np.array([int(r["psv"]) for r in rows])
    y = np.array([int(r["label"]) for r in rows])

    # independent recomputation: sort-based cut, pairwise AUC, quantile-grid W1
    k = int(y.sum())
    srt = np.sort(s)
    t = (srt[-k - 1] + srt[-k]) / 2
    r0, r1 = np.mean(s[z == 0] > t), np.mean(s[z == 1] > t)
    assert report["threshold"] == pytest.approx(t, abs=1e-12)
    assert report["p_rule"] == pytest.approx(min(r0 / r1, r1 / r0), abs=1e-12)
    diff = np.subtract.outer(s[y == 1], s[y == 0])
    assert report["auc"] == pytest.approx((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size, abs=1e-12)
    from scipy.stats import wasserstein_distance

    assert report["wasserstein"] == pytest.approx(wasserstein_distance(s[z == 0], s[z == 1]), rel=1e-10)
    assert report["counts"]["z0"]["abnormal"] == int(np.sum(s[z == 0] > t))


def test_evaluate_with_explicit_threshold(data_dir, tmp_path):
    assert train(data_dir, tmp_path, "--fair", "false") == 0
    assert evaluate(tmp_path / "model.json", data_dir, tmp_path, "--threshold", "1e9") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["threshold"] == 1e9 and report["p_rule"] == 1.0


def test_evaluate_without_labels_needs_k(data_dir, tmp_path):
    assert train(data_dir, tmp_path, "--fair", "false") == 0
    args = ["evaluate", "--checkpoint", str(tmp_path / "model.json"), "--test", str(data_dir / "test.csv"),
            "--out-dir", str(tmp_path), "--label-col", "nope"]
    # the label column does not exist, so the file cannot be read as labelled
    assert cli.main(args) == cli.EXIT_DATA


# -- error exits -----------------------------------------------------------------------


def test_data_error_exits_3(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,psv\n1,0\n2,1\n3,0\n4,1\n5,2\n")
    assert cli.main(["train", "--train", str(bad), "--out-dir", str(tmp_path)]) == cli.EXIT_DATA
    assert "row 5" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_abort_exits_4(tmp_path):
    # ordinary data, absurd step size: parameters overflow within a few updates
    path = tmp_path / "d.csv"
    rows = [f"{v},{i % 2}" for i, v in enumerate(np.linspace(-2, 2, 40))]
    path.write_text("x,psv\n" + "\n".join(rows) + "\n")
    code = cli.main(["train", "--train", str(path), "--fair", "false", "--lr", "1e300", "--batch-size", "4",
                     "--out-dir", str(tmp_path), "--pretrain-epochs", "5", "--adv-epochs", "0"])
    assert code == cli.EXIT_NUMERIC


# -- sweep -------------------------------------------------------------------------------


def sweep(data_dir, out, lambdas):
    return cli.main(["sweep", "--train", str(data_dir / "train.csv"), "--test", str(data_dir / "test.csv"),
                     "--lambdas", lambdas, "--out-dir", str(out), "--seed", "1", *FAST])


def test_sweep_table(data_dir, tmp_path):
    assert sweep(data_dir, tmp_path, "0.01,0.1,1,10,100") == 0
    rows = check_csv(tmp_path / "sweep.csv", "sweep.csv.schema.json")
    assert [float(r["lambda"]) for r in rows] == [0.01, 0.1, 1.0, 10.0, 100.0]
    assert not (tmp_path / "sweep_incomplete.csv").exists()


def test_single_lambda_sweep_equals_train_plus_evaluate(data_dir, tmp_path):
    assert sweep(data_dir, tmp_path / "s", "1") == 0
    assert train(data_dir, tmp_path / "t", "--lambda", "1") == 0
    assert evaluate(tmp_path / "t" / "model.json", data_dir, tmp_path / "t") == 0
    for name in ("model.json", "trace.csv", "report.json"):
        assert (tmp_path / "s" / "lambda_1" / name).read_bytes() == (tmp_path / "t" / name).read_bytes()


def test_sweep_failure_leaves_flagged_partial_table(data_dir, tmp_path, monkeypatch):
    real = cli.train_fair_svdd
    calls = []

    def flaky(train, config):
        calls.append(config.lambda_fair)
        if len(calls) == 2:
            raise cli.NumericalError("diverged")
        return real(train, config)

    monkeypatch.setattr(cli, "train_fair_svdd", flaky)
    assert sweep(data_dir, tmp_path, "0.1,1,10") == cli.EXIT_NUMERIC
    assert not (tmp_path / "sweep.csv").exists()
    rows = check_csv(tmp_path / "sweep_incomplete.csv", "sweep.csv.schema.json")
    assert [float(r["lambda"]) for r in rows] == [0.1]


def test_sweep_rejects_plain(data_dir, tmp_path):
    assert cli.main(["sweep", "--fair", "false", "--train", str(data_dir / "train.csv"), "--test",
                     str(data_dir / "test.csv"), "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG


# -- overlap -----------------------------------------------------------------------------


def test_overlap(data_dir, tmp_path, capsys):
    assert train(data_dir, tmp_path / "p", "--fair", "false") == 0
    assert train(data_dir, tmp_path / "f") == 0
    capsys.readouterr()
    p, f = tmp_path / "p" / "model.json", tmp_path / "f" / "model.json"
    test = str(data_dir / "test.csv")

    assert cli.main(["overlap", "--checkpoint", str(p), "--checkpoint-b", str(p), "--test", test,
                     "--out-dir", str(tmp_path / "o1")]) == 0
    assert "overlap ratio  1.0000" in capsys.readouterr().out

    assert cli.main(["overlap", "--checkpoint", str(p), "--checkpoint-b", str(f), "--test", test,
                     "--out-dir", str(tmp_path / "o2")]) == 0
    out = capsys.readouterr().out
    assert "(Z0:Z1)" in out
    rep = json.loads((tmp_path / "o2" / "overlap.json").read_text())
    jsonschema.validate(rep, schema("overlap.schema.json"))
    assert 0.0 < rep["overlap_ratio"] <= 1.0
    assert sum(m["z0"] + m["z1"] for m in rep["models"]) == 2 * rep["k"]
