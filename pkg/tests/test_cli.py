import csv

import numpy as np
import pytest

from calibscope import cli
from calibscope.core import load_prediction_set, save_labeled_data, save_prediction_set
from calibscope.metrics import compute_metrics, reliability_diagram
from calibscope.posthoc import fit_temperature
from calibscope.synth import (gen_calibrated, gen_gaussian_mixture, gen_overconfident,
                              gen_predictable_correctness)


def run(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def parse_summary(line):
    return dict(field.split("=") for field in line.split())


class TestMetricsCommand:
    def test_summary_matches_library(self, tmp_path, capsys):
        s = gen_overconfident(500, 3, 0)
        save_prediction_set(s, tmp_path / "p.jsonl")
        code, out, _ = run(capsys, "metrics", "--in", tmp_path / "p.jsonl", "--csv", tmp_path / "m.csv")
        assert code == 0
        got = parse_summary(out.strip())
        m = compute_metrics(s).as_dict()
        for key in ("acc", "conf", "ece", "cerr_neg"):
            assert float(got[key]) == pytest.approx(m[key], abs=5e-7)
        rows = list(csv.DictReader(open(tmp_path / "m.csv")))
        assert list(rows[0]) == list(cli.METRIC_COLUMNS) and rows[0]["n"] == "500"

    def test_percent_and_missing(self, tmp_path, capsys):
        save_prediction_set(gen_calibrated(1, 2, 0).replace(probs=[[1.0, 0.0]], labels=[0], logits=None),
                            tmp_path / "p.jsonl")
        code, out, _ = run(capsys, "metrics", "--in", tmp_path / "p.jsonl", "--percent")
        got = parse_summary(out.strip())
        assert code == 0 and got["acc"] == "100.0000" and got["cerr_neg"] == "NA"

    def test_empty_log(self, tmp_path, capsys):
        (tmp_path / "e.jsonl").write_text("")
        code, _, err = run(capsys, "metrics", "--in", tmp_path / "e.jsonl")
        assert code == 2 and "empty prediction set" in err

    def test_invalid_record(self, tmp_path, capsys):
        (tmp_path / "b.jsonl").write_text('{"id": "zz", "probs": [0.5, 0.1], "label": 0}\n')
        code, _, err = run(capsys, "metrics", "--in", tmp_path / "b.jsonl")
        assert code == 2 and "zz" in err

    def test_usage_errors(self, tmp_path, capsys):
        assert run(capsys, "metrics")[0] == 1
        assert run(capsys, "no-such-command")[0] == 1
        assert run(capsys, "metrics", "--in", "x", "--binning", "quantile")[0] == 1
        assert run(capsys, "--help")[0] == 0


class TestPosthocCommands:
    def test_fit_and_apply_temperature(self, tmp_path, capsys):
        s = gen_overconfident(20_000, 3, 1, 2.0)
        save_prediction_set(s, tmp_path / "v.jsonl")
        code, out, _ = run(capsys, "fit-temperature", "--val", tmp_path / "v.jsonl")
        t = float(parse_summary(out.strip())["temperature"])
        assert code == 0 and t == pytest.approx(2.0, abs=0.1)
        assert t == pytest.approx(fit_temperature(s).temperature, abs=5e-7)
        code, _, _ = run(capsys, "apply-temperature", "--in", tmp_path / "v.jsonl", "--t", t,
                         "--out", tmp_path / "o.jsonl")
        assert code == 0
        fixed = load_prediction_set(tmp_path / "o.jsonl")
        assert compute_metrics(fixed).ece < compute_metrics(s).ece

    def test_ensemble(self, tmp_path, capsys):
        a = gen_calibrated(30, 2, 0)
        b = a.replace(probs=gen_calibrated(30, 2, 1).probs, logits=None)
        save_prediction_set(a, tmp_path / "a.jsonl")
        save_prediction_set(b, tmp_path / "b.jsonl")
        code, _, _ = run(capsys, "ensemble", tmp_path / "a.jsonl", tmp_path / "b.jsonl", "--out", tmp_path / "e.jsonl")
        assert code == 0
        np.testing.assert_allclose(load_prediction_set(tmp_path / "e.jsonl").probs, (a.probs + b.probs) / 2)

    def test_reliability_csv_and_plot(self, tmp_path, capsys):
        s = gen_overconfident(800, 2, 2)
        save_prediction_set(s, tmp_path / "p.jsonl")
        code, out, _ = run(capsys, "reliability", "--in", tmp_path / "p.jsonl", "--bins", 10,
                           "--binning", "equal-width", "--csv", tmp_path / "r.csv", "--plot", tmp_path / "r.png")
        assert code == 0 and (tmp_path / "r.png").stat().st_size > 0
        rows = list(csv.DictReader(open(tmp_path / "r.csv")))
        lib = reliability_diagram(s, 10, "equal_width")
        assert [int(r["count"]) for r in rows] == [b.count for b in lib]


class TestLearnedCommands:
    def test_caltask_calibrator_pipeline(self, tmp_path, capsys):
        s = gen_predictable_correctness(600, 4, 0)
        save_prediction_set(s, tmp_path / "v.jsonl")
        assert run(capsys, "build-caltask", "--in", tmp_path / "v.jsonl", "--out", tmp_path / "c.jsonl")[0] == 1
        code, out, _ = run(capsys, "build-caltask", "--in", tmp_path / "v.jsonl", "--seed", 0,
                           "--out", tmp_path / "c.jsonl")
        got = parse_summary(out.strip())
        assert code == 0 and got["positive"] == got["negative"]
        code, _, _ = run(capsys, "train-calibrator", "--caltask", tmp_path / "c.jsonl", "--seed", 0,
                         "--epochs", 20, "--model-out", tmp_path / "w.txt", "--trace", tmp_path / "t.csv")
        assert code == 0
        code, _, _ = run(capsys, "apply-calibrator", "--model", tmp_path / "w.txt", "--in", tmp_path / "v.jsonl",
                         "--out", tmp_path / "o.jsonl")
        out_set = load_prediction_set(tmp_path / "o.jsonl")
        assert code == 0 and compute_metrics(out_set).cerr_neg < 0.5
        assert compute_metrics(out_set).acc == compute_metrics(s).acc

    def test_train_multitask(self, tmp_path, capsys):
        train = gen_gaussian_mixture(200, 2, 4, seed=1, centers_seed=0)
        test = gen_gaussian_mixture(200, 2, 4, seed=2, centers_seed=0)
        save_labeled_data(train, tmp_path / "train.jsonl")
        save_labeled_data(test, tmp_path / "test.jsonl")
        val = gen_calibrated(200, 2, 3).replace(features=gen_gaussian_mixture(200, 2, 4, seed=3, centers_seed=0).X)
        save_prediction_set(val, tmp_path / "v.jsonl")
        run(capsys, "build-caltask", "--in", tmp_path / "v.jsonl", "--seed", 0, "--out", tmp_path / "c.jsonl")
        code, out, _ = run(capsys, "train-multitask", "--mode", "simultaneous", "--main", tmp_path / "train.jsonl",
                           "--cal", tmp_path / "c.jsonl", "--seed", 0, "--epochs", 5, "--hidden", 16,
                           "--model-out", tmp_path / "w.txt", "--test", tmp_path / "test.jsonl",
                           "--out", tmp_path / "o.jsonl")
        assert code == 0 and "test_acc=" in out
        assert len(load_prediction_set(tmp_path / "o.jsonl")) == 200


class TestSynthAndDynamics:
    def test_synth_requires_seed(self, tmp_path, capsys):
        assert run(capsys, "synth", "--kind", "calibrated", "--out", tmp_path / "s.jsonl")[0] == 1

    def test_synth_matches_library(self, tmp_path, capsys):
        code, _, _ = run(capsys, "synth", "--kind", "calibrated", "--n", 100, "--K", 3, "--seed", 4,
                         "--out", tmp_path / "s.jsonl")
        assert code == 0
        np.testing.assert_array_equal(load_prediction_set(tmp_path / "s.jsonl").probs,
                                      gen_calibrated(100, 3, 4).probs)

    def test_toy_checkpoints_and_dynamics(self, tmp_path, capsys):
        code, out, _ = run(capsys, "synth", "--kind", "toy_checkpoints", "--seed", 0, "--n", 60, "--n-test", 100,
                           "--D", 4, "--hidden", 16, "--epochs", 12, "--log-every", 2, "--out", tmp_path / "cp")
        assert code == 0 and "checkpoints=6" in out
        code, out, _ = run(capsys, "dynamics", "--dir", tmp_path / "cp", "--window", 3, "--bins", 10,
                           "--csv", tmp_path / "d.csv", "--plot", tmp_path / "d.png")
        assert code == 0 and "transition_step=" in out
        rows = list(csv.DictReader(open(tmp_path / "d.csv")))
        assert [int(r["step"]) for r in rows] == [2, 4, 6, 8, 10, 12]
        assert (tmp_path / "d.png").stat().st_size > 0

    def test_missing_directory(self, tmp_path, capsys):
        code, _, err = run(capsys, "dynamics", "--dir", tmp_path / "nowhere")
        assert code == 2 and err.startswith("error:")
