import math

import numpy as np
import pytest

from escape_pose import experiments as X
from escape_pose.datasets import dumps, loads, read_dataset, write_dataset
from escape_pose.errors import DataFormatError, InsufficientDataError, SupervisionUnavailableError
from escape_pose.pose import H36M17, SampleRecord
from escape_pose.reports import ReportMismatchError, RunReport, loads as load_report, write_report
from escape_pose.synthgen import make_dataset
from escape_pose.tinynet import Network, NetworkConfig
from escape_pose.tta import Route, TtaConfig


@pytest.fixture(scope="module")
def records():
    return make_dataset(60, "test", seed=5)


@pytest.fixture
def nets():
    cnet = Network(NetworkConfig(hidden_dim=16, seed=1)).eval()
    rcnet = Network(NetworkConfig(hidden_dim=16, seed=2)).eval()
    return cnet, rcnet


class TestDatasetFile:
    def test_round_trip_is_exact(self, records, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(path, records, H36M17)
        schema, back = read_dataset(path)
        assert schema is H36M17
        assert back == records
        for a, b in zip(records, back):
            assert a.predicted.tobytes() == b.predicted.tobytes()
            assert a.ground_truth.tobytes() == b.ground_truth.tobytes()
            assert a.meta["regime"] == b.meta["regime"]

    def test_awkward_floats_round_trip(self):
        pred = np.full((17, 3), 0.1)
        pred[1] = (1e-300, -2.5e17, np.nextafter(1.0, 2.0))
        rec = SampleRecord("x", pred, None, "test")
        _, back = loads(dumps([rec], H36M17))
        assert back[0].predicted.tobytes() == pred.tobytes()
        assert back[0].ground_truth is None

    def test_byte_identical_rewrite(self, records):
        assert dumps(records, H36M17) == dumps(loads(dumps(records, H36M17))[1], H36M17)

    @pytest.mark.parametrize("text", [
        "",
        "not json\n",
        '{"format": "other", "version": 1}\n',
        '{"format": "escape-pose-jsonl", "version": 9, "schema": "h36m17", "joint_count": 17}\n',
        '{"format": "escape-pose-jsonl", "version": 1, "schema": "coco", "joint_count": 17}\n',
        '{"format": "escape-pose-jsonl", "version": 1, "schema": "h36m17", "joint_count": 16}\n',
    ])
    def test_bad_header(self, text):
        with pytest.raises(DataFormatError):
            loads(text)

    def test_wrong_joint_count_in_record(self, records):
        text = dumps(records[:1], H36M17).splitlines()
        text.append('{"id": "bad", "split": "test", "pred": [[0, 0, 0]]}')
        with pytest.raises(DataFormatError, match="line 3"):
            loads("\n".join(text))

    def test_non_finite_record(self):
        header = dumps([], H36M17)
        row = '{"id": "n", "split": "test", "pred": %s}' % str([[1e400, 0, 0]] * 17)
        with pytest.raises(DataFormatError):
            loads(header + row)


class TestRunReport:
    def test_aggregates_recomputable_from_file(self, nets, records):
        report = X.evaluate(X.ArmConfig("escape"), *nets, records, {"seed": 0})
        back = load_report(write_report(report))
        back.verify()
        assert back.aggregate["n"] == len(records)
        assert back.aggregate["n_adapted"] + back.aggregate["n_fast"] == len(records)

    def test_tampered_aggregate_detected(self, nets, records):
        report = X.evaluate(X.ArmConfig("cnet_only"), *nets, records)
        report.aggregate["distal_post"] += 1e-9
        with pytest.raises(ReportMismatchError):
            report.verify()

    def test_empty_report(self):
        report = RunReport([], {"mode": "baseline"})
        assert report.aggregate["n"] == 0
        assert math.isnan(report.aggregate["distal_pre"])
        load_report(write_report(report)).verify()


class TestEvaluate:
    def test_baseline_is_a_no_op(self, records):
        report = X.evaluate(X.ArmConfig("baseline"), None, None, records)
        for row in report.rows:
            assert row.distal_post == row.distal_pre
            assert row.mpjpe_post == row.mpjpe_pre
            assert row.pa_mpjpe_post == row.pa_mpjpe_pre
        assert report.aggregate["distal_delta"] == 0.0

    def test_escape_paths_follow_decisions(self, nets, records):
        report = X.evaluate(X.ArmConfig("escape", threshold=820.0), *nets, records)
        for row in report.rows:
            assert row.ood == (row.energy < 820.0)
            assert (row.path == "adapted") == row.ood
            assert (len(row.l_tt_trace) == 2) == row.ood

    def test_random_rate_matches_energy_rate(self, nets, records):
        rate = X.energy_selection_rate(records, 800.0, "below")
        cfg = X.ArmConfig("random_select")
        assert X.selector_for(cfg, records).random_rate == rate
        report = X.evaluate(cfg, *nets, records)
        assert float(report.config["random_rate"]) == rate

    def test_reproducible_apart_from_timing(self, nets, records):
        a = X.evaluate(X.ArmConfig("tta_all"), *nets, records, {"seed": 0})
        b = X.evaluate(X.ArmConfig("tta_all"), *nets, records, {"seed": 0})
        assert a.without_timings() == b.without_timings()

    def test_requires_ground_truth(self, nets, records):
        with pytest.raises(SupervisionUnavailableError):
            X.evaluate(X.ArmConfig("cnet_only"), *nets, [r.without_ground_truth() for r in records])

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            X.ArmConfig("everything")


class TestCorrelation:
    def test_row_contract(self, nets, records):
        result = X.correlation(*nets, records)
        header, rows = result.csv_rows()
        assert len(rows) == len(records) + 20 + 1
        assert result.bin_counts.sum() == len(records)
        assert rows[-1][0] == "summary"

    def test_zero_networks_not_applicable(self, nets, records):
        for net in nets:
            net.params["out.W"][:] = 0
            net.params["out.b"][:] = 0
        result = X.correlation(*nets, records)
        assert np.all(result.l_tt == 0)
        assert not result.applicable
        assert result.csv_rows()[1][-1][-1] == "n/a"

    def test_too_few_samples(self, nets, records):
        with pytest.raises(InsufficientDataError):
            X.correlation(*nets, records[:29])

    def test_pearson_oracle(self, rng):
        x = rng.normal(size=200)
        y = 0.5 * x + rng.normal(size=200)
        assert X.pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
        assert X.pearson(np.ones(5), np.arange(5.0)) is None


class TestBench:
    def test_fast_and_adapted_reported(self, nets, records):
        rows = X.bench(*nets, records, ["baseline", "escape"], warmup=10)
        by_key = {(r.arm, r.path): r for r in rows}
        base = by_key[("baseline", "all")]
        assert base.count == len(records) - 10
        assert 0 < base.mean_us < math.inf
        esc_fast, esc_adapted = by_key[("escape", "fast")], by_key[("escape", "adapted")]
        assert esc_fast.count + esc_adapted.count == len(records) - 10
        assert esc_fast.mean_us < esc_adapted.mean_us
