import csv
import io
import json

import pytest

from chaoscnn.engine import EpochOutcome, LayerTiming, PhaseResult, TrainConfig, train
from chaoscnn.report import (CSV_FIELDS, SCHEMA_VERSION, RunReport, SweepReport, SweepRow, convolution_share,
                             error_ratio, from_json, layer_share_table, read_report, serialize, speedup,
                             sweep_to_csv, sweep_to_json, to_csv, to_json, write_report, write_sweep)


def outcome(epoch=0, layer_times=(), workers=1, test_errors=5):
    return EpochOutcome(
        epoch=epoch, eta=0.001 * 0.9 ** epoch, train_loss=12.5, train_images=100,
        validation=PhaseResult(100, 7, 20.0), test=PhaseResult(50, test_errors, 11.0),
        wall_times=(("train", 1.5), ("validation", 0.25), ("test", 0.125)),
        layer_times=tuple(layer_times), workers=workers, worker_images=(100,))


def report(epochs=2, layer_times=(), **kw):
    outcomes = tuple(outcome(e, layer_times) for e in range(epochs))
    fields = dict(arch="small", threads=1, epochs=epochs, seed=0, precision="f32", eta0=0.001, eta_factor=0.9,
                  train_images=100, test_images=50, outcomes=outcomes, wall_seconds=3.75,
                  host={"hardware_threads": 1})
    fields.update(kw)
    return RunReport(**fields)


class TestShares:
    def test_single_layer_is_everything(self):
        rows = layer_share_table([outcome(layer_times=[LayerTiming(1, "convolutional", 2.0, 0.0)])])
        conv = [r for r in rows if r.direction == "forward"]
        assert conv[0].percent == pytest.approx(100.0)

    def test_three_and_one_seconds(self):
        times = [LayerTiming(1, "convolutional", 3.0, 0.0), LayerTiming(2, "fullyconnected", 1.0, 0.0)]
        rows = {r.layer_kind: r for r in layer_share_table([outcome(layer_times=times)]) if r.direction == "forward"}
        assert rows["convolutional"].percent == pytest.approx(75.0)
        assert rows["fullyconnected"].percent == pytest.approx(25.0)

    def test_averaged_over_workers_and_epochs(self):
        times = [LayerTiming(1, "convolutional", 4.0, 2.0)]
        outcomes = [outcome(0, times, workers=2), outcome(1, times, workers=2)]
        rows = {r.direction: r for r in layer_share_table(outcomes)}
        assert rows["forward"].seconds == pytest.approx(2.0)
        assert rows["backward"].seconds == pytest.approx(1.0)
        assert convolution_share(rows.values()) == pytest.approx(100.0)

    def test_percentages_sum_to_hundred(self, tiny_spec, synthetic):
        outcomes, _ = train(tiny_spec, synthetic(20, 4), TrainConfig(epochs=1))
        assert sum(r.percent for r in layer_share_table(outcomes)) == pytest.approx(100.0)


class TestMetrics:
    def test_speedup_examples(self):
        assert speedup(10, 10) == 1.0
        assert speedup(295.5, 2.9) == pytest.approx(101.9, abs=0.05)
        assert speedup(3.0, 7.0) * speedup(7.0, 3.0) == pytest.approx(1.0)

    def test_speedup_needs_positive_times(self):
        with pytest.raises(ValueError):
            speedup(0, 1)

    def test_error_ratio(self):
        assert error_ratio(0.03, 0.02) == pytest.approx(1.5)
        with pytest.raises(ValueError):
            error_ratio(0.03, 0)

    def test_report_speedup(self):
        assert report(wall_seconds=2.0, baseline_wall_seconds=8.0).speedup == pytest.approx(4.0)
        assert report().speedup is None

    def test_epoch_count_checked(self):
        with pytest.raises(ValueError):
            report(epochs=2, outcomes=(outcome(),))
        assert report(epochs=5, outcomes=(outcome(),), diverged=True).final.epoch == 0


class TestSerialize:
    def test_json_round_trip(self):
        rep = report(layer_times=[LayerTiming(1, "convolutional", 1.0, 2.0)])
        assert from_json(to_json(rep)) == rep

    def test_json_carries_schema_and_layer_table(self):
        doc = json.loads(to_json(report(layer_times=[LayerTiming(1, "convolutional", 1.0, 2.0)])))
        assert doc["schema_version"] == SCHEMA_VERSION
        assert len(doc["layer_table"]) == 2

    def test_unknown_schema_rejected(self):
        doc = json.loads(to_json(report()))
        doc["schema_version"] = 99
        with pytest.raises(ValueError):
            from_json(json.dumps(doc))

    def test_csv_row_count(self):
        times = [LayerTiming(1, "convolutional", 1.0, 2.0), LayerTiming(2, "maxpooling", 0.5, 0.5)]
        text = to_csv(report(epochs=3, layer_times=times))
        rows = list(csv.reader(io.StringIO(text)))
        assert rows[0] == list(CSV_FIELDS)
        assert len(rows) == 1 + 3 + 4

    def test_serialize_dispatch(self):
        rep = report()
        assert serialize(rep, "csv") == to_csv(rep)
        with pytest.raises(ValueError):
            serialize(rep, "xml")

    def test_write_and_read(self, tmp_path):
        rep = report()
        json_path, csv_path = write_report(rep, tmp_path / "runs")
        assert json_path.name == "small_1t_2ep_0.json"
        assert csv_path.exists()
        assert read_report(json_path) == rep


class TestSweep:
    def _sweep(self):
        rows = (SweepRow(1, 10.0, 1.0, 10.0, 0.0, 0.05, 1.0),
                SweepRow(2, 6.0, 10.0 / 6.0, 5.0, 0.2, 0.06, 1.2))
        return SweepReport("small", 1, 1000, 167, 14.2, rows, host={})

    def test_average_deviation(self):
        assert self._sweep().average_deviation == pytest.approx(0.1)

    def test_csv(self):
        rows = list(csv.DictReader(io.StringIO(sweep_to_csv(self._sweep()))))
        assert [int(r["threads"]) for r in rows] == [1, 2]
        assert float(rows[1]["deviation"]) == pytest.approx(0.2)

    def test_json_and_files(self, tmp_path):
        doc = json.loads(sweep_to_json(self._sweep()))
        assert doc["average_deviation"] == pytest.approx(0.1)
        paths = write_sweep(self._sweep(), tmp_path)
        assert [p.name for p in paths] == ["small_sweep_1ep.json", "small_sweep_1ep.csv"]
