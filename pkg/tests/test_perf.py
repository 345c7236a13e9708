import math
import warnings

import pytest

from chaoscnn.arch import preset
from chaoscnn.perf import (ContentionTable, MissingContentionError, PerfModelError, PerfParams,
                           average_deviation, calibrate_operation_factor, cpi_for, deviation,
                           extrapolate_contention, load_contention, load_params, measure_contention,
                           predict_sweep, predict_time, save_contention, t_comp, t_mem)

PREDICTED_THREADS = (480, 960, 1920, 3840)


def small_params(p=240, ep=70, i=60000, it=10000, **kw):
    return load_params().params("small", i=i, it=it, ep=ep, p=p, **kw)


class TestCpi:
    @pytest.mark.parametrize("p,cpi", [(1, 1), (60, 1), (122, 1), (123, 1.5), (180, 1.5), (183, 1.5),
                                       (184, 2), (240, 2), (3840, 2)])
    def test_examples(self, p, cpi):
        assert cpi_for(p) == cpi

    def test_zero_threads(self):
        with pytest.raises(PerfModelError):
            cpi_for(0)


class TestTMem:
    def test_small_240(self):
        assert t_mem(small_params(), 1.40e-2) == pytest.approx(245.0)

    def test_zero_epochs(self):
        assert t_mem(small_params(ep=0), 1.40e-2) == 0

    def test_doubling_threads_halves(self):
        assert t_mem(small_params(p=480), 0.01) == pytest.approx(t_mem(small_params(p=240), 0.01) / 2)

    def test_missing(self):
        with pytest.raises(MissingContentionError):
            t_mem(small_params())


class TestContention:
    def test_shipped_table_verbatim(self):
        table = load_contention()
        assert table.entries["small"][240] == 1.40e-2
        assert table.entries["large"][3840] == 2.19
        assert sorted(table.measured("medium")) == [1, 15, 30, 60, 120, 180, 240]

    @pytest.mark.parametrize("arch", ["small", "medium", "large"])
    def test_extrapolation_matches_predicted_rows(self, arch):
        table = load_contention()
        for p in PREDICTED_THREADS:
            assert extrapolate_contention(table, p, arch) == pytest.approx(table.entries[arch][p], rel=0.02)

    def test_small_examples(self):
        table = load_contention()
        assert extrapolate_contention(table, 480, "small") == pytest.approx(2.78e-2, rel=0.02)
        assert extrapolate_contention(table, 3840, "small") == pytest.approx(2.25e-1, rel=0.02)

    def test_measured_point_untouched(self):
        table = load_contention()
        for arch in table.architectures:
            assert extrapolate_contention(table, 240, arch) == table.entries[arch][240]

    def test_proportional_rule_misses_medium(self):
        table = load_contention()
        c = extrapolate_contention(table, 480, "medium", rule="proportional")
        assert c == pytest.approx(3.83e-2 * 2)
        assert abs(c / 7.31e-2 - 1) > 0.02

    def test_inside_measured_range_rejected(self):
        with pytest.raises(MissingContentionError):
            extrapolate_contention({1: 0.0, 100: 1.0}, 50)

    def test_extrapolation_never_decreases(self):
        points = {1: 0.0, 10: 5.0, 20: 5.0, 30: 5.0}
        assert extrapolate_contention(points, 40) >= 5.0

    def test_lookup_gap_is_an_error(self):
        table = load_contention()
        with pytest.raises(MissingContentionError):
            table.lookup("small", 100)

    def test_invariants_enforced(self):
        with pytest.raises(PerfModelError):
            ContentionTable({"x": {1: 0.1, 2: 0.05}})
        with pytest.raises(PerfModelError):
            ContentionTable({"x": {1: -0.1}})

    def test_round_trip(self, tmp_path):
        table = ContentionTable({"small": {1: 0.0, 4: 1.5e-5}, "tiny": {1: 0.0}})
        path = save_contention(table, tmp_path / "c.csv")
        assert load_contention(path).entries == table.entries

    def test_bad_file(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("p,small\n1,0\n")
        with pytest.raises(PerfModelError):
            load_contention(path)


class TestPredict:
    def test_small_240(self):
        assert predict_time("small", small_params()) == pytest.approx(532, rel=0.01)

    def test_small_480(self):
        assert predict_time("small", small_params(p=480)) == pytest.approx(393, rel=0.02)

    def test_large_3840(self):
        params = load_params().params("large", i=60000, it=10000, ep=15, p=3840)
        assert predict_time("large", params) == pytest.approx(2208, rel=0.01)

    @pytest.mark.parametrize("arch,variant,epochs,minutes", [
        ("small", "a", 70, (6.6, 5.4, 4.9, 4.6)),
        ("medium", "b", 70, (36.8, 23.9, 17.4, 14.2)),
        ("large", "a", 15, (92.9, 60.8, 44.8, 36.8)),
    ])
    def test_predicted_minutes_table(self, arch, variant, epochs, minutes):
        rows = predict_sweep(arch, PREDICTED_THREADS, epochs=epochs, images=60000, test_images=10000,
                             variant=variant)
        for row, expected in zip(rows, minutes):
            assert row.minutes == pytest.approx(expected, rel=0.02)

    def test_doubling_images_and_epochs(self):
        base = predict_time("small", small_params())
        doubled = predict_time("small", small_params(ep=140, i=120000, it=20000))
        assert doubled / base == pytest.approx(35.0 / 8.9, rel=0.02)

    @staticmethod
    def _epoch_ratio(arch, variant, p):
        model = load_params()
        one = predict_time(arch, model.params(arch, i=60000, it=10000, ep=70, p=p), variant)
        two = predict_time(arch, model.params(arch, i=60000, it=10000, ep=140, p=p), variant)
        return two / one

    @pytest.mark.parametrize("arch", ["small", "medium", "large"])
    @pytest.mark.parametrize("variant", ["a", "b"])
    def test_linear_in_epochs(self, arch, variant):
        for p in (240, 480, 960):
            assert 1.9 <= self._epoch_ratio(arch, variant, p) <= 2.0

    def test_fixed_term_bends_large_at_high_thread_counts(self):
        # the 1e11-operation preparation term stays constant while the per-image block shrinks with p
        assert self._epoch_ratio("large", "a", 3840) == pytest.approx(1.79, abs=0.01)
        assert 1.9 <= self._epoch_ratio("large", "b", 3840) <= 2.0

    def test_decreasing_within_cpi_regime(self):
        times = [predict_time("small", small_params(p=p)) for p in (15, 30, 60, 120)]
        assert times == sorted(times, reverse=True)

    def test_variants_differ_only_in_sequential_term(self):
        params = small_params(contention=0.0)
        a = t_comp(params, "a")
        b = t_comp(params, "b")
        seq_ops = (params.prep + 4 * params.i + 2 * params.it + 10 * params.ep) / params.s
        assert a - seq_ops * params.operation_factor == pytest.approx(b - params.t_prep)

    def test_unknown_variant(self):
        with pytest.raises(PerfModelError):
            predict_time("small", small_params(contention=0.0), variant="c")

    def test_non_positive_parameter(self):
        with pytest.raises(PerfModelError):
            predict_time("small", small_params(contention=0.0).with_(s=0))

    def test_unknown_architecture(self):
        with pytest.raises(PerfModelError):
            load_params().params("huge", i=1, it=1, ep=1, p=1)


class TestDeviation:
    def test_examples(self):
        assert deviation(110, 100) == pytest.approx(0.10)
        assert deviation(42.0, 42.0) == 0
        assert average_deviation([(110, 100), (90, 100)]) == pytest.approx(0.10)

    def test_predicted_must_be_positive(self):
        with pytest.raises(PerfModelError):
            deviation(1.0, 0.0)

    def test_calibration_hits_measurement(self):
        params = PerfParams(i=1000, it=100, ep=1, p=1, fprop=5.8e4, bprop=5.24e5, prep=0, contention=0.0)
        of = calibrate_operation_factor(params, 12.5)
        assert predict_time("small", params.with_(operation_factor=of)) == pytest.approx(12.5)


class TestParamsFile:
    def test_shipped_constants(self):
        model = load_params()
        assert (model.s, model.operation_factor, model.cores) == (1.238e9, 15, 61)
        assert model.architectures["medium"].bprop == 6119000
        assert model.architectures["large"].prep == 1e11

    def test_malformed(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text('{"architectures": {"small": {"fprop": 1}}}')
        with pytest.raises(PerfModelError):
            load_params(path)


class TestMeasure:
    def test_single_thread_is_zero(self):
        assert measure_contention(preset("small"), 1, repetitions=5) == 0.0

    def test_non_negative(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            value = measure_contention(preset("small"), 2, repetitions=20, trials=1)
        assert value >= 0.0 and math.isfinite(value)

    def test_oversubscription_warns(self):
        with pytest.warns(RuntimeWarning, match="hardware threads"):
            measure_contention(preset("small"), 2, repetitions=5, hardware=1, trials=1)
