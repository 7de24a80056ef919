import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscred.errors import ConfigError, CSVFormatError, DataError, PlacementError, ShapeError
from mscred.timeseries import (
    AnomalyLabel,
    InjectConfig,
    MultivariateSeries,
    SplitSpec,
    SynthConfig,
    generate_synthetic,
    inject_anomalies,
    load_csv,
    load_labels,
    make_rng,
    pulse_shape,
    save_labels,
    split,
    write_csv,
)


def test_rng_is_reproducible():
    assert np.array_equal(make_rng(7).standard_normal(5), make_rng(7).standard_normal(5))
    assert not np.array_equal(make_rng(7).standard_normal(5), make_rng(8).standard_normal(5))


class TestSeries:
    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            MultivariateSeries(np.zeros(10))
        with pytest.raises(ShapeError):
            MultivariateSeries(np.zeros((1, 10)))
        with pytest.raises(ShapeError):
            MultivariateSeries(np.zeros((2, 10)), names=("a",))

    def test_non_finite_rejected(self):
        v = np.zeros((2, 5))
        v[1, 3] = np.nan
        with pytest.raises(DataError):
            MultivariateSeries(v)

    def test_values_are_read_only(self):
        s = MultivariateSeries(np.zeros((2, 5)))
        with pytest.raises(ValueError):
            s.values[0, 0] = 1.0
        assert s.names == ("s0", "s1")
        assert s.steps == range(0, 5)


class TestCSV:
    def test_round_trip_is_bitwise(self, tmp_path, rng):
        s = MultivariateSeries(rng.normal(size=(4, 50)), names=("a", "b", "c", "d"))
        write_csv(s, tmp_path / "x.csv")
        back = load_csv(tmp_path / "x.csv")
        assert back.names == s.names
        assert np.array_equal(back.values, s.values)

    def test_headerless(self, tmp_path):
        (tmp_path / "x.csv").write_text("1,2\n3,4\n5,6\n")
        s = load_csv(tmp_path / "x.csv", header=False)
        assert s.n == 2 and s.T == 3
        assert s.values[1].tolist() == [2.0, 4.0, 6.0]

    def test_ragged_row_reports_line(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n3\n")
        with pytest.raises(ShapeError, match="line 3"):
            load_csv(tmp_path / "x.csv")

    def test_bad_number_reports_line(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n3,oops\n")
        with pytest.raises(CSVFormatError) as info:
            load_csv(tmp_path / "x.csv")
        assert info.value.line == 3

    def test_empty_file(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n")
        with pytest.raises(DataError):
            load_csv(tmp_path / "x.csv")


class TestSplits:
    def test_default_fractions(self):
        sp = SplitSpec.standard(20000)
        assert (sp.train, sp.valid, sp.test) == ((0, 8000), (8000, 10000), (10000, 20000))

    def test_views_carry_offsets(self, rng):
        s = MultivariateSeries(rng.normal(size=(3, 100)))
        tr, va, te = split(s, SplitSpec((0, 40), (40, 50), (50, 100)))
        assert (tr.offset, va.offset, te.offset) == (0, 40, 50)
        assert np.shares_memory(te.values, s.values)
        assert np.array_equal(np.concatenate([tr.values, va.values, te.values], axis=1), s.values)

    @pytest.mark.parametrize("spec", [((0, 50), (40, 60), (60, 100)), ((0, 40), (40, 40), (40, 100)), ((0, 40), (40, 50), (50, 101))])
    def test_invalid(self, spec):
        with pytest.raises(DataError):
            SplitSpec(*spec).validate(100)


class TestGenerator:
    def test_shape_and_determinism(self):
        cfg = SynthConfig(n=5, T=300, seed=3)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        assert a.values.shape == (5, 300)
        assert np.array_equal(a.values, b.values)

    def test_noise_free_matches_closed_form(self):
        cfg = SynthConfig(n=4, T=200, noise=0.0, seed=1)
        s = generate_synthetic(cfg, kinds=[0, 1, 0, 1], t0=[50, 60, 70, 80], omega=[40, 42, 44, 46])
        t = np.arange(200)
        for i, (f, t0, om) in enumerate([(np.sin, 50, 40), (np.cos, 60, 42), (np.sin, 70, 44), (np.cos, 80, 46)]):
            np.testing.assert_allclose(s.values[i], f((t - t0) / om), rtol=0, atol=1e-15)

    def test_noise_is_scaled_standard_normal(self):
        base = SynthConfig(n=3, T=5000, noise=0.0, seed=2)
        noisy = SynthConfig(n=3, T=5000, noise=0.3, seed=2)
        diff = generate_synthetic(noisy).values - generate_synthetic(base).values
        # same draws, so the difference is exactly lambda * eps
        assert abs(diff.std() - 0.3) < 0.01
        assert abs(diff.mean()) < 0.01

    def test_drawn_parameters_in_range(self):
        cfg = SynthConfig(n=6, T=20000, noise=0.0, seed=4)
        s = generate_synthetic(cfg)
        # every clean series is a unit sinusoid
        assert np.all(np.abs(s.values) <= 1.0)
        assert np.all(s.values.max(axis=1) > 0.99)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SynthConfig(n=1))
        with pytest.raises(ConfigError):
            generate_synthetic(SynthConfig(omega_min=50, omega_max=40))


def _base_series(seed=0, n=6, T=1200):
    return generate_synthetic(SynthConfig(n=n, T=T, seed=seed))


class TestInjection:
    def test_pulse_shape(self):
        p = pulse_shape(30)
        assert p.shape == (30,)
        assert np.all(p > 0) and p.max() <= 1.0
        np.testing.assert_allclose(p, p[::-1], atol=1e-15)

    def test_labels_and_touched_cells(self):
        s = _base_series()
        out, labels = inject_anomalies(s, 5, [30, 60, 90], 3, (600, 1200), seed=1, reference=(0, 500))
        assert len(labels) == 5
        mask = np.zeros(s.values.shape, bool)
        for lab in labels:
            lab.validate(s.n, s.T)
            assert lab.duration in (30, 60, 90) and len(lab.root_causes) == 3
            assert 600 <= lab.start and lab.end <= 1200
            for c in lab.root_causes:
                mask[c, lab.start : lab.end] = True
        assert np.array_equal(out.values[~mask], s.values[~mask])
        assert np.all(out.values[mask] != s.values[mask])
        starts = [lab.start for lab in labels]
        assert starts == sorted(starts)
        for a, b in zip(labels, labels[1:]):
            assert a.end <= b.start

    def test_injected_mean_shift(self):
        # the region mean moves by at least 3 standard errors of the
        # pre-injection mean on every cause series
        s = _base_series(n=8, T=3000)
        out, labels = inject_anomalies(s, 5, [30, 60, 90], 3, (1500, 3000), seed=5, reference=(0, 1200))
        sd = s.values[:, :1200].std(axis=1)
        for lab in labels:
            for c in lab.root_causes:
                before = s.values[c, lab.start : lab.end].mean()
                after = out.values[c, lab.start : lab.end].mean()
                assert abs(after - before) >= 3 * sd[c] / np.sqrt(lab.duration)

    def test_min_gap(self):
        s = _base_series(T=3000)
        _, labels = inject_anomalies(s, 5, [30, 60, 90], 2, (0, 3000), seed=2, min_gap=100)
        for a, b in zip(labels, labels[1:]):
            assert b.start - a.end >= 100

    def test_region_too_small(self):
        s = _base_series()
        with pytest.raises(PlacementError):
            inject_anomalies(s, 5, [90], 3, (0, 300), seed=0, max_tries=200)
        with pytest.raises(PlacementError):
            inject_anomalies(s, 1, [90], 3, (0, 50), seed=0)

    def test_too_many_causes(self):
        with pytest.raises(ConfigError):
            inject_anomalies(_base_series(), 1, [30], 7, (0, 1200), seed=0)

    def test_deterministic(self):
        s = _base_series()
        a = inject_anomalies(s, 3, [30, 60], 2, (0, 1200), seed=9)
        b = inject_anomalies(s, 3, [30, 60], 2, (0, 1200), seed=9)
        assert a[1] == b[1] and np.array_equal(a[0].values, b[0].values)

    def test_labels_json_round_trip(self, tmp_path):
        labels = [AnomalyLabel(10, 30, (1, 2, 3)), AnomalyLabel(100, 60, (0, 4, 5))]
        save_labels(labels, tmp_path / "l.json")
        assert load_labels(tmp_path / "l.json") == labels

    @settings(max_examples=100)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_labels_valid_for_any_seed(self, seed):
        s = _SERIES
        out, labels = inject_anomalies(s, 5, [30, 60, 90], 3, (400, 1200), seed=seed)
        touched = np.zeros(s.values.shape, bool)
        for lab in labels:
            lab.validate(s.n, s.T)
            assert len(set(lab.root_causes)) == 3
            for c in lab.root_causes:
                touched[c, lab.start : lab.end] = True
        assert np.array_equal(out.values[~touched], s.values[~touched])


_SERIES = _base_series()


def test_inject_config_round_trip():
    cfg = InjectConfig(count=4, durations=(30, 90), min_gap=10)
    assert InjectConfig.from_dict(cfg.to_dict()) == cfg
