import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidarfog import evaluate as ev
from lidarfog.gpr import GPModel, KernelParams, NormalizationBounds, predict
from lidarfog.recording import DisappearSample
from lidarfog.scene import ReflectorClass

D, R = ReflectorClass.DIFFUSE, ReflectorClass.RETRO


def _flat_model(regime, level=50.0, amplitude=0.04, noise=0.05):
    """A model that predicts ~``level`` everywhere with a known std."""
    lo, hi = (0.0, 99.0) if regime is D else (100.0, 255.0)
    b = NormalizationBounds((10.0, 30.0), (lo, hi), (level, level + 100.0))
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    return GPModel(X, np.zeros(4), KernelParams(amplitude, 0.5, noise), b, regime)


def _at(model, r, b, offset_std=0.0, include_noise=True):
    p = model.predict(np.array([[r, b]]), include_noise=include_noise)
    return DisappearSample(r, b, float(p.mean[0] + offset_std * p.std[0]))


class TestFailure:
    def test_at_mean_is_not_failed(self):
        m = _flat_model(D)
        rep = ev.failure_rate(m, None, [_at(m, 15.0, 20.0)])
        assert rep.overall[D] == (1, 0)

    def test_outside_two_sigma_fails(self):
        m = _flat_model(D)
        rep = ev.failure_rate(m, None, [_at(m, 15.0, 20.0, 2.5), _at(m, 15.0, 20.0, 1.9)])
        assert rep.overall[D] == (2, 1)
        assert rep.rate(D) == 0.5

    def test_noise_widens_the_band(self):
        m = _flat_model(D, noise=0.2)
        s = _at(m, 15.0, 20.0, 2.5, include_noise=False)
        assert ev.failure_rate(m, None, [s], include_noise=False).overall[D] == (1, 1)
        assert ev.failure_rate(m, None, [s], include_noise=True).overall[D] == (1, 0)

    def test_classes_routed_to_their_model(self):
        md, mr = _flat_model(D, 40.0), _flat_model(R, 10.0)
        rep = ev.failure_rate(md, mr, [_at(md, 12.0, 30.0), _at(mr, 12.0, 150.0, 3.0)])
        assert rep.overall == {D: (1, 0), R: (1, 1)}

    def test_bins_and_outside(self):
        m = _flat_model(D)
        samples = [_at(m, r, 20.0) for r in (5.0, 12.0, 12.5, 29.0)] + [DisappearSample(31.0, 20.0, 0.0)]
        rep = ev.failure_rate(m, None, samples)
        counts = {(b.range_lo, b.regime): b.n for b in rep.bins}
        assert counts[(0.0, D)] == 1 and counts[(10.0, D)] == 2 and counts[(25.0, D)] == 1
        assert rep.outside == 1 and rep.overall[D] == (4, 0)

    def test_missing_model(self):
        with pytest.raises(ValueError, match="no retro model"):
            ev.failure_rate(_flat_model(D), None, [DisappearSample(15.0, 150.0, 20.0)])

    def test_text_marks_empty_cells(self):
        m = _flat_model(D)
        text = ev.failure_rate(m, None, [_at(m, 15.0, 20.0)]).to_text()
        assert ev.EMPTY in text and "0.0%" in text


class TestErrorTable:
    def test_exact_predictions(self):
        m = _flat_model(D)
        t = ev.error_table(m, None, [_at(m, r, b) for r in (12.0, 22.0) for b in (5.0, 45.0)])
        assert all(c.mean_abs_error in (None, 0.0) for c in t.cells.values())
        assert t.cells[(0, 0)].n == 1

    def test_single_error(self):
        m = _flat_model(D)
        s = _at(m, 12.0, 5.0)
        t = ev.error_table(m, None, [DisappearSample(12.0, 5.0, s.v_dis + 3.2)])
        assert t.cells[(0, 0)].mean_abs_error == pytest.approx(3.2)
        assert t.row_overall(0) == pytest.approx(3.2)

    def test_failed_samples_not_scored(self):
        m = _flat_model(D)
        t = ev.error_table(m, None, [_at(m, 12.0, 5.0, 5.0)])
        assert t.cells[(0, 0)] == ev.ErrorCell(0, 1, None)

    def test_trend(self):
        m = _flat_model(D)
        samples = []
        for k, r in enumerate((12.0, 17.0, 22.0, 27.0)):
            s = _at(m, r, 5.0)
            samples.append(DisappearSample(r, 5.0, s.v_dis + 0.5 * (k + 1)))
        flag = ev.error_trend(ev.error_table(m, None, samples))
        assert flag["increasing"]
        assert list(flag["mean_abs_error_m"].values()) == pytest.approx([0.5, 1.0, 1.5, 2.0])

    def test_trend_fails_on_empty_bin(self):
        m = _flat_model(D)
        flag = ev.error_trend(ev.error_table(m, None, [_at(m, 12.0, 5.0)]))
        assert not flag["increasing"]

    def test_retro_pooling_ignores_diffuse_columns(self):
        md, mr = _flat_model(D), _flat_model(R)
        samples = [DisappearSample(12.0, 5.0, _at(md, 12.0, 5.0).v_dis + 9.0), _at(mr, 12.0, 150.0)]
        t = ev.error_table(md, mr, samples)
        assert ev.class_error_by_range(t, R)[0] == 0.0
        assert ev.class_error_by_range(t, D)[0] == pytest.approx(9.0)


class TestGrid:
    def test_single_cell_matches_predict(self):
        m = _flat_model(D)
        (row,) = ev.prediction_grid(m, [15.0], [40.0])
        mean, std = predict(m, [15.0, 40.0])
        assert (row.mean, row.std) == (mean, std)

    def test_pair_picks_by_class(self):
        md, mr = _flat_model(D, 80.0), _flat_model(R, 10.0)
        rows = ev.prediction_grid((md, mr), [15.0], [50.0, 150.0])
        assert [g.regime for g in rows] == [D, R]

    def test_monotonicity_flags(self):
        rows = [ev.GridRow(r, b, 100.0 + r - b / 10, 1.0, False, D)
                for r in (10.0, 15.0) for b in (1.0, 50.0)]
        assert ev.grid_monotonicity(rows)["all_pass"]
        rows[0] = ev.GridRow(10.0, 1.0, 0.0, 1.0, False, D)
        flags = ev.grid_monotonicity(rows)
        assert not flags["all_pass"]
        assert flags["nonincreasing_in_reflectivity"]["10.0"] is False

    def test_reports_are_pure(self):
        md, mr = _flat_model(D), _flat_model(R)
        samples = [_at(md, 12.0, 5.0, 1.0), _at(mr, 20.0, 180.0, -0.5)]
        assert ev.error_table(md, mr, samples).to_csv() == ev.error_table(md, mr, samples).to_csv()
        g = ev.prediction_grid((md, mr))
        assert ev.grid_to_csv(g) == ev.grid_to_csv(ev.prediction_grid((md, mr)))
        assert len(ev.grid_to_text(g).splitlines()) == 1 + len(ev.GRID_RANGES)


class TestHoldout:
    @given(st.integers(0, 500), st.floats(0, 1), st.integers(0, 2**32))
    def test_partition(self, n, frac, seed):
        tr, te = ev.holdout_split(range(n), frac, seed)
        assert sorted(np.concatenate([tr, te]).tolist()) == list(range(n))
        assert te.size == int(round(frac * n))

    def test_seeded(self):
        a = ev.holdout_split(range(100), 0.2, 3)
        b = ev.holdout_split(range(100), 0.2, 3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[1], ev.holdout_split(range(100), 0.2, 4)[1])
