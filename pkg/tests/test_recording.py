import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidarfog.atmosphere import VisibilityTrace, dissipation_profile
from lidarfog.lidar import LidarConfig, simulate_reference, simulate_test
from lidarfog.recording import (
    AveragedSeries, DisappearSample, EmptyROI, ExtractionLog, LaserROI, Recording,
    assemble_dataset, disappear_visibility, extract_roi, extract_samples, lock_second,
    per_second_average, read_dataset, read_rois, split_by_class, write_dataset, write_rois,
)
from lidarfog.scene import Scene, SceneConfig, TargetPlacement, build_scene

CFG = LidarConfig()


def _scene(*placements):
    return build_scene(SceneConfig(tuple(placements)))


def _recording(t, range_m, trace=None, ring=0, az=900):
    t = np.asarray(t, dtype=float)
    trace = trace or VisibilityTrace(0, np.linspace(10.0, 100.0, 11))
    n = t.size
    return Recording(t, np.full(n, ring, np.int16), np.full(n, az, np.int16),
                     np.asarray(range_m, dtype=float), np.full(n, 20.0), trace, Scene(), CFG, 0)


def _roi(beams=((0, 900),), truth=15.0):
    return LaserROI("t", "p", tuple(beams), truth, (truth,) * len(beams), (20.0,) * len(beams))


def _series(ranges, vis=None, start=0):
    ranges = np.asarray(ranges, dtype=float)
    n = ranges.size
    seconds = np.arange(start, start + n)
    vis = np.arange(10.0, 10.0 + n) if vis is None else np.asarray(vis, dtype=float)
    return AveragedSeries((0, 900), seconds, ranges, np.full(n, 20.0), vis)


class TestROI:
    @pytest.fixture(scope="class")
    @staticmethod
    def boards():
        scene = _scene(TargetPlacement("board_A", 15.0, 0.9), TargetPlacement("board_C", 15.0))
        return simulate_reference(scene, CFG, 0, duration=3)

    def test_board_roi_truth(self, boards):
        (roi,) = extract_roi(boards, "board_A")
        assert roi.truth_range == 15.0
        assert len(roi.beams) > 5
        assert all(abs(r - 15.0) <= 0.3 for r in roi.beam_range)

    def test_missing_target(self, boards):
        with pytest.raises(EmptyROI):
            extract_roi(boards, "car")

    def test_car_parts(self):
        clear = simulate_reference(_scene(TargetPlacement("car", 10.0)), CFG, 0, duration=2)
        rois = {r.part_id: r for r in extract_roi(clear, "car")}
        assert set(rois) == {"plate", "strong", "weak"}
        assert rois["plate"].truth_reflectivity > 100.0

    def test_rois_do_not_share_beams(self, boards):
        a = set(extract_roi(boards, "board_A")[0].beams)
        c = set(extract_roi(boards, "board_C")[0].beams)
        assert not a & c

    def test_roundtrip(self, boards, tmp_path):
        rois = extract_roi(boards, "board_A")
        write_rois(rois, tmp_path / "r.json")
        assert read_rois(tmp_path / "r.json") == rois

    def test_empty_beams_rejected(self):
        with pytest.raises(EmptyROI):
            LaserROI("t", "p", (), 15.0, (), ())


class TestAveraging:
    def test_identical_returns(self):
        rec = _recording(np.arange(10) / 10, [15.0] * 10)
        (s,) = per_second_average(rec, _roi())
        assert s.mean_range.tolist() == [15.0]

    def test_alternating_returns(self):
        rec = _recording(np.arange(10) / 10, [14.9, 15.1] * 5)
        (s,) = per_second_average(rec, _roi())
        assert s.mean_range[0] == pytest.approx(15.0, abs=1e-12)

    def test_clutter_mix_is_averaged(self):
        rec = _recording([0.0, 0.3, 0.6], [5.1, 5.2, 15.0])
        (s,) = per_second_average(rec, _roi())
        assert s.mean_range[0] == pytest.approx(25.3 / 3, rel=1e-12)
        assert s.mean_range[0] == pytest.approx(8.4333, abs=1e-4)

    def test_silent_seconds_are_skipped(self):
        rec = _recording([0.1, 0.2, 3.5], [15.0, 15.0, 15.0])
        (s,) = per_second_average(rec, _roi())
        assert s.seconds.tolist() == [0, 3]
        assert s.visibility.tolist() == [10.0, 37.0]

    def test_other_beams_ignored(self):
        rec = _recording([0.1, 0.2], [15.0, 3.0])
        rec.az[1] = 901
        (s,) = per_second_average(rec, _roi())
        assert s.mean_range.tolist() == [15.0]

    @given(st.lists(st.floats(0.5, 30.0), min_size=1, max_size=10))
    def test_mean_within_extremes(self, ranges):
        t = np.arange(len(ranges)) / 10
        (s,) = per_second_average(_recording(t, ranges), _roi())
        assert min(ranges) - 1e-9 <= s.mean_range[0] <= max(ranges) + 1e-9


class TestLock:
    def test_immediate_lock(self):
        s = _series([15.0] * 10)
        assert disappear_visibility(s, 15.0) == 10.0
        assert lock_second(s, 15.0) == (0, 10.0)

    def test_never_locks(self):
        assert disappear_visibility(_series([3.0] * 10), 15.0) is None

    def test_empty(self):
        assert disappear_visibility(_series([]), 15.0) is None

    def test_fig7_shape(self):
        # under-ranging until V = 77, then correct
        vis = np.arange(60.0, 100.0)
        ranges = np.where(vis < 77.0, 3.0, 15.02)
        assert disappear_visibility(_series(ranges, vis), 15.0) == 77.0

    def test_short_run_does_not_lock(self):
        ranges = [3.0] * 5 + [15.0] * 4 + [3.0] * 5 + [15.0] * 6
        assert lock_second(_series(ranges), 15.0) == (14, 24.0)

    def test_gap_breaks_the_run(self):
        s = AveragedSeries((0, 0), np.array([0, 1, 2, 4, 5, 6]), np.full(6, 15.0),
                           np.full(6, 20.0), np.arange(10.0, 16.0))
        assert lock_second(s, 15.0, window=3) == (0, 10.0)
        assert lock_second(s, 15.0, window=4) is None

    def test_lowest_visibility_wins(self):
        # the trace noise can dip the visibility after an earlier lock
        vis = [50.0, 51.0, 52.0, 53.0, 54.0, 55.0, 40.0, 41.0, 42.0, 43.0, 44.0]
        assert lock_second(_series([15.0] * 11, vis), 15.0) == (6, 40.0)

    def test_bad_parameters(self):
        with pytest.raises(ValueError):
            lock_second(_series([15.0]), 15.0, sigma=0.0)

    @given(st.lists(st.booleans(), min_size=1, max_size=40), st.integers(1, 6))
    def test_lock_matches_brute_force(self, good, window):
        ranges = np.where(good, 15.0, 2.0)
        s = _series(ranges)
        expect = None
        for k in range(len(good) - window + 1):
            if all(good[k:k + window]):
                expect = (k, 10.0 + k)
                break
        assert lock_second(s, 15.0, window=window) == expect


class TestDataset:
    @pytest.fixture(scope="class")
    @staticmethod
    def pair():
        scene = _scene(TargetPlacement("board_C", 12.0, 0.6), TargetPlacement("board_B", 12.0, -0.6))
        trace = dissipation_profile(10.0, 120.0, 60)
        return simulate_test(scene, trace, CFG, 1), simulate_reference(scene, CFG, 1, duration=3)

    def test_counts_follow_rois(self, pair):
        fog, clear = pair
        log = ExtractionLog()
        samples = extract_samples(fog, clear, log=log)
        n_beams = sum(len(r.beams) for t in clear.scene.targets for r in extract_roi(clear, t.target_id))
        assert len(log.entries) == n_beams
        assert len(samples) == sum(e["v_dis_m"] is not None for e in log.entries)
        assert len(samples) > 0.8 * n_beams

    def test_unlocked_beams_give_no_sample(self, pair):
        _, clear = pair
        trace = VisibilityTrace(0, np.full(30, 10.0))
        thick = simulate_test(clear.scene, trace, CFG, 1)
        assert extract_samples(thick, clear) == []

    def test_samples_carry_beam_truth(self, pair):
        fog, clear = pair
        for s in extract_samples(fog, clear):
            assert abs(s.mean_range - 12.0) < 0.3
            assert 10.0 <= s.v_dis <= 120.0

    def test_assemble_pools_in_order(self, pair):
        one = extract_samples(*pair)
        both = assemble_dataset([pair, pair], names=["a", "b"])
        assert both == one + one

    def test_split(self):
        samples = [DisappearSample(10.0, b, 50.0) for b in (99.9, 100.0, 5, 150, 1, 2, 3, 200, 250, 0)]
        d, r = split_by_class(samples)
        assert len(d) + len(r) == 10
        assert [s.reflectivity for s in r] == [100.0, 150, 200, 250]

    def test_csv_roundtrip(self, pair, tmp_path):
        samples = extract_samples(*pair)
        write_dataset(samples, tmp_path / "d.csv")
        assert read_dataset(tmp_path / "d.csv") == samples

    def test_csv_missing_column(self, tmp_path):
        (tmp_path / "d.csv").write_text("range_m,reflectivity\n1,2\n")
        with pytest.raises(ValueError, match="missing columns"):
            read_dataset(tmp_path / "d.csv")


class TestRecordingIO:
    @pytest.mark.parametrize("suffix", [".jsonl", ".jsonl.gz"])
    def test_roundtrip(self, tmp_path, suffix):
        scene = _scene(TargetPlacement("board_B", 10.0))
        rec = simulate_test(scene, dissipation_profile(10.0, 60.0, 5), CFG, 2)
        p = tmp_path / f"r{suffix}"
        rec.to_jsonl(p)
        back = Recording.from_jsonl(p)
        for col in ("t", "ring", "az", "range_m", "refl"):
            np.testing.assert_array_equal(getattr(back, col), getattr(rec, col))
        assert back.scene == rec.scene and back.config == rec.config
        np.testing.assert_array_equal(back.trace.visibility, rec.trace.visibility)

    def test_gzip_is_byte_stable(self, tmp_path):
        rec = simulate_reference(_scene(TargetPlacement("board_B", 10.0)), CFG, 0, duration=1)
        rec.to_jsonl(tmp_path / "a.jsonl.gz")
        rec.to_jsonl(tmp_path / "b.jsonl.gz")
        assert (tmp_path / "a.jsonl.gz").read_bytes() == (tmp_path / "b.jsonl.gz").read_bytes()

    def test_external_trace_replaces_embedded(self, tmp_path):
        rec = simulate_reference(_scene(TargetPlacement("board_B", 10.0)), CFG, 0, duration=2)
        rec.to_jsonl(tmp_path / "a.jsonl")
        other = VisibilityTrace(0, np.array([20.0, 30.0, 40.0]))
        assert Recording.from_jsonl(tmp_path / "a.jsonl", other).trace is other

    def test_timestamps_must_fit_the_trace(self):
        with pytest.raises(ValueError, match="outside"):
            _recording([0.0, 50.0], [1.0, 1.0])
