import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidarfog.rng import substream
from lidarfog.scene import (
    TEMPLATES, OverlappingTargets, RangeOutOfChamber, Ray, ReflectivityDistribution,
    ReflectorClass, Scene, SceneConfig, SceneError, TargetPart, TargetPlacement, TargetSpec,
    UnknownTemplate, build_scene, classify_reflectivity, intersect, intersect_many,
    sample_reflectivity,
)


def _scene(*placements, **kw):
    return build_scene(SceneConfig(tuple(placements), **kw))


def _boresight(height=1.25):
    return Ray((0.0, 0.0, height), (1.0, 0.0, 0.0))


class TestBuildScene:
    def test_board_a_template_mean(self):
        s = _scene(TargetPlacement("board_A", 15.0))
        part = s.target("board_A").parts[0]
        assert part.reflectivity.mean == 2.75
        assert s.target("board_A").range_m == 15.0

    def test_sign_2_is_retro(self):
        s = _scene(TargetPlacement("traffic_sign_2", 15.0))
        part = s.target("traffic_sign_2").parts[0]
        assert part.reflectivity.mean == 209.2
        assert part.reflector_class is ReflectorClass.RETRO

    def test_empty_scene_is_valid(self):
        assert _scene().targets == ()

    def test_car_parts(self):
        car = _scene(TargetPlacement("car", 15.0)).target("car")
        assert {p.part_id for p in car.parts} == {"plate", "strong", "weak"}
        assert car.part("plate").reflectivity.mean == 133.04

    def test_unknown_template(self):
        with pytest.raises(UnknownTemplate):
            _scene(TargetPlacement("board_Z", 15.0))

    @pytest.mark.parametrize("r", [0.0, -1.0, 30.01])
    def test_range_outside_chamber(self, r):
        with pytest.raises(RangeOutOfChamber):
            _scene(TargetPlacement("board_A", r))

    def test_chamber_end_is_allowed(self):
        assert _scene(TargetPlacement("board_A", 30.0)).targets[0].range_m == 30.0

    def test_overlap_in_view(self):
        with pytest.raises(OverlappingTargets):
            _scene(TargetPlacement("board_A", 10.0), TargetPlacement("board_B", 20.0))

    def test_repeated_template_gets_numbered_ids(self):
        s = _scene(TargetPlacement("board_A", 10.0, 1.0), TargetPlacement("board_A", 10.0, -1.0))
        assert [t.target_id for t in s.targets] == ["board_A", "board_A_2"]

    def test_explicit_height(self):
        s = _scene(TargetPlacement("board_A", 10.0, height_m=0.5))
        assert s.targets[0].height_m == 0.5

    def test_config_roundtrip(self, tmp_path):
        cfg = SceneConfig((TargetPlacement("board_A", 12.5, 0.9), TargetPlacement("car", 20.0, -2.0)))
        p = tmp_path / "scene.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert SceneConfig.load(p) == cfg

    def test_config_rejects_unknown_field(self):
        with pytest.raises(SceneError, match="unknown fields"):
            SceneConfig.from_dict({"targets": [{"template": "board_A", "range_m": 5, "colour": 1}]})

    def test_config_requires_range(self):
        with pytest.raises(SceneError, match="required"):
            SceneConfig.from_dict({"targets": [{"template": "board_A"}]})

    def test_scene_dict_roundtrip(self):
        s = _scene(TargetPlacement("dummy_model", 10.0), TargetPlacement("traffic_sign_1", 10.0, 2.0))
        assert Scene.from_dict(s.to_dict()) == s


class TestTargets:
    def test_parts_must_not_overlap(self):
        d = ReflectivityDistribution(10.0, 1.0)
        with pytest.raises(SceneError, match="overlap"):
            TargetSpec("t", (TargetPart("a", d, 1.0, 1.0), TargetPart("b", d, 1.0, 1.0, 0.5)), 10.0)

    def test_touching_parts_are_fine(self):
        d = ReflectivityDistribution(10.0, 1.0)
        TargetSpec("t", (TargetPart("a", d, 1.0, 1.0), TargetPart("b", d, 1.0, 1.0, 0.0, 1.0)), 10.0)

    def test_bad_distribution(self):
        with pytest.raises(SceneError):
            ReflectivityDistribution(300.0, 1.0)
        with pytest.raises(SceneError):
            ReflectivityDistribution(10.0, -1.0)

    def test_templates_are_self_consistent(self):
        for name, (parts, height) in TEMPLATES.items():
            TargetSpec(name, parts, 10.0, 0.0, height)


class TestReflectivity:
    def test_zero_std_is_exact(self):
        part = TargetPart("p", ReflectivityDistribution(45.54, 0.0), 1.0, 1.0)
        assert sample_reflectivity(part, substream(0, "x")) == 45.54

    def test_clamped_at_zero(self):
        part = TargetPart("p", ReflectivityDistribution(2.75, 5.0), 1.0, 1.0)
        draws = sample_reflectivity(part, substream(0, "x"), size=20_000)
        assert draws.min() >= 0.0
        assert (draws == 0.0).any()

    def test_law_of_large_numbers(self):
        part = TargetPart("p", ReflectivityDistribution(22.2, 5.0), 1.0, 1.0)
        draws = sample_reflectivity(part, substream(1, "lln"), size=100_000)
        assert abs(draws.mean() - 22.2) < 0.1

    @given(mean=st.floats(0, 255), std=st.floats(0, 80), seed=st.integers(0, 2**32))
    def test_draws_stay_in_bounds(self, mean, std, seed):
        part = TargetPart("p", ReflectivityDistribution(mean, std), 1.0, 1.0)
        draws = sample_reflectivity(part, substream(seed, "b"), size=64)
        assert np.all((draws >= 0.0) & (draws <= 255.0))

    def test_class_boundary(self):
        assert classify_reflectivity(99.999) is ReflectorClass.DIFFUSE
        assert classify_reflectivity(100.0) is ReflectorClass.RETRO

    @given(st.floats(0, 255))
    def test_classes_partition_the_byte_scale(self, b):
        c = classify_reflectivity(b)
        assert (c is ReflectorClass.RETRO) == (b >= 100.0)


class TestIntersect:
    def test_boresight_hits_board(self):
        s = _scene(TargetPlacement("board_C", 15.0, height_m=1.0))
        hit = intersect(s, _boresight())
        assert hit.range == pytest.approx(15.0, abs=1e-12)
        assert (hit.target_id, hit.part_id) == ("board_C", "board")

    def test_ray_away_misses(self):
        s = _scene(TargetPlacement("board_C", 15.0))
        assert intersect(s, Ray((0.0, 0.0, 1.25), (-1.0, 0.0, 0.0))) is None

    def test_nearest_of_stacked_targets(self):
        d = ReflectivityDistribution(20.0, 0.0)
        near = TargetSpec("near", (TargetPart("p", d, 1.0, 1.0),), 10.0, 0.0, 1.0)
        far = TargetSpec("far", (TargetPart("p", d, 1.0, 1.0),), 20.0, 0.0, 1.0)
        hit = intersect(Scene((far, near)), _boresight())
        assert hit.target_id == "near" and hit.range == pytest.approx(10.0)

    @given(y=st.floats(-0.2, 0.2), z=st.floats(-0.2, 0.2))
    def test_pure_and_deterministic(self, y, z):
        s = _scene(TargetPlacement("board_B", 12.0, height_m=1.0))
        d = np.array([1.0, y, z]) / np.linalg.norm([1.0, y, z])
        ray = Ray((0.0, 0.0, 1.25), tuple(d))
        assert intersect(s, ray) == intersect(s, ray)

    @given(az=st.floats(-0.03, 0.03), el=st.floats(-0.03, 0.03), r=st.floats(5, 30))
    def test_hit_range_is_forward_distance(self, az, el, r):
        # inside the board, the hit parameter along a unit ray is R / cos
        s = _scene(TargetPlacement("board_C", r, height_m=1.0))
        d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        ranges, which = intersect_many(s, np.array([[0.0, 0.0, 1.25]]), d[None, :])
        if which[0] >= 0:
            assert ranges[0] == pytest.approx(r / d[0], rel=1e-12)
