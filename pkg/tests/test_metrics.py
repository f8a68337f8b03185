import math

import numpy as np
import pytest
import trimesh

from metrics import NonWatertightError
from metrics import GraspMetrics
from metrics import SimulationConfig
from metrics import contact_ratio
from metrics import diversity_from_features
from metrics import evaluate_grasp
from metrics import high_quality_ratio
from metrics import is_in_contact
from metrics import penetration_volume
from metrics import quality_index
from metrics import simulation_displacement
from metrics import summarize
from metrics import voxelized_volume

# (penetration cm^3, displacement cm, quality index) from published comparisons
QUALITY_ROWS = [
    (7.23, 2.78, 4.12),
    (9.00, 2.65, 4.56),
    (6.53, 3.72, 4.57),
    (20.05, 4.14, 8.93),
    (5.36, 2.75, 3.54),
    (7.46, 2.97, 4.32),
    (8.26, 2.75, 4.41),
    (10.43, 3.64, 5.68),
    (29.78, 5.47, 12.79),
    (4.58, 3.35, 3.72),
    (3.54, 2.02, 2.48),
    (5.05, 1.74, 2.74),
    (10.56, 3.80, 5.83),
    (3.18, 2.13, 2.45),
    (4.32, 1.81, 2.57),
    (5.85, 2.06, 3.20),
    (10.53, 3.81, 5.83),
    (3.93, 2.70, 3.07),
    (6.67, 7.21, 7.05),
    (5.18, 9.87, 8.46),
    (10.88, 4.98, 6.76),
    (4.44, 3.61, 3.86),
    (11.20, 4.57, 6.57),
    (7.56, 2.93, 4.32),
]


def _cube(edge, offset=(0.0, 0.0, 0.0)):
    mesh = trimesh.creation.box(extents=[edge] * 3)
    mesh.apply_translation(offset)
    return mesh


def _cage(edge=0.024, subdivisions=3):
    mesh = trimesh.creation.box(extents=[edge] * 3)
    for _ in range(subdivisions):
        mesh = mesh.subdivide()
    return mesh


def _open_cube(edge):
    mesh = _cube(edge)
    return trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces[:-1], process=False)


class TestQualityIndex:
    @pytest.mark.parametrize(("penetration", "displacement", "expected"), QUALITY_ROWS)
    def test_published_rows(self, penetration, displacement, expected):
        assert quality_index(penetration, displacement) == pytest.approx(
            expected, abs=0.01
        )

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            quality_index(-1.0, 2.0)


class TestPenetrationVolume:
    def test_overlapping_cubes(self):
        a = _cube(0.01)
        b = _cube(0.01, offset=(0.005, 0.0, 0.0))
        assert penetration_volume(a, b) == pytest.approx(0.4)

    def test_symmetric(self):
        a = _cube(0.01)
        b = _cube(0.01, offset=(0.005, 0.0, 0.0))
        assert penetration_volume(a, b) == penetration_volume(b, a)

    def test_disjoint_meshes(self):
        a = _cube(0.01)
        b = _cube(0.01, offset=(0.05, 0.0, 0.0))
        assert penetration_volume(a, b) == 0.0

    def test_needs_watertight_meshes(self):
        with pytest.raises(NonWatertightError, match="Hand"):
            penetration_volume(_open_cube(0.01), _cube(0.01))
        with pytest.raises(NonWatertightError, match="Object"):
            penetration_volume(_cube(0.01), _open_cube(0.01))

    def test_voxelized_cube_volume(self):
        assert voxelized_volume(_cube(0.01)) == pytest.approx(0.8)


class TestSimulation:
    def test_free_fall_without_hand(self):
        assert simulation_displacement(None, _cube(0.02)) == pytest.approx(490.0, rel=1e-6)

    def test_shorter_drop(self):
        config = SimulationConfig(duration=0.5)
        assert simulation_displacement(None, _cube(0.02), config) == pytest.approx(
            122.5, rel=1e-6
        )

    def test_caged_object_stays(self):
        assert simulation_displacement(_cage(), _cube(0.02)) < 0.1

    def test_softer_springs_sag_further(self):
        stiff = simulation_displacement(_cage(), _cube(0.02))
        soft = simulation_displacement(
            _cage(), _cube(0.02), SimulationConfig(stiffness=2e4)
        )
        assert stiff < soft

    def test_deterministic(self):
        first = simulation_displacement(_cage(), _cube(0.02))
        assert simulation_displacement(_cage(), _cube(0.02)) == first

    def test_distant_hand_does_not_hold(self):
        far_hand = _cube(0.02, offset=(1.0, 0.0, 0.0))
        assert simulation_displacement(far_hand, _cube(0.02)) == pytest.approx(
            490.0, rel=1e-6
        )


class TestContact:
    def test_touching_and_distant(self):
        obj = trimesh.creation.icosphere(subdivisions=2, radius=0.03)
        touching = trimesh.creation.icosphere(subdivisions=2, radius=0.01)
        touching.apply_translation((0.042, 0.0, 0.0))
        distant = trimesh.creation.icosphere(subdivisions=2, radius=0.01)
        distant.apply_translation((0.2, 0.0, 0.0))
        assert is_in_contact(touching, obj)
        assert not is_in_contact(distant, obj)
        assert contact_ratio([(touching, obj), (distant, obj)]) == 50.0

    def test_hand_fully_inside_counts(self):
        obj = trimesh.creation.icosphere(subdivisions=2, radius=0.05)
        inner = trimesh.creation.icosphere(subdivisions=2, radius=0.01)
        assert is_in_contact(inner, obj)

    def test_empty_and_bad_threshold(self):
        with pytest.raises(ValueError, match="at least one"):
            contact_ratio([])
        with pytest.raises(ValueError, match="threshold"):
            contact_ratio([(_cube(0.01), _cube(0.01))], tau=0.0)


class TestDiversity:
    def test_balanced_clusters_reach_max_entropy(self):
        rng = np.random.default_rng(0)
        centers = rng.normal(size=(20, 6)) * 100.0
        features = np.repeat(centers, 5, axis=0) + rng.normal(size=(100, 6)) * 0.01
        entropy, size = diversity_from_features(features)
        assert entropy == pytest.approx(math.log(20), abs=0.01)
        assert size < 0.1

    def test_identical_grasps_have_zero_entropy(self):
        entropy, size = diversity_from_features(np.ones((25, 6)))
        assert entropy == 0.0
        assert size == pytest.approx(0.0)

    def test_needs_enough_grasps(self):
        with pytest.raises(ValueError, match="at least 20"):
            diversity_from_features(np.zeros((10, 6)))

    def test_custom_cluster_count(self):
        features = np.array([[0.0], [0.1], [10.0], [10.1]])
        entropy, _ = diversity_from_features(features, k=2)
        assert entropy == pytest.approx(math.log(2))


class TestHighQualityRatio:
    def test_monotone_curve(self):
        rng = np.random.default_rng(1)
        pen = rng.uniform(0.0, 12.0, size=200)
        disp = rng.uniform(0.0, 4.0, size=200)
        curve = high_quality_ratio(pen, disp)
        assert len(curve) == 21
        assert curve[0][0] == 0.0
        assert curve[-1][0] == 10.0
        ratios = [ratio for _, ratio in curve]
        assert ratios == sorted(ratios)
        assert all(0.0 <= r <= 1.0 for r in ratios)

    def test_known_fractions(self):
        curve = high_quality_ratio([1.0, 3.0, 5.0, 1.0], [1.0, 1.0, 1.0, 3.0], [0.0, 2.0, 6.0])
        assert curve == [(0.0, 0.0), (2.0, 0.25), (6.0, 0.75)]

    def test_mismatched_lists(self):
        with pytest.raises(ValueError):
            high_quality_ratio([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            high_quality_ratio([], [])


class TestSummary:
    def test_summarize(self):
        rows = [
            GraspMetrics(in_contact=True, penetration_cm3=2.0, displacement_cm=1.0, quality=0.0),
            GraspMetrics(in_contact=False, penetration_cm3=4.0, displacement_cm=3.0, quality=0.0),
        ]
        report = summarize(rows, entropy=2.9, cluster_size=1.5, runtime_s=0.2)
        assert report.contact_ratio == 50.0
        assert report.penetration_volume == 3.0
        assert report.grasp_disp == 2.0
        assert report.quality_index == pytest.approx(quality_index(3.0, 2.0))
        assert report.as_dict()["entropy"] == 2.9

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            summarize([], 0.0, 0.0, 0.0)

    def test_evaluate_caged_grasp(self):
        metrics = evaluate_grasp(_cage(), _cube(0.02))
        assert metrics.in_contact
        assert metrics.displacement_cm < 0.1
        assert metrics.quality == pytest.approx(
            quality_index(metrics.penetration_cm3, metrics.displacement_cm)
        )
