import itertools
import math

import pytest
import torch
import trimesh

from hand_model import HandMesh
from hand_model import HandParams
from hand_model import forward_kinematics
from losses import ContactSets
from losses import InsideTestError
from losses import LossDiagnosticsError
from losses import LossWeights
from losses import compute_contact_sets
from losses import contact_losses
from losses import contact_map
from losses import inside_vertices
from losses import penetration_loss
from losses import reconstruction_loss
from losses import reconstruction_total
from losses import total_loss
from object_encoding import PointCloud


def _hand(vertices):
    return HandMesh(
        vertices=vertices,
        joints=torch.zeros(21, 3, dtype=vertices.dtype),
        faces=torch.zeros(0, 3, dtype=torch.long),
    )


def _sphere_cloud(sphere_mesh, dtype=torch.float64):
    return PointCloud(points=torch.as_tensor(sphere_mesh.vertices, dtype=dtype))


class TestLossWeights:
    def test_defaults(self):
        weights = LossWeights()
        assert weights.lambda_e == 10.0
        assert weights.lambda_m == -50.0
        assert weights.lambda_c == 1500.0
        assert weights.lambda_p == 5.0
        assert weights.lambda_h == 0.1
        assert weights.lambda_v == 10.0
        assert weights.beta == 0.25

    def test_positive_map_weight_rejected(self):
        with pytest.raises(ValueError, match="lambda_m"):
            LossWeights(lambda_m=1.0)

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError, match="beta"):
            LossWeights(beta=-0.1)


class TestReconstruction:
    def test_exact_prediction_is_zero(self, small_template):
        generator = torch.Generator().manual_seed(2)
        gt = HandParams.from_vector(torch.randn(3, 61, generator=generator) * 0.2)
        gt_vertices = forward_kinematics(gt, small_template).vertices
        losses = reconstruction_loss(
            gt, gt.posture(), gt.position(), gt_vertices, small_template, LossWeights()
        )
        assert losses.posture.item() == 0.0
        assert losses.position.item() == 0.0
        assert losses.vertices.item() == pytest.approx(0.0, abs=1e-6)

    def test_weighting(self, small_template):
        gt = HandParams.zeros(1)
        posture = torch.zeros(1, 55)
        posture[0, 0] = 3.0
        position = torch.zeros(1, 6)
        position[0, 5] = 4.0
        gt_vertices = forward_kinematics(gt, small_template).vertices
        losses = reconstruction_loss(
            gt, posture, position, gt_vertices, small_template, LossWeights()
        )
        assert losses.posture.item() == pytest.approx(3.0)
        assert losses.position.item() == pytest.approx(4.0)
        expected = 0.1 * 7.0 + 10.0 * losses.vertices.item()
        assert losses.total.item() == pytest.approx(expected, rel=1e-5)

    def test_weighted_sum_arithmetic(self):
        assert reconstruction_total(1.0, 1.0, 0.5, LossWeights()) == pytest.approx(5.2)


class TestTotalLoss:
    def test_weighted_sum(self):
        components = total_loss(1.0, 2.0, 0.5, 0.01, 0.1, LossWeights())
        assert components.total.item() == pytest.approx(-6.5)
        assert components.as_dict()["contact_map"] == 0.5

    def test_reference_weights_example(self):
        components = total_loss(1.0, 1.0, 0.5, 0.001, 0.1, LossWeights())
        assert components.total.item() == pytest.approx(-21.0)

    def test_full_coverage_alone(self):
        components = total_loss(0.0, 0.0, 1.0, 0.0, 0.0, LossWeights())
        assert components.total.item() == pytest.approx(-50.0)

    @pytest.mark.parametrize(
        "name", ["reconstruction", "codebook", "contact_map", "contact", "penetration"]
    )
    def test_non_finite_component_named(self, name):
        values = {
            "reconstruction": 1.0,
            "codebook": 1.0,
            "contact_map": 0.5,
            "contact": 0.1,
            "penetration": 0.1,
        }
        values[name] = math.nan
        with pytest.raises(LossDiagnosticsError, match=name):
            total_loss(*values.values(), LossWeights())


class TestContactSets:
    def test_contact_map_threshold(self):
        vertices = torch.tensor([[0.0, 0.0, 0.0]])
        points = torch.tensor([[0.004, 0.0, 0.0], [0.006, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assert contact_map(vertices, points, 0.005).tolist() == [0, 2]

    def test_inside_vertices(self, sphere_mesh):
        vertices = torch.tensor([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.03, 0.0, 0.0]])
        assert inside_vertices(vertices, sphere_mesh).tolist() == [0, 2]

    def test_inside_needs_watertight(self, sphere_mesh):
        broken = trimesh.Trimesh(
            vertices=sphere_mesh.vertices, faces=sphere_mesh.faces[:-3], process=False
        )
        with pytest.raises(InsideTestError):
            inside_vertices(torch.zeros(1, 3), broken)

    def test_threshold_must_be_positive(self, sphere_mesh):
        cloud = _sphere_cloud(sphere_mesh)
        with pytest.raises(ValueError, match="threshold"):
            compute_contact_sets(
                _hand(torch.zeros(1, 3, dtype=torch.float64)), cloud, sphere_mesh, 0.0
            )

    def test_batched_hand_rejected(self, sphere_mesh):
        cloud = _sphere_cloud(sphere_mesh)
        with pytest.raises(ValueError, match="single hand"):
            compute_contact_sets(
                _hand(torch.zeros(2, 1, 3, dtype=torch.float64)), cloud, sphere_mesh
            )

    def test_gt_map_from_gt_hand(self, sphere_mesh):
        cloud = _sphere_cloud(sphere_mesh)
        point = cloud.points[7:8]
        sets = compute_contact_sets(
            _hand(torch.zeros(1, 3, dtype=torch.float64)),
            cloud,
            sphere_mesh,
            gt_hand=_hand(point * 1.05),
        )
        assert 7 in sets.gt_map.tolist()
        assert sets.predicted_map.numel() == 0
        assert sets.inside.tolist() == [0]


class TestContactLosses:
    def test_prediction_equal_to_gt_covers_map(self, sphere_mesh):
        cloud = _sphere_cloud(sphere_mesh)
        hand = _hand(cloud.points[:20] * 1.02)
        sets = compute_contact_sets(hand, cloud, sphere_mesh, gt_hand=hand)
        _, l_map = contact_losses(sets, hand, cloud)
        assert l_map.item() == 1.0

    def test_map_ratio_in_unit_interval(self, sphere_mesh):
        cloud = _sphere_cloud(sphere_mesh)
        gt_hand = _hand(cloud.points[:40] * 1.02)
        hand = _hand(cloud.points[:10] * 1.02)
        sets = compute_contact_sets(hand, cloud, sphere_mesh, gt_hand=gt_hand)
        _, l_map = contact_losses(sets, hand, cloud)
        assert 0.0 < l_map.item() < 1.0

    def test_empty_gt_map(self, sphere_mesh):
        cloud = _sphere_cloud(sphere_mesh)
        hand = _hand(torch.full((3, 3), 0.5, dtype=torch.float64))
        sets = compute_contact_sets(hand, cloud, sphere_mesh)
        l_contact, l_map = contact_losses(sets, hand, cloud)
        assert l_contact.item() == 0.0
        assert l_map.item() == 0.0

    def test_contact_distance_and_normalization(self):
        cloud = PointCloud(points=torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        hand = _hand(torch.tensor([[0.0, 0.3, 0.0], [0.0, 0.0, 2.0]]))
        sets = ContactSets(
            gt_map=torch.tensor([0, 1]),
            predicted_map=torch.tensor([], dtype=torch.long),
            candidates=torch.tensor([0]),
            inside=torch.tensor([], dtype=torch.long),
        )
        l_contact, l_map = contact_losses(sets, hand, cloud)
        expected = 0.3 + math.sqrt(1.0 + 0.09)
        assert l_contact.item() == pytest.approx(expected, rel=1e-5)
        assert l_map.item() == 0.0
        normalized, _ = contact_losses(sets, hand, cloud, normalize=True)
        assert normalized.item() == pytest.approx(expected / 2, rel=1e-5)

    def test_three_points_two_candidates(self):
        cloud = PointCloud(
            points=torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
        )
        hand = _hand(torch.tensor([[0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [5.0, 5.0, 5.0]]))
        sets = ContactSets(
            gt_map=torch.tensor([0, 1, 2]),
            predicted_map=torch.tensor([], dtype=torch.long),
            candidates=torch.tensor([0, 1]),
            inside=torch.tensor([], dtype=torch.long),
        )
        l_contact, _ = contact_losses(sets, hand, cloud)
        expected = 1.0 + 1.0 + math.sqrt(2.0)
        assert l_contact.item() == pytest.approx(expected, rel=1e-5)


class TestPenetration:
    def test_sphere_centre(self, sphere_mesh):
        cloud = _sphere_cloud(sphere_mesh)
        hand = _hand(torch.zeros(1, 3, dtype=torch.float64))
        sets = compute_contact_sets(hand, cloud, sphere_mesh)
        assert penetration_loss(sets, hand, cloud).item() == pytest.approx(
            0.0016, rel=1e-6
        )

    def test_outside_hand_is_zero(self, sphere_mesh):
        cloud = _sphere_cloud(sphere_mesh)
        hand = _hand(torch.full((4, 3), 0.2, dtype=torch.float64))
        sets = compute_contact_sets(hand, cloud, sphere_mesh)
        assert penetration_loss(sets, hand, cloud).item() == 0.0

    def test_single_vertex_arithmetic(self):
        cloud = PointCloud(points=torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        hand = _hand(torch.tensor([[0.01, 0.0, 0.0], [3.0, 0.0, 0.0]], dtype=torch.float64))
        sets = ContactSets(
            gt_map=torch.tensor([], dtype=torch.long),
            predicted_map=torch.tensor([], dtype=torch.long),
            candidates=torch.tensor([0]),
            inside=torch.tensor([0]),
        )
        assert penetration_loss(sets, hand, cloud).item() == pytest.approx(1e-4, rel=1e-6)

    def test_moving_outward_reduces_penetration(self, sphere_mesh):
        cloud = _sphere_cloud(sphere_mesh)
        direction = torch.as_tensor(sphere_mesh.vertices[0], dtype=torch.float64) / 0.04
        values = []
        for radius in (0.01, 0.02, 0.03, 0.035):
            hand = _hand((direction * radius).unsqueeze(0))
            sets = compute_contact_sets(hand, cloud, sphere_mesh)
            assert sets.inside.tolist() == [0]
            values.append(penetration_loss(sets, hand, cloud).item())
        assert all(later < earlier for earlier, later in itertools.pairwise(values))
        assert values[-1] == pytest.approx(0.005**2, rel=1e-6)

    def test_dense_unit_sphere(self):
        sphere = trimesh.creation.icosphere(subdivisions=5, radius=1.0)
        cloud = _sphere_cloud(sphere)
        hand = _hand(torch.tensor([[0.5, 0.0, 0.0]], dtype=torch.float64))
        sets = compute_contact_sets(hand, cloud, sphere)
        assert penetration_loss(sets, hand, cloud).item() == pytest.approx(0.25, abs=5e-3)


@pytest.mark.parametrize("seed", range(10))
def test_contact_and_penetration_gradients(seed):
    generator = torch.Generator().manual_seed(seed)
    points = torch.randn(30, 3, generator=generator, dtype=torch.float64)
    cloud = PointCloud(points=points)
    sets = ContactSets(
        gt_map=torch.tensor([1, 4, 9, 16]),
        predicted_map=torch.tensor([4], dtype=torch.long),
        candidates=torch.tensor([0, 2, 3]),
        inside=torch.tensor([1, 3]),
    )
    vertices = torch.randn(5, 3, generator=generator, dtype=torch.float64)
    vertices.requires_grad_(True)

    def combined(v):
        hand = _hand(v)
        l_contact, _ = contact_losses(sets, hand, cloud)
        return l_contact + penetration_loss(sets, hand, cloud)

    assert torch.autograd.gradcheck(combined, (vertices,), eps=1e-6, atol=1e-6)
