import math

import numpy as np
import pytest

from scenekin.artinfer import JointModel
from scenekin.geom import RigidTransform, normalize, rotation_from_angle_axis
from scenekin.scenemodel import (
    aggregate,
    export_model,
    fit_oriented_box,
    load_model,
    models_equivalent,
    to_world,
)


def slab_points(center, normal_axis=1, w=0.4, h=0.8, n=300, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.zeros((n, 3))
    axes = [0, 1, 2]
    axes.remove(normal_axis)
    pts[:, axes[0]] = rng.uniform(-w / 2, w / 2, n)
    pts[:, axes[1]] = rng.uniform(-h / 2, h / 2, n)
    return pts + np.asarray(center)


class TestToWorld:
    def test_identity(self):
        j = JointModel("revolute", [0, 0, 1], [1.0, 2.0, 0.0], 0.5)
        out = to_world(j, RigidTransform.identity())
        np.testing.assert_allclose(out.axis, j.axis)
        np.testing.assert_allclose(out.pivot, j.pivot)
        assert out.state == j.state

    def test_quarter_yaw_maps_axis(self):
        j = JointModel("prismatic", [1.0, 0.0, 0.0], None, 0.3)
        frame = RigidTransform(rotation_from_angle_axis([0, 0, 1], np.pi / 2),
                               np.zeros(3))
        out = to_world(j, frame)
        np.testing.assert_allclose(out.axis, [0, 1, 0], atol=1e-12)

    def test_state_invariant_under_random_frames(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            axis = normalize(rng.normal(size=3))
            pivot = rng.uniform(-2, 2, size=3)
            j = JointModel("revolute", axis, pivot,
                           float(rng.uniform(-1.0, 1.0)))
            frame = RigidTransform(
                rotation_from_angle_axis(normalize(rng.normal(size=3)),
                                         rng.uniform(0, math.pi)),
                rng.uniform(-2, 2, size=3))
            out = to_world(j, frame)
            assert out.state == pytest.approx(j.state, abs=1e-12)
            # mapped pivot stays on the mapped axis line
            mapped_pivot = frame.apply(j.pivot)
            rel = out.pivot - mapped_pivot
            rel -= np.dot(rel, out.axis) * out.axis
            assert np.linalg.norm(rel) < 1e-9


class TestAggregate:
    def test_duplicate_pair_merges(self):
        pts = slab_points([1.0, 0.5, 0.8])
        j1 = JointModel("revolute", [0, 0, 1], [0.8, 0.5, 0.0], 0.4)
        j2 = JointModel("revolute", [0, 0, 1.0001], [0.81, 0.5, 0.0], 0.6)
        model = aggregate([(j1, pts, 0), (j2, pts + 0.001, 1)])
        assert len(model.entries) == 1
        entry = model.entries[0]
        assert entry.confidence == pytest.approx(1.0)
        assert entry.hotspot_ids == (0, 1)
        assert entry.joint.state == pytest.approx(0.6)  # most-opened wins

    def test_two_parts_stay_separate(self):
        pts_a = slab_points([1.0, 0.5, 0.8], seed=1)
        pts_b = slab_points([3.0, 2.0, 0.8], seed=2)
        j1 = JointModel("revolute", [0, 0, 1], [0.8, 0.5, 0.0], 0.4)
        j2 = JointModel("revolute", [0, 0, 1], [2.8, 2.0, 0.0], 0.5)
        model = aggregate([(j1, pts_a, 0), (j2, pts_b, 1)])
        assert len(model.entries) == 2

    def test_empty_input(self):
        model = aggregate([])
        assert model.entries == ()

    def test_same_part_incompatible_joints_split_confidence(self):
        pts = slab_points([1.0, 0.5, 0.8])
        j1 = JointModel("revolute", [0, 0, 1], [0.8, 0.5, 0.0], 0.4)
        j2 = JointModel("prismatic", [0, 1, 0], None, 0.3)
        model = aggregate([(j1, pts, 0), (j2, pts + 0.001, 1)])
        assert len(model.entries) == 2
        for e in model.entries:
            assert e.confidence == pytest.approx(0.5)

    def test_order_insensitive_entry_count(self):
        rng = np.random.default_rng(3)
        pts = slab_points([1.0, 0.5, 0.8])
        ests = [
            (JointModel("revolute", [0, 0, 1], [0.8, 0.5, 0.0], 0.4), pts, 0),
            (JointModel("revolute", [0, 0, 1], [0.8, 0.5, 0.0], 0.7), pts, 1),
            (JointModel("prismatic", [0, 1, 0], None, 0.3),
             slab_points([3.0, 2.0, 0.8], seed=9), 2),
        ]
        base = aggregate(ests)
        for _ in range(5):
            perm = list(rng.permutation(3))
            model = aggregate([ests[i] for i in perm])
            assert len(model.entries) == len(base.entries)
            states = sorted(abs(e.joint.state) for e in model.entries)
            base_states = sorted(abs(e.joint.state) for e in base.entries)
            assert states == pytest.approx(base_states)

    def test_idempotent_on_entries(self):
        pts = slab_points([1.0, 0.5, 0.8])
        ests = [
            (JointModel("revolute", [0, 0, 1], [0.8, 0.5, 0.0], 0.4), pts, 0),
            (JointModel("revolute", [0, 0, 1], [0.8, 0.5, 0.0], 0.6),
             pts + 0.002, 1),
        ]
        once = aggregate(ests)
        again = aggregate([(e.joint, e.mobile_points, e.hotspot_ids[0])
                           for e in once.entries])
        assert len(again.entries) == len(once.entries)
        for a, b in zip(again.entries, once.entries):
            np.testing.assert_allclose(a.joint.axis, b.joint.axis)
            assert a.joint.state == b.joint.state


class TestFitOrientedBox:
    def test_axis_aligned_slab(self):
        pts = slab_points([0.0, 0.0, 0.0], normal_axis=1, w=0.6, h=1.0,
                          n=500, seed=4)
        center, half, rot = fit_oriented_box(pts)
        np.testing.assert_allclose(center, [0, 0, 0], atol=0.05)
        dims = sorted(half)
        assert dims[0] < 0.01          # thin axis
        assert 0.25 < dims[1] < 0.35   # half of 0.6
        assert 0.45 < dims[2] < 0.55   # half of 1.0
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


class TestExport:
    def test_round_trip(self, tmp_path):
        pts = slab_points([1.0, 0.5, 0.8])
        ests = [
            (JointModel("revolute", [0, 0, 1], [0.8, 0.5, 0.0], 0.4), pts, 0),
            (JointModel("prismatic", [0, 1, 0], None, 0.3),
             slab_points([3.0, 2.0, 0.8], seed=7), 2),
        ]
        model = aggregate(ests)
        path = tmp_path / "model.json"
        export_model(model, path)
        back = load_model(path)
        assert models_equivalent(back, model, atol=1e-12)

    def test_empty_model(self, tmp_path):
        path = tmp_path / "empty.json"
        export_model(aggregate([]), path)
        back = load_model(path)
        assert back.entries == ()

    def test_axes_reparse_unit_norm(self, tmp_path):
        rng = np.random.default_rng(8)
        ests = []
        for k in range(5):
            axis = normalize(rng.normal(size=3))
            ests.append((JointModel("revolute", axis,
                                    rng.uniform(-1, 1, 3),
                                    float(rng.uniform(0.1, 1.0))),
                         slab_points(rng.uniform(0, 5, 3), seed=k), k))
        model = aggregate(ests)
        path = tmp_path / "m.json"
        export_model(model, path)
        back = load_model(path)
        for e in back.entries:
            assert abs(np.linalg.norm(e.joint.axis) - 1.0) < 1e-9
