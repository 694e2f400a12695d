import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clutterpick import physics
from clutterpick.physics import (OutOfWorkspace, PhysicsParams, UnknownObject, apply_remove,
                                 apply_slide, augment_records, generate_pile,
                                 generate_transition_dataset)
from clutterpick.world import (ClutterState, ObjectState, compute_support_graph,
                               invariant_violations, is_stable)

QUIET = PhysicsParams(noise_sigma_translation=0.0, noise_sigma_rotation=0.0)


def box(i, x, y, z=0.0, w=40.0, h=20.0, t=20.0, target=False, th=0.0):
    return ObjectState.create(i, x, y, z, th, w, h, t, target)


def state(*objs):
    return ClutterState(tuple(objs), (500.0, 400.0))


def moved_xy(a, b):
    return math.hypot(a.x - b.x, a.y - b.y)


class TestSlide:
    def test_lone_box(self):
        s = state(box(0, 0, 0, target=True))
        out = apply_slide(s, 0.0, 30.0, None, PhysicsParams(), np.random.default_rng(0))
        t = out.next_state.target
        assert abs(t.x - 30.0) <= 3 * 1.5 and abs(t.y) <= 3 * 1.5
        assert not out.collapsed and out.fallen_ids == []
        assert out.total_surrounding_translation == 0.0

    def test_carried_box_follows(self):
        s = state(box(0, 0, 0, w=100, h=60, target=True), box(1, 0, 0, z=20))
        out = apply_slide(s, 0.0, 30.0, None, QUIET)
        d = moved_xy(out.next_state.get(1), s.get(1))
        assert 0.8 * 30 <= d <= 1.0 * 30
        assert not out.collapsed

    def test_held_box_stays_and_falls_when_undercut(self):
        s = state(box(0, 0, 0, w=50, h=60, target=True), box(1, 0, 0, z=20))
        out = apply_slide(s, 0.0, 30.0, 1, QUIET)
        b = out.next_state.get(1)
        # held in place, then dropped clear of the target rather than dragged along
        assert b.x <= 1e-6
        assert out.fallen_ids == [1] and out.collapsed
        assert b.z == pytest.approx(0.0)

    def test_held_box_stays_when_still_supported(self):
        s = state(box(0, 0, 0, w=120, h=60, target=True), box(1, 0, 0, z=20))
        out = apply_slide(s, 0.0, 30.0, 1, QUIET)
        assert not out.collapsed
        assert moved_xy(out.next_state.get(1), s.get(1)) <= 1e-6
        assert out.next_state.get(1).z == pytest.approx(20.0)

    def test_push_neighbour_same_layer(self):
        s = state(box(0, 0, 0, target=True), box(1, 45, 0))
        out = apply_slide(s, 0.0, 30.0, None, QUIET)
        assert out.next_state.get(1).x > 45
        assert out.total_surrounding_translation > 0
        assert invariant_violations(out.next_state) == []

    def test_workspace_edge_truncates(self):
        s = state(box(0, 220, 0, target=True))
        out = apply_slide(s, 0.0, 30.0, None, QUIET)
        assert out.out_of_workspace
        assert out.next_state.target.polygon is not None
        assert max(x for x, _ in out.next_state.target.polygon) <= 250 + 1e-6

    def test_bad_arguments(self):
        s = state(box(0, 0, 0, target=True), box(1, 100, 0))
        with pytest.raises(ValueError):
            apply_slide(s, 0.0, 0.0)
        with pytest.raises(ValueError):
            apply_slide(s, 0.0, 30.0, 0)
        with pytest.raises(UnknownObject):
            apply_slide(s, 0.0, 30.0, 7)

    def test_out_of_workspace_is_an_error_type(self):
        assert issubclass(OutOfWorkspace, RuntimeError)


class TestRemove:
    def test_lone_neighbour(self):
        s = state(box(0, 0, 0, target=True), box(1, 100, 0))
        out = apply_remove(s, 1, QUIET)
        assert [o.id for o in out.next_state.objects] == [0]
        assert out.next_state.target == s.target and not out.collapsed

    def test_sole_supporter(self):
        s = state(box(0, 100, 0, target=True), box(1, 0, 0), box(2, 0, 0, z=20))
        out = apply_remove(s, 1, QUIET)
        assert out.fallen_ids == [2]
        assert out.next_state.get(2).z == pytest.approx(0.0)

    @pytest.mark.parametrize("offset", [0.0, 10.0, 25.0, 45.0])
    def test_one_of_two_supporters(self, offset):
        left, right = box(1, -40, 0, w=40, h=40), box(2, 40, 0, w=40, h=40)
        bridge = box(3, offset, 0, z=20, w=100, h=30)
        s = state(box(0, 0, 150, target=True), left, right, bridge)
        out = apply_remove(s, 1, QUIET)
        without = state(box(0, 0, 150, target=True), right, bridge)
        stays = is_stable(without, compute_support_graph(without), 3)
        assert (3 not in out.fallen_ids) == stays

    def test_removed_id_leaves_graph(self):
        s = generate_pile(6, seed=4)
        victim = s.objects[-1].id
        g = compute_support_graph(apply_remove(s, victim, QUIET).next_state)
        assert all(victim not in e for e in g.edges)

    def test_errors(self):
        s = state(box(0, 0, 0, target=True))
        with pytest.raises(UnknownObject):
            apply_remove(s, 5)
        with pytest.raises(ValueError):
            apply_remove(s, 0)


class TestPiles:
    def test_single(self):
        s = generate_pile(1, seed=0)
        assert len(s.objects) == 1 and s.target.z == 0.0

    def test_deterministic(self):
        assert generate_pile(8, seed=11) == generate_pile(8, seed=11)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            generate_pile(0)

    def test_placement_failure(self):
        with pytest.raises(physics.PlacementFailure):
            generate_pile(8, workspace=(60.0, 60.0), seed=0, max_rejections=20)


seeds = st.integers(0, 10_000)


@given(seeds, st.integers(0, 11), st.booleans())
def test_slide_outcome_is_valid(seed, k, hold):
    s = generate_pile(3 + seed % 6, seed=seed)
    support = s.objects[1].id if hold and len(s.objects) > 1 else None
    out = apply_slide(s, 2 * math.pi * k / 12, 30.0, support, PhysicsParams(), np.random.default_rng(seed))
    assert invariant_violations(out.next_state) == []
    assert out.collapsed == bool(out.fallen_ids)
    assert out.total_surrounding_translation >= 0


@given(seeds)
def test_remove_outcome_is_valid_and_nothing_rises(seed):
    s = generate_pile(3 + seed % 6, seed=seed)
    victim = s.objects[1 + seed % (len(s.objects) - 1)].id
    out = apply_remove(s, victim, PhysicsParams(), np.random.default_rng(seed))
    assert invariant_violations(out.next_state) == []
    for o in out.next_state.objects:
        assert o.z <= s.get(o.id).z + 1e-9


@given(seeds, st.floats(0, 2 * math.pi))
def test_isolated_slide_moves_nothing_else(seed, direction):
    rng = np.random.default_rng(seed)
    others = [box(k + 1, 150 * math.cos(a), 150 * math.sin(a) * 0.9)
              for k, a in enumerate(rng.uniform(0, 2 * math.pi, 1))]
    s = state(box(0, 0, 0, target=True), *others)
    out = apply_slide(s, direction, 30.0, None, PhysicsParams(), rng)
    assert out.total_surrounding_translation == 0.0


@given(seeds, st.integers(0, 11))
def test_slide_is_deterministic(seed, k):
    s = generate_pile(5, seed=seed)
    a = apply_slide(s, k * math.pi / 6, 30.0, None, PhysicsParams(), np.random.default_rng(seed))
    b = apply_slide(s, k * math.pi / 6, 30.0, None, PhysicsParams(), np.random.default_rng(seed))
    assert a == b


class TestDataset:
    def test_records_are_well_formed(self):
        recs = generate_transition_dataset(40, seed=3)
        assert len(recs) == 40
        for r in recs:
            assert len(r.prior) == 7 * r.n_objects
            if r.action[0] == 0:
                assert len(r.posterior) == len(r.prior)
                k = r.action[1] / (2 * math.pi / 12)
                assert abs(k - round(k)) < 1e-9 and r.action[2] == 30.0
            else:
                assert len(r.posterior) == len(r.prior) - 7

    def test_full_size(self, trained):
        assert len(trained["records"]) == 3000

    def test_isolated_record_moves_only_target(self):
        s = state(box(0, 0, 0, target=True), box(1, 150, 120))
        out = apply_slide(s, math.pi / 2, 30.0, None, PhysicsParams(), np.random.default_rng(1))
        assert out.next_state.get(1) == s.get(1)
        assert out.next_state.target.y == pytest.approx(30.0, abs=3 * 1.5)

    def test_augmentation_keeps_relative_geometry(self):
        raw = generate_transition_dataset(100, seed=5)
        aug = augment_records(raw, 10, seed=2)
        assert len(aug) == 1000
        for k, rec in enumerate(aug):
            src = raw[k // 10]
            for flat_a, flat_b in ((src.prior, rec.prior), (src.posterior, rec.posterior)):
                a = np.reshape(flat_a, (-1, 7))
                b = np.reshape(flat_b, (-1, 7))
                da = np.linalg.norm(a[:, None, :2] - a[None, :, :2], axis=-1)
                db = np.linalg.norm(b[:, None, :2] - b[None, :, :2], axis=-1)
                assert np.allclose(da, db, atol=1e-6)
                assert np.allclose(a[:, [2, 4, 5, 6]], b[:, [2, 4, 5, 6]])

    def test_dataset_round_trip(self, tmp_path):
        recs = generate_transition_dataset(5, seed=9)
        physics.write_dataset(recs, tmp_path / "d.jsonl")
        assert physics.read_dataset(tmp_path / "d.jsonl") == recs
