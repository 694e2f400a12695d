import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clutterpick import physics
from clutterpick.pomdp import (N_DIRECTIONS, Grasp, Gripper, LearnedTransitionModel,
                               PhysicsTransitionModel, Remove, RewardConfig, Slide,
                               action_from_dict, action_to_dict, graspability, is_terminal,
                               legal_actions, removable, reward, settled, slide_reward)
from clutterpick.world import ClutterState, ObjectState, invariant_violations

WS = (500.0, 400.0)
QUIET = physics.PhysicsParams(noise_sigma_translation=0.0, noise_sigma_rotation=0.0)


def box(i, x, y, z=0.0, w=40.0, h=20.0, t=30.0, th=0.0, target=False):
    return ObjectState.create(i, x, y, z, th, w, h, t, target)


def state(*objs):
    return ClutterState(tuple(objs), WS)


def hand_graspability(o, blockers, g=Gripper()):
    """Axis-aligned boxes only: list the ten finger pairs explicitly and test interval overlap."""
    def hits(x0, x1, y0, y1):
        return any(x0 < b.x + b.w / 2 and b.x - b.w / 2 < x1 and y0 < b.y + b.h / 2 and b.y - b.h / 2 < y1
                   for b in blockers)

    ok = 0
    for axis in (0, 1):
        across, along = (o.w, o.h) if axis == 0 else (o.h, o.w)
        if across + 2 * g.clearance > g.opening_width:
            continue
        span = max(along / 2 - g.finger_length / 2, 0.0)
        off = across / 2 + g.clearance + g.finger_width / 2
        for t in np.linspace(-span, span, 5):
            blocked = False
            for side in (-1, 1):
                if axis == 0:
                    cx, cy, hx, hy = o.x + side * off, o.y + t, g.finger_width / 2, g.finger_length / 2
                else:
                    cx, cy, hx, hy = o.x + t, o.y + side * off, g.finger_length / 2, g.finger_width / 2
                blocked |= hits(cx - hx, cx + hx, cy - hy, cy + hy)
            ok += not blocked
    return ok / 10


class TestActions:
    def test_slide_validation(self):
        with pytest.raises(ValueError):
            Slide(16)
        with pytest.raises(ValueError):
            Slide(0, 0.0)
        assert Slide(4).angle == pytest.approx(math.pi / 2)

    @pytest.mark.parametrize("a", [Grasp(), Remove(3), Slide(5, 30.0, 2), Slide(15, 30.0, None)])
    def test_dict_round_trip(self, a):
        assert action_from_dict(action_to_dict(a)) == a

    def test_one_neighbour(self):
        s = state(box(0, 0, 0, target=True), box(1, 120, 0))
        acts = legal_actions(s)
        assert len(acts) == 18
        assert sum(isinstance(a, Slide) for a in acts) == N_DIRECTIONS

    def test_three_graspable_neighbours(self):
        s = state(box(0, 0, 0, target=True), box(1, 120, 0), box(2, -120, 0), box(3, 0, 120))
        assert len(legal_actions(s)) == 48 + 3 + 1

    def test_buried_neighbour_not_removable(self):
        s = state(box(0, 0, 0, target=True), box(1, 150, 0), box(2, 150, 0, z=30, w=120, h=100))
        assert graspability(s, 1) == 0.0
        assert Remove(1) not in legal_actions(s)
        assert Remove(2) in legal_actions(s)

    @given(st.integers(0, 5000))
    def test_count_formula(self, seed):
        s = physics.generate_pile(2 + seed % 6, seed=seed)
        n = len(s.surrounding)
        graspable = sum(graspability(s, o.id) >= 0.3 for o in s.surrounding)
        assert len(legal_actions(s)) == 16 * n + graspable + 1
        assert all(a.support_id != s.target_id for a in legal_actions(s) if isinstance(a, Slide))


class TestGraspability:
    def test_lone_box(self):
        assert graspability(state(box(0, 0, 0, target=True)), 0) == 1.0

    def test_too_wide(self):
        assert graspability(state(box(0, 0, 0, w=150, h=150, target=True)), 0) == 0.0

    def test_flanked_on_one_side(self):
        o, wall = box(0, 0, 0, target=True), box(1, 42, 0, w=40, h=40)
        s = state(o, wall)
        assert hand_graspability(o, [wall]) == 0.5
        assert graspability(s, 0) == pytest.approx(0.5)

    @given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0, math.pi - 1e-6),
           st.floats(10, 80), st.floats(10, 80), st.integers(0, 5000))
    def test_adding_a_box_never_helps(self, x, y, th, w, h, seed):
        s = physics.generate_pile(3, seed=seed)
        before = graspability(s, s.target_id)
        extra = ObjectState.create(99, x, y, 0, th, w, h, 50)
        after = graspability(s.with_objects(list(s.objects) + [extra]), s.target_id)
        assert after <= before

    @given(st.lists(st.tuples(st.floats(-90, 90), st.floats(-90, 90), st.floats(10, 60),
                              st.floats(10, 60)), max_size=4))
    def test_matches_hand_count(self, walls):
        o = box(0, 0, 0, w=60, h=40, target=True)
        others = [box(k + 1, x, y, w=max(a, b), h=min(a, b)) for k, (x, y, a, b) in enumerate(walls)]
        s = state(o, *others)
        assert graspability(s, 0) == pytest.approx(hand_graspability(o, others))


class TestReward:
    def test_quiet_slide(self):
        s = state(box(0, 0, 0, target=True))
        s2 = state(box(0, 30, 0, target=True))
        assert reward(s, Slide(0), 0.0, s2) == 0.0

    def test_grasp_free_target(self):
        s = state(box(0, 0, 0, target=True))
        assert reward(s, Grasp(), 0.0, s) == 10.0

    def test_grasp_buried_target(self):
        s = state(box(0, 0, 0, target=True), box(1, 0, 0, z=30, w=100, h=60))
        assert reward(s, Grasp(), 0.0, s) == -10.0

    def test_translation_penalty(self):
        assert slide_reward(0.2, 0.2, 50.0, RewardConfig(translation_norm=100.0)) == pytest.approx(-0.5)

    def test_occlusion_penalty_only_on_increase(self):
        assert slide_reward(0.5, 0.1, 0.0) == 0.0
        assert slide_reward(0.1, 0.4, 0.0) == pytest.approx(-0.3)

    def test_remove(self):
        s = state(box(0, 0, 0, target=True), box(1, 150, 0), box(2, -150, 0),
                  box(3, -150, 0, z=30, w=120, h=100))
        assert reward(s, Remove(1), 0.0, s) == 0.0
        assert reward(s, Remove(2), 0.0, s) == -10.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RewardConfig(translation_norm=0.0)

    @given(st.integers(0, 5000), st.integers(0, 10_000))
    def test_bounds_under_physics(self, seed, pick):
        s = physics.generate_pile(3 + seed % 5, seed=seed)
        acts = legal_actions(s)
        a = acts[pick % len(acts)]
        t = PhysicsTransitionModel().step(s, a, np.random.default_rng(seed))
        r = reward(s, a, t.total_surrounding_translation, t.next_state)
        if isinstance(a, Slide):
            assert -2.0 <= r <= 0.0
        elif isinstance(a, Remove):
            assert r in (-10.0, 0.0)
        else:
            assert r in (-10.0, 10.0)


class TestTerminal:
    def test_after_grasp(self):
        assert is_terminal(state(box(0, 0, 0, target=True)), Grasp())

    def test_after_slide(self):
        assert not is_terminal(state(box(0, 0, 0, target=True)), Slide(0))

    def test_after_collapse(self):
        s = state(box(0, 0, 0, w=50, h=60, target=True), box(1, 0, 0, z=30))
        t = PhysicsTransitionModel(QUIET).step(s, Slide(0, 30.0, 1), np.random.default_rng(0))
        assert t.collapsed
        assert is_terminal(t.next_state, Slide(0, 30.0, 1), t.collapsed)

    def test_failed_remove(self):
        s = state(box(0, 0, 0, target=True), box(2, -150, 0), box(3, -150, 0, z=30, w=120, h=100))
        assert is_terminal(s, Remove(2))
        assert not removable(s, 2)


class TestLearnedModel:
    def test_collapse_flag_matches_fallen(self, tiny_model):
        tm = LearnedTransitionModel(tiny_model)
        rng = np.random.default_rng(0)
        for seed in range(5):
            s = physics.generate_pile(5, seed=seed)
            for t in tm.step_many(s, legal_actions(s)[:20], rng):
                assert t.collapsed == bool(t.fallen_ids)
                assert t.total_surrounding_translation >= 0

    def test_support_outside_network_slots(self, tiny_model):
        tm = LearnedTransitionModel(tiny_model)
        s = physics.generate_pile(12, seed=3)
        _, far = tm._split(s)
        t = tm.step(s, Slide(0, 30.0, far[0].id), np.random.default_rng(0))
        assert len(t.next_state.objects) == 12

    def test_grasp_is_identity(self, tiny_model):
        s = physics.generate_pile(4, seed=1)
        t = LearnedTransitionModel(tiny_model).step(s, Grasp(), np.random.default_rng(0))
        assert t.next_state is s and not t.collapsed

    def test_settled_drops_hovering_box(self):
        prev = state(box(0, 0, 0, target=True), box(1, 0, 0, z=30))
        nxt = state(box(0, 100, 0, target=True), box(1, 0, 0, z=30))  # support slid away
        out, fallen = settled(prev, nxt, 5.0)
        assert fallen == [1] and out.get(1).z == 0.0
        assert invariant_violations(out) == []

    def test_settled_keeps_untouched_boxes(self):
        prev = state(box(0, 0, 0, target=True), box(1, 150, 0), box(2, 150, 0, z=30))
        nxt = state(box(0, 30, 0, target=True), box(1, 150, 0), box(2, 150, 0, z=33))
        out, fallen = settled(prev, nxt, 5.0)
        assert fallen == [] and out.get(2).z == 30.0
