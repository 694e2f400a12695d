"""Actions, rewards, graspability and terminal conditions of the retrieval problem.

Also hosts the two transition models the planner and the belief filter share:
the physics simulator (ground truth) and the learned network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import physics, transnet
from .sensing import occlusion_ratio
from .world import (ClutterState, ObjectState, footprints_overlap, objects_overlap_area,
                    point_in_convex, stable_at)

N_DIRECTIONS = 16


@dataclass(frozen=True)
class Slide:
    direction_bin: int
    distance: float = physics.SLIDE_DISTANCE
    support_id: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.direction_bin < N_DIRECTIONS:
            raise ValueError(f"direction bin {self.direction_bin} outside 0..{N_DIRECTIONS - 1}")
        if self.distance <= 0:
            raise ValueError("slide distance must be positive")

    @property
    def angle(self) -> float:
        return direction_angle(self.direction_bin)


@dataclass(frozen=True)
class Remove:
    object_id: int


@dataclass(frozen=True)
class Grasp:
    pass


Action = Union[Slide, Remove, Grasp]


def direction_angle(direction_bin: int) -> float:
    return 2.0 * math.pi * direction_bin / N_DIRECTIONS


def action_to_dict(a: Action) -> dict:
    if isinstance(a, Slide):
        return {"type": "slide", "direction_bin": a.direction_bin, "distance": a.distance,
                "support_id": a.support_id}
    if isinstance(a, Remove):
        return {"type": "remove", "object_id": a.object_id}
    return {"type": "grasp"}


def action_from_dict(d: dict) -> Action:
    kind = d.get("type")
    if kind == "slide":
        return Slide(int(d["direction_bin"]), float(d.get("distance", physics.SLIDE_DISTANCE)),
                     None if d.get("support_id") is None else int(d["support_id"]))
    if kind == "remove":
        return Remove(int(d["object_id"]))
    if kind == "grasp":
        return Grasp()
    raise ValueError(f"unknown action type {kind!r}")


def action_label(a: Action) -> str:
    if isinstance(a, Slide):
        sup = "-" if a.support_id is None else a.support_id
        return f"slide(dir={a.direction_bin},sup={sup})"
    if isinstance(a, Remove):
        return f"remove({a.object_id})"
    return "grasp"


@dataclass(frozen=True)
class RewardConfig:
    grasp_success: float = 10.0
    grasp_failure: float = -10.0
    remove_success: float = 0.0
    remove_failure: float = -10.0
    translation_norm: float = 100.0
    graspability_threshold: float = 0.3
    occlusion_max: float = 0.2

    def __post_init__(self):
        if self.translation_norm <= 0:
            raise ValueError("translation_norm must be positive")
        if not 0.0 < self.graspability_threshold <= 1.0:
            raise ValueError("graspability_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class Gripper:
    opening_width: float = 140.0
    finger_width: float = 15.0    # along the closing direction
    finger_length: float = 30.0   # along the gripped face
    clearance: float = 5.0
    # a neighbour blocks a finger if it rises this far above the object's bottom
    height_margin: float = 3.0
    positions_per_axis: int = 5


# --- graspability ------------------------------------------------------------

def _finger_boxes(o: ObjectState, g: Gripper) -> List[Tuple[bool, List[ObjectState]]]:
    """For each candidate grasp: (fits the opening, the two finger boxes)."""
    c, s = math.cos(o.theta), math.sin(o.theta)
    out = []
    for axis in (0, 1):
        across, along = (o.w, o.h) if axis == 0 else (o.h, o.w)
        fits = across + 2 * g.clearance <= g.opening_width
        half_span = max(along / 2.0 - g.finger_length / 2.0, 0.0)
        offset = across / 2.0 + g.clearance + g.finger_width / 2.0
        for t in np.linspace(-half_span, half_span, g.positions_per_axis):
            fingers = []
            for side in (-1.0, 1.0):
                # local frame: u along w, v along h
                u, v = (side * offset, t) if axis == 0 else (t, side * offset)
                fx = o.x + u * c - v * s
                fy = o.y + u * s + v * c
                fw, fh = (g.finger_width, g.finger_length) if axis == 0 else \
                    (g.finger_length, g.finger_width)
                fingers.append(ObjectState.create(-1, fx, fy, o.z, o.theta, fw, fh, 1.0))
            out.append((fits, fingers))
    return out


def graspability(s: ClutterState, obj_id: int, gripper: Gripper = Gripper()) -> float:
    """Fraction of the 2 x ``positions_per_axis`` candidate grasps that are feasible."""
    o = s.get(obj_id)
    limit = o.z + gripper.height_margin
    blockers = [b for b in s.objects if b.id != obj_id and b.top > limit]
    cands = _finger_boxes(o, gripper)
    ok = 0
    for fits, fingers in cands:
        if not fits:
            continue
        if all(objects_overlap_area(f, b) <= 1e-6 for f in fingers for b in blockers):
            ok += 1
    return ok / len(cands)


def removable(s: ClutterState, obj_id: int, rewards: RewardConfig = RewardConfig(),
              gripper: Gripper = Gripper()) -> bool:
    """The grasp gate: graspable enough and not buried."""
    return (graspability(s, obj_id, gripper) >= rewards.graspability_threshold
            and occlusion_ratio(s, obj_id) <= rewards.occlusion_max)


def legal_actions(s: ClutterState, rewards: RewardConfig = RewardConfig(),
                  gripper: Gripper = Gripper(), distance: float = physics.SLIDE_DISTANCE,
                  allow_remove: bool = True, supported: bool = True) -> List[Action]:
    """Grasp, then graspable removes, then every (direction, support) slide.

    With ``supported=False`` the slides carry no support (one-handed robot).
    """
    acts: List[Action] = [Grasp()]
    others = [o.id for o in s.surrounding]
    if allow_remove:
        acts += [Remove(i) for i in others
                 if graspability(s, i, gripper) >= rewards.graspability_threshold]
    if supported:
        acts += [Slide(d, distance, i) for i in others for d in range(N_DIRECTIONS)]
    else:
        acts += [Slide(d, distance, None) for d in range(N_DIRECTIONS)]
    return acts


# --- reward and termination -------------------------------------------------

def slide_reward(occ_before: float, occ_after: float, surrounding_translation: float,
                 rewards: RewardConfig = RewardConfig()) -> float:
    r_occ = -min(1.0, max(0.0, occ_after - occ_before))
    r_t = -min(1.0, surrounding_translation / rewards.translation_norm)
    return r_occ + r_t


def reward(s: ClutterState, a: Action, surrounding_translation: float, s_next: ClutterState,
           rewards: RewardConfig = RewardConfig(), gripper: Gripper = Gripper()) -> float:
    """Immediate reward of executing ``a`` in ``s`` and landing in ``s_next``."""
    if isinstance(a, Slide):
        return slide_reward(occlusion_ratio(s, s.target_id), occlusion_ratio(s_next, s_next.target_id),
                            surrounding_translation, rewards)
    if isinstance(a, Remove):
        ok = s.has(a.object_id) and removable(s, a.object_id, rewards, gripper)
        return rewards.remove_success if ok else rewards.remove_failure
    ok = removable(s, s.target_id, rewards, gripper)
    return rewards.grasp_success if ok else rewards.grasp_failure


def is_terminal(s: ClutterState, last_action: Optional[Action], collapsed: bool = False,
                rewards: RewardConfig = RewardConfig(), gripper: Gripper = Gripper()) -> bool:
    """Whether the episode ends after ``last_action`` was executed in ``s``."""
    if collapsed or isinstance(last_action, Grasp):
        return True
    if isinstance(last_action, Remove):
        return not (s.has(last_action.object_id)
                    and removable(s, last_action.object_id, rewards, gripper))
    return False


# --- transition models ------------------------------------------------------

@dataclass
class Transition:
    next_state: ClutterState
    collapsed: bool
    fallen_ids: List[int]
    total_surrounding_translation: float


def _surrounding_translation(before: ClutterState, after: ClutterState) -> float:
    prev = {o.id: o for o in before.objects}
    return sum(math.hypot(o.x - prev[o.id].x, o.y - prev[o.id].y)
               for o in after.surrounding if o.id in prev)


class PhysicsTransitionModel:
    """Ground truth: the quasi-static simulator."""

    def __init__(self, params: physics.PhysicsParams = physics.PhysicsParams()):
        self.params = params

    def step(self, s: ClutterState, a: Action, rng: np.random.Generator) -> Transition:
        if isinstance(a, Slide):
            out = physics.apply_slide(s, a.angle, a.distance, a.support_id, self.params, rng)
        elif isinstance(a, Remove):
            out = physics.apply_remove(s, a.object_id, self.params, rng)
        else:
            return Transition(s, False, [], 0.0)
        return Transition(out.next_state, out.collapsed, out.fallen_ids,
                          out.total_surrounding_translation)

    def step_many(self, s: ClutterState, actions: Sequence[Action],
                  rng: np.random.Generator) -> List[Transition]:
        return [self.step(s, a, rng) for a in actions]


def settled(prev: ClutterState, nxt: ClutterState, collapse_drop: float) -> Tuple[ClutterState, List[int]]:
    """Re-drop the predicted footprints bottom-up and list the objects that fell.

    Each box lands on the highest box under it, in order of predicted height.
    A box falls if it ends up more than ``collapse_drop`` below where it was
    or rests off balance.
    """
    before = {o.id: o for o in prev.objects}
    order = sorted(nxt.objects, key=lambda o: (o.z, before[o.id].z, o.id))
    placed: List[ObjectState] = []
    dirty: List[Tuple[ObjectState, ObjectState]] = []  # (old pose, new pose) of boxes that moved
    fallen = []
    for o in order:
        old = before[o.id]
        same = (o.x, o.y, o.theta) == (old.x, old.y, old.theta)
        if same and not any(footprints_overlap(a, o) or footprints_overlap(b, o) for a, b in dirty):
            # nothing under it changed: it rests where it was
            placed.append(o.moved(o.x, o.y, old.z))
            continue
        under = [p for p in placed if footprints_overlap(p, o)]
        z = max((p.top for p in under), default=0.0)
        o = o.moved(o.x, o.y, z)
        placed.append(o)
        dirty.append((old, o))
        if old.z - z > collapse_drop:
            fallen.append(o.id)
        elif z > 0 and not any(abs(p.top - z) < 1e-9 and point_in_convex((o.x, o.y), p.polygon)
                               for p in under) and not stable_at(placed, len(placed) - 1):
            # centre over a single supporter is enough; otherwise test the contact hull
            fallen.append(o.id)
    return nxt.with_objects(sorted(placed, key=lambda o: (not o.is_target, o.id))), sorted(fallen)


class LearnedTransitionModel:
    """The trained network as a generative model.

    The network supplies each box's planar pose.  With ``resettle`` the boxes
    are then re-dropped so heights follow the footprints and a collapse means a
    box fell or lost balance; without it a collapse is any predicted drop.
    """

    def __init__(self, model: transnet.MlpModel, collapse_drop: float = 5.0,
                 sigma_t: float = 1.5, sigma_r: float = 0.02, resettle: bool = True):
        self.model = model
        self.collapse_drop = collapse_drop
        self.sigma_t = sigma_t
        self.sigma_r = sigma_r
        self.resettle = resettle

    def _query(self, a: Action):
        if isinstance(a, Slide):
            return ("slide", a.angle, a.distance, a.support_id)
        return ("remove", a.object_id)

    def step_many(self, s: ClutterState, actions: Sequence[Action],
                  rng: np.random.Generator) -> List[Transition]:
        out: List[Optional[Transition]] = [None] * len(actions)
        batch = [k for k, a in enumerate(actions) if not isinstance(a, Grasp)]
        for k, a in enumerate(actions):
            if isinstance(a, Grasp):
                out[k] = Transition(s, False, [], 0.0)
        if batch:
            near, far = self._split(s)
            preds = []
            queries = [self._query(actions[k]) for k in batch]
            # a held box outside the network's slots stays put anyway, so drop the hold
            queries = [q[:3] + (None,) if q[0] == "slide" and q[3] is not None and not near.has(q[3])
                       else q for q in queries]
            in_near = [q[0] == "slide" or near.has(q[1]) for q in queries]
            nets = transnet.predict_many(self.model, near, [q for q, ok in zip(queries, in_near) if ok],
                                         rng, self.sigma_t, self.sigma_r)
            nets = iter(nets)
            for q, ok in zip(queries, in_near):
                if ok:
                    nxt = next(nets)
                    preds.append(s.with_objects(list(nxt.objects) + far))
                else:
                    preds.append(s.with_objects(o for o in s.objects if o.id != q[1]))
            prev = {o.id: o for o in s.objects}
            for k, nxt in zip(batch, preds):
                if self.resettle:
                    nxt, fallen = settled(s, nxt, self.collapse_drop)
                else:
                    fallen = sorted(o.id for o in nxt.objects
                                    if prev[o.id].z - o.z > self.collapse_drop)
                out[k] = Transition(nxt, bool(fallen), fallen, _surrounding_translation(s, nxt))
        return out  # type: ignore[return-value]

    def _split(self, s: ClutterState) -> Tuple[ClutterState, List[ObjectState]]:
        """The target and its nearest neighbours fill the network's slots; the rest stay put."""
        if len(s.objects) <= self.model.slots:
            return s, []
        t = s.target
        others = sorted(s.surrounding, key=lambda o: (math.hypot(o.x - t.x, o.y - t.y), o.id))
        keep = others[:self.model.slots - 1]
        return s.with_objects([t] + keep), others[self.model.slots - 1:]

    def step(self, s: ClutterState, a: Action, rng: np.random.Generator) -> Transition:
        return self.step_many(s, [a], rng)[0]
