"""Monte Carlo tree search over action/observation histories (POMCP) and the act loop.

The search itself only talks to a small simulator protocol, so the same code
plans for cluttered piles and for the toy problems used to check it against
exhaustive search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Hashable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from . import belief as bel
from . import physics
from .pomdp import (Action, Grasp, LearnedTransitionModel, Remove, RewardConfig, Gripper, Slide,
                    N_DIRECTIONS, action_label, action_to_dict, graspability, legal_actions,
                    removable, slide_reward)
from .sensing import (Observation, HeightMap, SensingParams, observe_scene, occlusion_ratio,
                      predict_observation, render)
from .world import ClutterState, objects_overlap_area


class NoActions(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    n_simulations: int = 1000
    uct_constant: float = 2.0
    rollout_depth: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_simulations < 1 or self.rollout_depth < 1 or self.uct_constant < 0:
            raise ValueError("need n_simulations >= 1, rollout_depth >= 1, uct_constant >= 0")


class Simulator(Protocol):
    """What the search needs from a problem."""

    def actions(self, state) -> List[Hashable]: ...

    def step(self, state, action, rng: np.random.Generator, want_key: bool
             ) -> Tuple[Any, Hashable, float, bool]:
        """(next state, observation key or None, reward, terminal)."""

    def rollout_action(self, state, after_remove: bool, rng: np.random.Generator): ...


class TreeNode:
    __slots__ = ("actions", "counts", "values", "children", "visits")

    def __init__(self):
        self.actions: Optional[List] = None
        self.counts: Optional[np.ndarray] = None
        self.values: Optional[np.ndarray] = None
        self.children: Dict[Tuple[int, Hashable], "TreeNode"] = {}
        self.visits = 0

    def expand(self, actions: Sequence) -> None:
        self.actions = list(actions)
        self.counts = np.zeros(len(self.actions), dtype=np.int64)
        self.values = np.zeros(len(self.actions))

    @property
    def expanded(self) -> bool:
        return self.actions is not None

    def q_table(self) -> List[Tuple[Any, int, float]]:
        return [(a, int(n), float(q)) for a, n, q in zip(self.actions or [], self.counts, self.values)]


def uct_score(q: float, n_parent: int, n_action: int, c: float) -> float:
    return q + c * math.sqrt(math.log(n_parent) / n_action)


def uct_select(node: TreeNode, c: float) -> int:
    """Index of the action to try: untried ones first in order, then the UCT argmax."""
    if not node.actions:
        raise NoActions("node has no legal actions")
    untried = np.flatnonzero(node.counts == 0)
    if untried.size:
        return int(untried[0])
    total = int(node.counts.sum())
    scores = node.values + c * np.sqrt(math.log(total) / node.counts)
    return int(np.argmax(scores))  # first maximum = lowest index


@dataclass
class SearchResult:
    action: Any
    root: TreeNode
    # (index of the first action, return) per simulation
    log: List[Tuple[int, float]] = field(default_factory=list)

    def q_table(self):
        return self.root.q_table()


def search(sample_state: Callable[[np.random.Generator], Any], sim: Simulator, cfg: PlannerConfig,
           rng: Optional[np.random.Generator] = None) -> SearchResult:
    """Run ``cfg.n_simulations`` simulations from states drawn by ``sample_state``."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    root = TreeNode()
    log: List[Tuple[int, float]] = []
    c = cfg.uct_constant
    horizon = cfg.rollout_depth

    def rollout(state, depth: int, after_remove: bool) -> float:
        total = 0.0
        while depth < horizon:
            a = sim.rollout_action(state, after_remove, rng)
            state, _, r, done = sim.step(state, a, rng, False)
            total += r
            depth += 1
            if done:
                break
            after_remove = after_remove or isinstance(a, Remove)
        return total

    def simulate(state, node: TreeNode, depth: int, after_remove: bool) -> Tuple[int, float]:
        if not node.expanded:
            node.expand(sim.actions(state))
        k = uct_select(node, c)
        a = node.actions[k]
        fresh = node.counts[k] == 0
        nxt, key, r, done = sim.step(state, a, rng, not fresh and depth + 1 < horizon)
        ret = r
        if not done and depth + 1 < horizon:
            removed = after_remove or isinstance(a, Remove)
            if fresh:
                ret += rollout(nxt, depth + 1, removed)
            else:
                child = node.children.get((k, key))
                if child is None:
                    child = node.children[(k, key)] = TreeNode()
                    # counted once the tree policy first acts from it
                    ret += rollout(nxt, depth + 1, removed)
                else:
                    ret += simulate(nxt, child, depth + 1, removed)[1]
        node.visits += 1
        node.counts[k] += 1
        node.values[k] += (ret - node.values[k]) / node.counts[k]
        return k, ret

    for _ in range(cfg.n_simulations):
        s0 = sample_state(rng)
        log.append(simulate(s0, root, 0, False))
    tried = np.flatnonzero(root.counts > 0)
    best = int(tried[np.argmax(root.values[tried])])
    return SearchResult(root.actions[best], root, log)


# --- clutter problem -----------------------------------------------------------

@dataclass
class ClutterSimulator:
    """Generative model of the retrieval task on top of a learned transition model."""

    trans: LearnedTransitionModel
    rewards: RewardConfig = RewardConfig()
    gripper: Gripper = Gripper()
    sensing: SensingParams = SensingParams()
    supported: bool = True
    allow_remove: bool = True
    # per-search memo of target occlusion and grasp gate, keyed by state identity
    _memo: Dict[int, Tuple[ClutterState, float, Optional[bool]]] = field(default_factory=dict, repr=False)

    def clear_cache(self) -> None:
        self._memo.clear()

    def occlusion(self, s: ClutterState) -> float:
        hit = self._memo.get(id(s))
        if hit is None:
            hit = (s, occlusion_ratio(s, s.target_id, self.sensing.resolution), None)
            self._memo[id(s)] = hit
        return hit[1]

    def target_free(self, s: ClutterState) -> bool:
        """The grasp gate for the target (graspability and occlusion)."""
        occ = self.occlusion(s)
        _, _, free = self._memo[id(s)]
        if free is None:
            free = (occ <= self.rewards.occlusion_max
                    and graspability(s, s.target_id, self.gripper) >= self.rewards.graspability_threshold)
            self._memo[id(s)] = (s, occ, free)
        return free

    def actions(self, s: ClutterState) -> List[Action]:
        return legal_actions(s, self.rewards, self.gripper, allow_remove=self.allow_remove,
                             supported=self.supported)

    def step(self, s: ClutterState, a: Action, rng: np.random.Generator, want_key: bool):
        if isinstance(a, Grasp):
            ok = self.target_free(s)
            return s, None, (self.rewards.grasp_success if ok else self.rewards.grasp_failure), True
        if isinstance(a, Remove):
            if not (s.has(a.object_id) and removable(s, a.object_id, self.rewards, self.gripper)):
                return s, None, self.rewards.remove_failure, True
            t = self.trans.step(s, a, rng)
            r = self.rewards.remove_success
        else:
            t = self.trans.step(s, a, rng)
            r = slide_reward(self.occlusion(s), self.occlusion(t.next_state),
                             t.total_surrounding_translation, self.rewards)
        key = predict_observation(t.next_state, self.sensing).key() if want_key else None
        return t.next_state, key, r, t.collapsed

    def removal_candidates(self, s: ClutterState) -> List[Remove]:
        if not self.allow_remove:
            return []
        return [Remove(o.id) for o in s.surrounding
                if graspability(s, o.id, self.gripper) >= self.rewards.graspability_threshold]

    def rollout_action(self, s: ClutterState, after_remove: bool, rng: np.random.Generator) -> Action:
        if self.target_free(s):
            return Grasp()
        if after_remove:
            opts: List[Action] = self.removal_candidates(s) + [Grasp()]
            return opts[int(rng.integers(len(opts)))]
        return self.occlusion_safe_slide(s, rng)

    def occlusion_safe_slide(self, s: ClutterState, rng: np.random.Generator) -> Slide:
        support = None
        if self.supported and s.surrounding:
            t = s.target
            above = [o.id for o in s.surrounding
                     if o.z >= t.top - 1.0 and objects_overlap_area(o, t) > 1e-6]
            pool = above or [o.id for o in s.surrounding]
            support = pool[int(rng.integers(len(pool)))]
        slides = [Slide(d, physics.SLIDE_DISTANCE, support) for d in range(N_DIRECTIONS)]
        occ0 = self.occlusion(s)
        outs = self.trans.step_many(s, slides, rng)
        ok = [a for a, t in zip(slides, outs) if self.occlusion(t.next_state) <= occ0 + 1e-9]
        pool = ok or slides
        return pool[int(rng.integers(len(pool)))]


def plan(b: bel.Belief, cfg: PlannerConfig, sim: ClutterSimulator,
         rng: Optional[np.random.Generator] = None) -> SearchResult:
    """Best root action after ``cfg.n_simulations`` simulations from particles of ``b``."""
    if not b.particles:
        raise bel.EmptyBelief("cannot plan on an empty belief")
    states = b.states
    w = np.array([p.weight for p in b.particles])
    cum = np.cumsum(w / w.sum())

    def sample(r: np.random.Generator) -> ClutterState:
        k = int(np.searchsorted(cum, r.random(), side="right"))
        return states[min(k, len(states) - 1)]

    sim.clear_cache()
    try:
        return search(sample, sim, cfg, rng)
    finally:
        sim.clear_cache()


# --- closed loop ---------------------------------------------------------------

@dataclass
class EpisodeResult:
    success: bool
    steps: int
    total_movement_mm: float
    collapsed: bool
    trace: List[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {"success": self.success, "steps": self.steps,
                "total_movement_mm": self.total_movement_mm, "collapsed": self.collapsed}


def _bbox_dict(b) -> dict:
    return {"center": list(b.center), "theta_bin": b.theta_bin, "size": [round(v, 3) for v in b.size],
            "top_height": round(b.top_height, 3), "object_id": b.object_id}


class PomcpPolicy:
    """Belief tracking plus tree search; ``supported=False, allow_remove=False`` is the one-armed robot."""

    def __init__(self, trans: LearnedTransitionModel, cfg: PlannerConfig = PlannerConfig(),
                 rewards: RewardConfig = RewardConfig(), gripper: Gripper = Gripper(),
                 belief_params: bel.BeliefParams = bel.BeliefParams(),
                 sensing: SensingParams = SensingParams(), supported: bool = True,
                 allow_remove: bool = True):
        self.trans = trans
        self.cfg = cfg
        self.sim = ClutterSimulator(trans, rewards, gripper, sensing, supported, allow_remove)
        self.belief_params = belief_params
        self.belief: Optional[bel.Belief] = None
        self.last_action: Optional[Action] = None
        self.target_id = 0
        self.target_size: Optional[bel.TargetSize] = None
        self.seed = 0

    def reset(self, target_id: int, target_size: bel.TargetSize, seed: int = 0) -> None:
        self.belief = None
        self.last_action = None
        self.target_id = target_id
        self.target_size = target_size
        self.seed = seed

    def _update_belief(self, obs: Observation, hm: HeightMap, step: int) -> Tuple[bool, bool]:
        """Returns (re-estimated, fell back to the verbatim particle)."""
        if self.belief is not None and self.last_action is not None:
            try:
                self.belief = bel.filter_particles(self.belief, self.last_action, obs, self.trans,
                                                   self.belief_params.error_thresh,
                                                   seed=self.seed * 1000 + step)
                return False, False
            except bel.NoSurvivors:
                pass
        self.belief, fell = bel.estimate_belief(obs, hm, self.target_size, self.target_id,
                                                self.belief_params)
        return True, fell

    def act(self, obs: Observation, hm: HeightMap, step: int):
        fresh, fell = self._update_belief(obs, hm, step)
        rng = np.random.default_rng((self.cfg.seed, self.seed, step))
        res = plan(self.belief, self.cfg, self.sim, rng)
        k = res.root.actions.index(res.action)
        info = {"belief_size": len(self.belief), "belief_reestimated": fresh, "fell_back": fell,
                "predicted_reward": float(res.root.values[k]), "root_visits": int(res.root.counts.sum())}
        return res.action, info, self.object_hints()

    def object_hints(self) -> Dict[int, Tuple[float, float, float]]:
        """Weighted mean (x, y, top) of every believed object, for acting on the real pile."""
        acc: Dict[int, np.ndarray] = {}
        for p in self.belief.particles:
            for o in p.state.objects:
                acc.setdefault(o.id, np.zeros(4))
                acc[o.id] += p.weight * np.array([o.x, o.y, o.top, 1.0])
        return {i: (v[0] / v[3], v[1] / v[3], v[2] / v[3]) for i, v in acc.items()}

    def executed(self, action: Action) -> None:
        self.last_action = action


def locate_object(s: ClutterState, hint: Tuple[float, float, float]) -> int:
    """Id of the real non-target object the robot finds at a believed location."""
    from .world import ObjectState
    x, y, top = hint
    probe = ObjectState.create(-1, x, y, 0.0, 0.0, 1.0, 1.0, 1.0)
    under = [o for o in s.surrounding if objects_overlap_area(o, probe) > 0.0]
    if under:
        return min(under, key=lambda o: (abs(o.top - top), o.id)).id
    return min(s.surrounding, key=lambda o: (math.hypot(o.x - x, o.y - y), o.id)).id


def to_world_action(a: Action, s: ClutterState, hints: Dict[int, Tuple[float, float, float]]) -> Action:
    """Rewrite belief-side object ids into ids of the real pile."""
    if isinstance(a, Remove):
        return Remove(locate_object(s, hints[a.object_id])) if s.surrounding else a
    if isinstance(a, Slide) and a.support_id is not None and s.surrounding:
        return Slide(a.direction_bin, a.distance, locate_object(s, hints[a.support_id]))
    return a


def run_episode(initial: ClutterState, policy: PomcpPolicy, max_steps: int = 10,
                physics_params: physics.PhysicsParams = physics.PhysicsParams(),
                seed: int = 0, on_step: Optional[Callable[[dict], None]] = None) -> EpisodeResult:
    """Observe, update the belief, plan, execute on the real pile; repeat until done."""
    from .pomdp import PhysicsTransitionModel
    truth = PhysicsTransitionModel(physics_params)
    rewards, gripper, sensing = policy.sim.rewards, policy.sim.gripper, policy.sim.sensing
    policy.reset(initial.target_id, bel.TargetSize.of(initial.target), seed)
    rng = np.random.default_rng((seed, 0x5EED))
    s = initial
    movement = 0.0
    trace: List[dict] = []
    success = collapsed = False
    steps = 0
    for step in range(max_steps):
        obs, hm = observe_scene(s, sensing)
        a, info, hints = policy.act(obs, hm, step)
        real = to_world_action(a, s, hints)
        steps += 1
        entry = {"step": step, **info, "chosen_action": action_to_dict(a),
                 "executed_action": action_to_dict(real),
                 "observation": [_bbox_dict(b) for b in obs.bboxes]}
        done = False
        if isinstance(real, Grasp):
            success = removable(s, s.target_id, rewards, gripper)
            entry["executed_outcome"] = {"reward": rewards.grasp_success if success
                                         else rewards.grasp_failure}
            done = True
        elif isinstance(real, Remove) and not (s.has(real.object_id)
                                               and removable(s, real.object_id, rewards, gripper)):
            entry["executed_outcome"] = {"reward": rewards.remove_failure}
            done = True
        else:
            t = truth.step(s, real, rng)
            movement += t.total_surrounding_translation
            r = rewards.remove_success if isinstance(real, Remove) else slide_reward(
                occlusion_ratio(s, s.target_id), occlusion_ratio(t.next_state, s.target_id),
                t.total_surrounding_translation, rewards)
            entry["executed_outcome"] = {"reward": r, "movement_mm": t.total_surrounding_translation,
                                         "collapsed": t.collapsed, "fallen_ids": t.fallen_ids}
            s = t.next_state
            if t.collapsed:
                collapsed = done = True
            policy.executed(a)
        trace.append(entry)
        if on_step is not None:
            on_step(entry)
        if done:
            break
    return EpisodeResult(success, steps, movement, collapsed, trace)
