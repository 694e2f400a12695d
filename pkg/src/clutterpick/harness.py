"""Baselines, policy dispatch and batch benchmarking."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import physics
from .planner import EpisodeResult, PlannerConfig, PomcpPolicy, run_episode
from .pomdp import (Grasp, Gripper, LearnedTransitionModel, PhysicsTransitionModel, Remove,
                    RewardConfig, action_to_dict, graspability, removable)
from .scenario import Scenario
from .transnet import MlpModel
from .world import ClutterState

log = logging.getLogger(__name__)

POLICIES = ("pomcp", "simple", "single-arm")
CSV_HEADER = ["policy", "scenario", "seed", "success", "steps", "movement_mm", "collapsed"]


@dataclass
class RunConfig:
    planner: PlannerConfig = PlannerConfig()
    rewards: RewardConfig = RewardConfig()
    gripper: Gripper = Gripper()
    physics: physics.PhysicsParams = physics.PhysicsParams()
    max_steps: int = 10


def baseline_simple(initial: ClutterState, cfg: RunConfig = RunConfig(), seed: int = 0) -> EpisodeResult:
    """Take boxes off the top of the pile until the target can be gripped."""
    truth = PhysicsTransitionModel(cfg.physics)
    rng = np.random.default_rng((seed, 0x5EED))
    s = initial
    movement = 0.0
    trace = []
    for step in range(cfg.max_steps):
        if removable(s, s.target_id, cfg.rewards, cfg.gripper):
            trace.append({"step": step, "executed_action": action_to_dict(Grasp()),
                          "executed_outcome": {"reward": cfg.rewards.grasp_success}})
            return EpisodeResult(True, step + 1, movement, False, trace)
        grippable = [o for o in s.surrounding
                     if graspability(s, o.id, cfg.gripper) >= cfg.rewards.graspability_threshold]
        if not grippable:
            trace.append({"step": step, "executed_action": None,
                          "executed_outcome": {"reason": "no graspable object left"}})
            return EpisodeResult(False, step, movement, False, trace)
        pick = max(grippable, key=lambda o: (o.top, -o.id))
        a = Remove(pick.id)
        entry = {"step": step, "executed_action": action_to_dict(a)}
        trace.append(entry)
        if not removable(s, pick.id, cfg.rewards, cfg.gripper):
            entry["executed_outcome"] = {"reward": cfg.rewards.remove_failure}
            return EpisodeResult(False, step + 1, movement, False, trace)
        t = truth.step(s, a, rng)
        movement += t.total_surrounding_translation
        entry["executed_outcome"] = {"reward": cfg.rewards.remove_success,
                                     "movement_mm": t.total_surrounding_translation,
                                     "collapsed": t.collapsed, "fallen_ids": t.fallen_ids}
        s = t.next_state
        if t.collapsed:
            return EpisodeResult(False, step + 1, movement, True, trace)
    return EpisodeResult(False, cfg.max_steps, movement, False, trace)


def make_policy(name: str, model: Optional[MlpModel], cfg: RunConfig) -> Optional[PomcpPolicy]:
    if name == "simple":
        return None
    if name not in POLICIES:
        raise ValueError(f"unknown policy {name!r}; choose from {', '.join(POLICIES)}")
    if model is None:
        raise ValueError(f"policy {name!r} needs a transition model")
    trans = LearnedTransitionModel(model)
    one_arm = name == "single-arm"
    return PomcpPolicy(trans, cfg.planner, cfg.rewards, cfg.gripper, supported=not one_arm,
                       allow_remove=not one_arm)


def baseline_single_arm(initial: ClutterState, model: MlpModel, cfg: RunConfig = RunConfig(),
                        seed: int = 0) -> EpisodeResult:
    """Tree search limited to unsupported slides and the final grasp."""
    return run_episode(initial, make_policy("single-arm", model, cfg), cfg.max_steps, cfg.physics, seed)


def run_policy(name: str, initial: ClutterState, model: Optional[MlpModel], cfg: RunConfig = RunConfig(),
               seed: int = 0) -> EpisodeResult:
    if name == "simple":
        return baseline_simple(initial, cfg, seed)
    pol = make_policy(name, model, cfg)
    return run_episode(initial, pol, cfg.max_steps, cfg.physics, seed)


# --- benchmark ------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    policy: str
    scenario: str
    seed: int
    success: bool
    steps: int
    movement_mm: float
    collapsed: bool

    def row(self) -> List:
        return [self.policy, self.scenario, self.seed, int(self.success), self.steps,
                f"{self.movement_mm:.3f}", int(self.collapsed)]


@dataclass
class PolicySummary:
    policy: str
    episodes: int
    success_count: int
    success_rate: float
    mean_steps_success: Optional[float]
    mean_steps_all: Optional[float]
    mean_movement_success: Optional[float]
    mean_movement_all: Optional[float]


def _mean(xs: Sequence[float]) -> Optional[float]:
    return float(np.mean(xs)) if len(xs) else None


def summarize(records: Iterable[EpisodeRecord]) -> List[PolicySummary]:
    """Per-policy aggregates, in first-seen policy order."""
    by: Dict[str, List[EpisodeRecord]] = {}
    for r in records:
        by.setdefault(r.policy, []).append(r)
    out = []
    for pol, rs in by.items():
        ok = [r for r in rs if r.success]
        out.append(PolicySummary(
            pol, len(rs), len(ok), 100.0 * len(ok) / len(rs),
            _mean([r.steps for r in ok]), _mean([r.steps for r in rs]),
            _mean([r.movement_mm for r in ok]), _mean([r.movement_mm for r in rs])))
    return out


@dataclass
class BenchmarkReport:
    records: List[EpisodeRecord] = field(default_factory=list)

    @property
    def summaries(self) -> List[PolicySummary]:
        return summarize(self.records)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "notes": "mean_steps_success and mean_movement_success average successful episodes only; "
                     "the *_all variants average every episode",
            "policies": [s.__dict__ for s in self.summaries],
            "episodes": [r.__dict__ for r in self.records],
        }


def bench(scenarios: Sequence[Scenario], policies: Sequence[str], repeats: int,
          model: Optional[MlpModel], cfg: RunConfig = RunConfig(),
          progress=None) -> BenchmarkReport:
    """Every policy on every scenario for seeds 0..repeats-1, in (policy, scenario, seed) order."""
    report = BenchmarkReport()
    for pol in policies:
        for sc in scenarios:
            for seed in range(repeats):
                res = run_policy(pol, sc.state(seed), model, cfg, seed)
                rec = EpisodeRecord(pol, sc.name, seed, res.success, res.steps,
                                    res.total_movement_mm, res.collapsed)
                report.records.append(rec)
                if progress is not None:
                    progress(rec)
    return report
