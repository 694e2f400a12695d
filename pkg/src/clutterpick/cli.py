"""Batch command line: data generation, training, planning, episodes, benchmarks.

Every subcommand prints JSON (or CSV for ``bench``) on stdout.  Bad input
ends the process with a nonzero status and a one-line error object on
stderr: ``{"error": <kind>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import belief as bel
from . import physics, transnet
from .harness import POLICIES, RunConfig, bench, run_policy
from .planner import ClutterSimulator, PlannerConfig, plan
from .pomdp import LearnedTransitionModel, action_label, action_to_dict
from .scenario import Scenario, ScenarioError, load_pattern, load_scenario, pattern_names
from .sensing import Observation, SensingParams, load_heightmap_png, observe_heightmap, observe_scene

log = logging.getLogger("clutterpick")

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    """Invalid command-line input."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False)


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


# --- loading helpers -------------------------------------------------------------

def _scenario(ref: str) -> Scenario:
    """A scenario file, or the name of a shipped pattern."""
    p = Path(ref)
    if p.is_file():
        return load_scenario(p)
    if ref in pattern_names():
        return load_pattern(ref)
    raise ScenarioError(f"no scenario file or shipped pattern named {ref!r}")


def _scenarios(ref: Optional[str]) -> List[Scenario]:
    if ref is None:
        return [load_pattern(n) for n in pattern_names()]
    d = Path(ref)
    if not d.is_dir():
        raise ScenarioError(f"{ref} is not a directory")
    files = sorted(d.glob("*.json"))
    if not files:
        raise ScenarioError(f"no *.json scenarios in {ref}")
    return [load_scenario(f) for f in files]


def _model(path: Optional[str], required: bool = True) -> Optional[transnet.MlpModel]:
    if path is None:
        if required:
            raise UsageError("--model is required")
        return None
    try:
        return transnet.MlpModel.load(path)
    except FileNotFoundError as exc:
        raise UsageError(f"model file not found: {path}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot read model {path}: {exc}") from exc


def _policies(text: str) -> List[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in POLICIES]
    if not names or bad:
        raise UsageError(f"unknown policies {bad or text!r}; choose from {', '.join(POLICIES)}")
    return names


def _planner_cfg(args) -> PlannerConfig:
    try:
        return PlannerConfig(n_simulations=args.simulations, uct_constant=args.uct,
                             rollout_depth=args.depth, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


# --- subcommands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    params = physics.perturbed_params() if args.perturbed else physics.PhysicsParams()
    recs = physics.generate_transition_dataset(args.n, params, seed=args.seed)
    if args.augment > 1:
        recs = physics.augment_records(recs, args.augment, seed=args.seed)
    physics.write_dataset(recs, args.out)
    print(_dump({"records": len(recs), "out": args.out, "seed": args.seed,
                 "perturbed": args.perturbed}))
    return 0


def cmd_train(args) -> int:
    try:
        recs = physics.read_dataset(args.data)
    except FileNotFoundError as exc:
        raise UsageError(f"dataset not found: {args.data}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed dataset {args.data}: {exc}") from exc
    if not recs:
        raise UsageError(f"dataset {args.data} is empty")
    cfg = transnet.TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs,
                               seed=args.seed)
    init = _model(args.init) if args.init else None
    model, losses = transnet.train(recs, cfg, init=init)
    model.save(args.out)
    print(_dump({"out": args.out, "epochs": len(losses), "first_loss": losses[0],
                 "final_loss": losses[-1], "loss_ratio": losses[-1] / losses[0],
                 "train_center_error_mm": transnet.evaluate_center_error(model, recs)}))
    return 0


def cmd_plan(args) -> int:
    sc = _scenario(args.scenario)
    model = _model(args.model)
    s = sc.state(args.scenario_seed)
    obs, hm = observe_scene(s)
    b, fell = bel.estimate_belief(obs, hm, bel.TargetSize.of(s.target), s.target_id)
    cfg = _planner_cfg(args)
    sim = ClutterSimulator(LearnedTransitionModel(model))
    res = plan(b, cfg, sim, np.random.default_rng(cfg.seed))
    k = res.root.actions.index(res.action)
    print(_dump({
        "scenario": sc.name, "belief_size": len(b), "fell_back": fell,
        "action": action_to_dict(res.action), "label": action_label(res.action),
        "q": float(res.root.values[k]),
        "root": [{"action": action_label(a), "visits": n, "q": q} for a, n, q in res.q_table() if n > 0],
    }))
    return 0


def cmd_run(args) -> int:
    sc = _scenario(args.scenario)
    model = _model(args.model, required=args.policy != "simple")
    cfg = RunConfig(planner=_planner_cfg(args), max_steps=args.max_steps)
    res = run_policy(args.policy, sc.state(args.seed), model, cfg, args.seed)
    if args.trace:
        with open(args.trace, "w") as fh:
            for e in res.trace:
                fh.write(json.dumps(e) + "\n")
    print(_dump({"scenario": sc.name, "policy": args.policy, "seed": args.seed, **res.summary(),
                 "trace": res.trace}))
    return 0


def cmd_bench(args) -> int:
    scs = _scenarios(args.scenarios)
    pols = _policies(args.policies)
    model = _model(args.model, required=any(p != "simple" for p in pols))
    cfg = RunConfig(planner=_planner_cfg(args), max_steps=args.max_steps)

    def progress(rec):
        log.info("%s %s seed=%d success=%s steps=%d", rec.policy, rec.scenario, rec.seed,
                 rec.success, rec.steps)

    rep = bench(scs, pols, args.repeats, model, cfg, progress)
    csv_text = rep.csv_text()
    if args.csv:
        Path(args.csv).write_text(csv_text)
    if args.json:
        Path(args.json).write_text(_dump(rep.to_dict()) + "\n")
    if args.format == "csv":
        sys.stdout.write(csv_text)
    else:
        print(_dump(rep.to_dict()))
    return 0


def cmd_replay_depth(args) -> int:
    try:
        hm = load_heightmap_png(args.png, args.resolution, args.mm_per_unit)
    except FileNotFoundError as exc:
        raise UsageError(f"height map not found: {args.png}") from exc
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read height map {args.png}: {exc}") from exc
    sensing = SensingParams(resolution=args.resolution)
    boxes = observe_heightmap(hm, sensing)
    if not boxes:
        raise UsageError("the height map shows no objects")
    tx, ty = args.target_at if args.target_at else (0.0, 0.0)
    k = min(range(len(boxes)), key=lambda i: math.hypot(boxes[i].center[0] - tx, boxes[i].center[1] - ty))
    labelled = list(boxes)
    labelled[k] = replace(boxes[k], object_id=0)
    obs = Observation(sorted(labelled, key=lambda b: -b.top_height))
    w, h, t = args.target_size
    size = bel.TargetSize(max(w, h), min(w, h), t)
    b, fell = bel.estimate_belief(obs, hm, size, 0)
    print(_dump({
        "boxes": [{"center": list(x.center), "theta_bin": x.theta_bin, "size": list(x.size),
                   "top_height": x.top_height, "object_id": x.object_id} for x in obs.bboxes],
        "fell_back": fell,
        "hypotheses": [{"weight": p.weight,
                        "objects": [{"id": o.id, "target": o.is_target, "x": o.x, "y": o.y, "z": o.z,
                                     "theta": o.theta, "w": o.w, "h": o.h, "thickness": o.thickness}
                                    for o in p.state.objects]}
                       for p in b.particles],
    }))
    return 0


# --- parser ---------------------------------------------------------------------

def _planner_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--simulations", type=int, default=PlannerConfig.n_simulations,
                   help="tree-search simulations per decision")
    p.add_argument("--depth", type=int, default=PlannerConfig.rollout_depth, help="search horizon")
    p.add_argument("--uct", type=float, default=PlannerConfig.uct_constant, help="exploration constant")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="clutterpick", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="simulate a transition dataset")
    p.add_argument("--n", type=_positive(int), default=3000)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", type=_positive(int), default=1,
                   help="multiply records by rigid re-placements")
    p.add_argument("--perturbed", action="store_true",
                   help="use shifted physics parameters (stand-in for real-robot data)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit the transition network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=_positive(float), default=1e-4)
    p.add_argument("--batch", type=_positive(int), default=512)
    p.add_argument("--epochs", type=_positive(int), default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", help="start from this model (fine-tuning)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="plan one action for a scenario")
    p.add_argument("--scenario", required=True, help="scenario file or shipped pattern name")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario-seed", type=int, default=None, help="jitter seed for the pile")
    _planner_args(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="run one episode")
    p.add_argument("--scenario", required=True, help="scenario file or shipped pattern name")
    p.add_argument("--model")
    p.add_argument("--policy", choices=POLICIES, default="pomcp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=_positive(int), default=10)
    p.add_argument("--trace", help="also write the trace as line-delimited JSON")
    _planner_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="benchmark policies over scenarios")
    p.add_argument("--scenarios", help="directory of scenario files (default: shipped patterns)")
    p.add_argument("--model")
    p.add_argument("--repeats", type=_positive(int), default=10)
    p.add_argument("--policies", default=",".join(POLICIES))
    p.add_argument("--max-steps", type=_positive(int), default=10)
    p.add_argument("--seed", type=int, default=0, help="planner seed")
    p.add_argument("--csv", help="write per-episode CSV here")
    p.add_argument("--json", help="write the full report as JSON here")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="what goes to stdout")
    _planner_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay-depth", help="belief hypotheses for an external height map")
    p.add_argument("--png", required=True, help="16-bit single-channel height image")
    p.add_argument("--resolution", type=_positive(float), default=2.0, help="mm per pixel")
    p.add_argument("--mm-per-unit", type=_positive(float), default=0.1, help="height per image unit")
    p.add_argument("--target-at", type=float, nargs=2, metavar=("X", "Y"),
                   help="workspace point on the target (default: the centre)")
    p.add_argument("--target-size", type=_positive(float), nargs=3, metavar=("W", "H", "T"),
                   default=(70.0, 50.0, 30.0))
    p.set_defaults(func=cmd_replay_depth)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except ScenarioError as exc:
        return _fail("scenario", str(exc), EXIT_USAGE)
    except (bel.NoHypothesis, bel.EmptyBelief) as exc:
        return _fail("belief", str(exc), EXIT_FAILURE)
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
