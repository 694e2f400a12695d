"""Retrieving a target box from a pile with a two-armed robot.

Modules, bottom-up: ``world`` (boxes and support), ``physics`` (quasi-static
simulator), ``sensing`` (height maps to boxes), ``transnet`` (learned
transition model), ``belief`` (hypotheses about hidden extents), ``pomdp``
(actions, rewards, graspability), ``planner`` (tree search and the act loop)
and ``harness`` (baselines and benchmarks).  ``cli`` wires them to a batch
command line.
"""

__version__ = "0.1.0"
