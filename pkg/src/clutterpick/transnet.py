"""Object-based transition model: a ReLU perceptron mapping (prior poses, action)
to posterior poses, trained with Adam on simulator transitions.

Each object slot carries ``(x, y, z, theta)``; slot 0 is the target and unused
slots are zero.  Poses are expressed in a frame centred on the target and
aligned with the push, standardized with training-set statistics, and the
network predicts the (scaled) pose change.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .physics import REMOVE, SLIDE, SLIDE_DISTANCE, TransitionRecord
from .world import ClutterState, ObjectState

log = logging.getLogger(__name__)

N_MAX = 8
POSE_DIM = 4
ACTION_DIM = 6
HIDDEN = (512, 256, 256)
# one network output unit = this many RMS pose changes of the training set
OUTPUT_SPREAD = 3.0
# Predicted motions below these are treated as "did not move".  MSE training
# blurs "moves or stays" into a small mean shift; snapping recovers the mode.
MOVE_DEADBAND_XY = 5.0
MOVE_DEADBAND_Z = 5.0


class DimensionMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class TooManyObjects(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 512
    epochs: int = 400
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # re-draw slot order and mirror image of every record each epoch
    augment: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size and epochs must be positive")


# --- bare network -----------------------------------------------------------

def init_layers(dims: Sequence[int], rng: np.random.Generator):
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def mlp_forward(weights, biases, x: np.ndarray):
    """ReLU on hidden layers, identity on the output.  Returns output and activations."""
    acts = [x]
    h = x
    last = len(weights) - 1
    for k, (W, b) in enumerate(zip(weights, biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def mlp_backward(weights, acts, dout: np.ndarray):
    """Gradients of a scalar loss w.r.t. weights and biases given dL/d(output)."""
    gw = [None] * len(weights)
    gb = [None] * len(weights)
    g = dout
    for k in range(len(weights) - 1, -1, -1):
        gw[k] = acts[k].T @ g
        gb[k] = g.sum(axis=0)
        if k > 0:
            g = (g @ weights[k].T) * (acts[k] > 0)
    return gw, gb


class Adam:
    def __init__(self, params: List[np.ndarray], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- model -------------------------------------------------------------------

@dataclass
class MlpModel:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    pose_mean: np.ndarray
    pose_std: np.ndarray
    n_max: int = N_MAX
    workspace: Tuple[float, float] = (500.0, 400.0)
    config: dict = field(default_factory=dict)
    # scale of the predicted pose change (network output units -> mm / rad)
    delta_scale: np.ndarray = field(default_factory=lambda: np.ones(POSE_DIM))

    def __post_init__(self):
        dims = self.layer_dims
        for W, b in zip(self.weights, self.biases):
            if b.shape != (W.shape[1],):
                raise DimensionMismatch("bias does not match weight columns")
        for W0, W1 in zip(self.weights[:-1], self.weights[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise DimensionMismatch("layer dimensions do not chain")
        slots = self.n_max + 1
        if dims[0] != POSE_DIM * slots + ACTION_DIM or dims[-1] != POSE_DIM * slots:
            raise DimensionMismatch(f"layer dims {dims} do not fit n_max={self.n_max}")
        scales = np.concatenate([self.pose_std, self.delta_scale])
        if not (np.all(np.isfinite(scales)) and np.all(scales > 0)):
            raise ValueError("normalization scale must be finite and nonzero")

    @property
    def layer_dims(self) -> List[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def slots(self) -> int:
        return self.n_max + 1

    @classmethod
    def initialize(cls, n_max: int = N_MAX, seed: int = 0, hidden=HIDDEN,
                   workspace=(500.0, 400.0)) -> "MlpModel":
        """He-initialized weights, zero biases, identity normalization."""
        slots = n_max + 1
        dims = [POSE_DIM * slots + ACTION_DIM, *hidden, POSE_DIM * slots]
        W, b = init_layers(dims, np.random.default_rng(seed))
        return cls(W, b, np.zeros(POSE_DIM), np.ones(POSE_DIM), n_max, tuple(workspace))

    def forward_raw(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.weights, self.biases, x)[0]

    # normalization helpers
    def normalize(self, poses: np.ndarray, mask: np.ndarray) -> np.ndarray:
        # absent slots are raw zeros, which is not a plausible non-target pose
        return (poses * mask[..., None] - self.pose_mean) / self.pose_std

    def denormalize(self, z: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return (z * self.pose_std + self.pose_mean) * mask[..., None]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    def to_dict(self) -> dict:
        return {
            "format": "clutterpick-mlp/1",
            "layer_dims": self.layer_dims,
            "activation": "relu-hidden/identity-output",
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "pose_mean": self.pose_mean.tolist(),
            "pose_std": self.pose_std.tolist(),
            "delta_scale": self.delta_scale.tolist(),
            "n_max": self.n_max,
            "workspace": list(self.workspace),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        m = cls([np.asarray(W, dtype=float) for W in d["weights"]],
                [np.asarray(b, dtype=float) for b in d["biases"]],
                np.asarray(d["pose_mean"], dtype=float), np.asarray(d["pose_std"], dtype=float),
                int(d["n_max"]), tuple(d["workspace"]), dict(d.get("config", {})),
                np.asarray(d.get("delta_scale", np.ones(POSE_DIM)), dtype=float))
        if m.layer_dims != list(d["layer_dims"]):
            raise DimensionMismatch("stored layer_dims disagree with weights")
        return m

    @classmethod
    def load(cls, path) -> "MlpModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# --- encodings ----------------------------------------------------------------
#
# Poses enter the network in an action-aligned frame: origin at the target's
# prior center, x-axis along the push direction.  The action vector itself
# keeps the world direction so boundary effects remain learnable.

def wrap_half_pi(d: np.ndarray) -> np.ndarray:
    """Fold an angle difference into [-pi/2, pi/2) (rectangles are pi-periodic)."""
    return (d + math.pi / 2) % math.pi - math.pi / 2


def encode_action(direction: float, distance: float, rel: Optional[Tuple[float, float]],
                  support: bool, workspace) -> np.ndarray:
    """``rel`` is the supported (or removed) object's offset from the target, world frame."""
    hx, hy = workspace[0] / 2.0, workspace[1] / 2.0
    c, s = math.cos(direction), math.sin(direction)
    dx, dy = rel if rel is not None else (0.0, 0.0)
    fx, fy = c * dx + s * dy, -s * dx + c * dy
    return np.array([c, s, distance / SLIDE_DISTANCE, fx / hx, fy / hy, 1.0 if support else 0.0])


def encode_slide(objs: Sequence[ObjectState], direction: float, distance: float,
                 support_slot: Optional[int], workspace) -> np.ndarray:
    t = objs[0]
    if support_slot is None:
        return encode_action(direction, distance, None, False, workspace)
    o = objs[support_slot]
    return encode_action(direction, distance, (o.x - t.x, o.y - t.y), True, workspace)


def encode_removal(target: ObjectState, removed: ObjectState, workspace) -> np.ndarray:
    dx, dy = removed.x - target.x, removed.y - target.y
    return encode_action(math.atan2(dy, dx), 0.0, (dx, dy), False, workspace)


def to_frame(P: np.ndarray, A: np.ndarray, M: np.ndarray, origin: Optional[np.ndarray] = None):
    """World poses (B, slots, 4) -> action frame.  Returns (framed poses, origin)."""
    if origin is None:
        origin = P[:, 0, :2].copy()
    c, s = A[:, 0:1], A[:, 1:2]
    dx = P[..., 0] - origin[:, 0:1]
    dy = P[..., 1] - origin[:, 1:2]
    F = np.empty_like(P)
    F[..., 0] = c * dx + s * dy
    F[..., 1] = -s * dx + c * dy
    F[..., 2] = P[..., 2]
    F[..., 3] = np.mod(P[..., 3] - np.arctan2(s, c), math.pi)
    return F * M[..., None], origin


def frame_pair(P: np.ndarray, Q: np.ndarray, A: np.ndarray, M: np.ndarray):
    """Prior and posterior in the prior's action frame; the posterior keeps its angle offset."""
    F, origin = to_frame(P, A, M)
    G, _ = to_frame(Q, A, M, origin)
    G[..., 3] = (F[..., 3] + Q[..., 3] - P[..., 3]) * M
    return F, G


def from_frame(F: np.ndarray, A: np.ndarray, M: np.ndarray, origin: np.ndarray) -> np.ndarray:
    c, s = A[:, 0:1], A[:, 1:2]
    P = np.empty_like(F)
    P[..., 0] = c * F[..., 0] - s * F[..., 1] + origin[:, 0:1]
    P[..., 1] = s * F[..., 0] + c * F[..., 1] + origin[:, 1:2]
    P[..., 2] = F[..., 2]
    P[..., 3] = F[..., 3] + np.arctan2(s, c)
    return P * M[..., None]


def record_arrays(rec: TransitionRecord, slots: int, workspace) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(prior poses, action encoding, posterior poses, mask) for one record, slot-padded.

    Poses are in the world frame; the posterior angle is unwrapped to lie
    within a quarter turn of the prior angle.
    """
    prior_full = np.asarray(rec.prior, dtype=float).reshape(-1, 7)
    kind = int(rec.action[0])
    if kind == REMOVE:
        victim = int(rec.action[4])
        keep = [k for k in range(prior_full.shape[0]) if k != victim]
        t, r = prior_full[0], prior_full[victim]
        dx, dy = r[0] - t[0], r[1] - t[1]
        act = encode_action(math.atan2(dy, dx), 0.0, (dx, dy), False, workspace)
        prior = prior_full[keep, :4]
    else:
        sup = int(rec.action[3])
        rel = None
        if sup >= 0:
            rel = (prior_full[sup, 0] - prior_full[0, 0], prior_full[sup, 1] - prior_full[0, 1])
        act = encode_action(float(rec.action[1]), float(rec.action[2]), rel, sup >= 0, workspace)
        prior = prior_full[:, :4]
    post = np.asarray(rec.posterior, dtype=float).reshape(-1, 7)[:, :4].copy()
    n = prior.shape[0]
    if n > slots or post.shape[0] != n:
        raise TooManyObjects(f"record with {n} objects does not fit {slots} slots")
    post[:, 3] = prior[:, 3] + wrap_half_pi(post[:, 3] - prior[:, 3])
    P = np.zeros((slots, POSE_DIM))
    Q = np.zeros((slots, POSE_DIM))
    M = np.zeros(slots)
    P[:n], Q[:n], M[:n] = prior, post, 1.0
    return P, act, Q, M


def dataset_arrays(records: Sequence[TransitionRecord], slots: int, workspace):
    P, A, Q, M = zip(*(record_arrays(r, slots, workspace) for r in records))
    return np.stack(P), np.stack(A), np.stack(Q), np.stack(M)


def _inputs(model: MlpModel, F: np.ndarray, A: np.ndarray, M: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    Fn = model.normalize(F, M)
    return np.concatenate([Fn.reshape(len(F), -1), A], axis=1), Fn


def forward(model: MlpModel, prior: np.ndarray, action: np.ndarray,
            mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Posterior poses (world frame) for flat prior pose vectors of length 4*(n_max+1).

    Accepts a single vector or a batch.  Slots whose prior is all zeros are
    treated as absent unless ``mask`` is given.
    """
    prior = np.asarray(prior, dtype=float)
    action = np.asarray(action, dtype=float)
    single = prior.ndim == 1
    P = np.atleast_2d(prior)
    A = np.atleast_2d(action)
    if P.shape[1] != POSE_DIM * model.slots or A.shape[1] != ACTION_DIM or len(P) != len(A):
        raise DimensionMismatch(f"prior {P.shape} / action {A.shape} do not fit the model")
    P = P.reshape(len(P), model.slots, POSE_DIM)
    M = (np.any(P != 0, axis=2)).astype(float) if mask is None else np.atleast_2d(mask)
    F, origin = to_frame(P, A, M)
    x, Fn = _inputs(model, F, A, M)
    delta = model.forward_raw(x).reshape(Fn.shape)
    out = from_frame((F + delta * model.delta_scale) * M[..., None], A, M, origin)
    out = out.reshape(len(P), -1)
    return out[0] if single else out


# --- training -------------------------------------------------------------------

def fit_normalization(F: np.ndarray, G: np.ndarray, M: np.ndarray):
    """Per-feature input offset/scale and output scale from framed prior/posterior poses."""
    present = M.astype(bool)
    prior = F[present]
    mean = prior.mean(axis=0)
    std = prior.std(axis=0)
    std[std < 1e-6] = 1.0
    delta = (G - F)[present]
    dscale = np.sqrt((delta ** 2).mean(axis=0))
    dscale *= OUTPUT_SPREAD
    dscale[dscale < 1e-6] = 1.0
    return mean, std, dscale


def masked_mse(pred: np.ndarray, target: np.ndarray, M: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over present slot features, and its gradient w.r.t. ``pred``."""
    mask = np.broadcast_to(M[..., None], pred.shape)
    count = max(1.0, mask.sum())
    diff = (pred - target) * mask
    return float((diff ** 2).sum() / count), 2.0 * diff / count


def symmetry_augment(F: np.ndarray, G: np.ndarray, A: np.ndarray, M: np.ndarray,
                     rng: np.random.Generator):
    """Random relabelling of the non-target slots plus a random mirror about the push axis.

    Both leave the physics unchanged, so each epoch sees a fresh but equally
    valid copy of every record.  Arrays are in the action frame.
    """
    B, S = M.shape
    keys = rng.random((B, S))
    keys[:, 0] = -1.0
    keys[M == 0] = 2.0
    order = np.argsort(keys, axis=1)
    rows = np.arange(B)[:, None]
    F, G, M = F[rows, order], G[rows, order], M[rows, order]
    A = A.copy()
    flip = rng.random(B) < 0.5
    if flip.any():
        F, G = F.copy(), G.copy()
        for X in (F, G):
            X[flip, :, 1] *= -1.0
        G[flip, :, 3] = -(G[flip, :, 3] - F[flip, :, 3])
        F[flip, :, 3] = np.mod(-F[flip, :, 3], math.pi)
        G[flip, :, 3] += F[flip, :, 3]
        F *= M[..., None]
        G *= M[..., None]
        A[flip, 4] *= -1.0
    return F, G, A, M


def train(records: Sequence[TransitionRecord], cfg: TrainConfig = TrainConfig(),
          n_max: int = N_MAX, workspace=(500.0, 400.0), init: Optional[MlpModel] = None,
          progress=None) -> Tuple[MlpModel, List[float]]:
    """Mini-batch Adam on masked MSE.  Returns the model and the per-epoch mean loss."""
    slots = n_max + 1
    P, A, Q, M = dataset_arrays(records, slots, workspace)
    if len(P) < cfg.batch_size:
        log.warning("dataset of %d records is smaller than one batch of %d", len(P), cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        model = MlpModel.initialize(n_max, seed=cfg.seed, workspace=workspace)
        model.pose_mean, model.pose_std, model.delta_scale = fit_normalization(
            *frame_pair(P, Q, A, M), M)
    else:
        model = MlpModel([W.copy() for W in init.weights], [b.copy() for b in init.biases],
                         init.pose_mean.copy(), init.pose_std.copy(), init.n_max, init.workspace,
                         delta_scale=init.delta_scale.copy())
    model.config = {**asdict(cfg), "n_records": len(P)}
    F0, G0 = frame_pair(P, Q, A, M)

    def design(F, G, A, M):
        X, Fn = _inputs(model, F, A, M)
        Y = ((G - F) / model.delta_scale) * M[..., None]
        return X, Y.reshape(len(F), -1), np.repeat(M, POSE_DIM, axis=1)

    X, Y_delta, Mflat = design(F0, G0, A, M)
    params = model.weights + model.biases
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    nW = len(model.weights)
    n = len(X)
    bs = cfg.batch_size
    losses = []
    for epoch in range(cfg.epochs):
        if cfg.augment and epoch > 0:
            X, Y_delta, Mflat = design(*symmetry_augment(F0, G0, A, M, rng))
        perm = rng.permutation(n)
        n_batches = max(1, math.ceil(n / bs))
        if n_batches * bs > n:
            # pad the last batch by wrapping around the shuffled order
            perm = np.concatenate([perm, perm[: n_batches * bs - n]])
        total = 0.0
        for b in range(n_batches):
            idx = perm[b * bs:(b + 1) * bs]
            out, acts = mlp_forward(model.weights, model.biases, X[idx])
            mask = Mflat[idx]
            count = max(1.0, mask.sum())
            diff = (out - Y_delta[idx]) * mask
            loss = float((diff ** 2).sum() / count)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch + 1}, batch {b}")
            gw, gb = mlp_backward(model.weights, acts, 2.0 * diff / count)
            opt.step(gw + gb)
            total += loss
        losses.append(total / n_batches)
        if progress is not None:
            progress(epoch + 1, losses[-1])
    model.weights, model.biases = params[:nW], params[nW:]
    return model, losses


# --- state-level prediction -----------------------------------------------------------

def slot_order(s: ClutterState) -> List[int]:
    """Target first, then the other objects in their stored order."""
    t = s.index_of(s.target_id)
    return [t] + [i for i in range(len(s.objects)) if i != t]


def state_poses(objs: Sequence[ObjectState], slots: int) -> Tuple[np.ndarray, np.ndarray]:
    if len(objs) > slots:
        raise TooManyObjects(f"{len(objs)} objects exceed {slots} slots")
    P = np.zeros((slots, POSE_DIM))
    M = np.zeros(slots)
    for k, o in enumerate(objs):
        P[k] = (o.x, o.y, o.z, o.theta)
        M[k] = 1.0
    return P, M


def decode(objs: Sequence[ObjectState], post: np.ndarray, rng: Optional[np.random.Generator],
           sigma_t: float, sigma_r: float) -> List[ObjectState]:
    """Turn predicted poses back into boxes; sizes come from the prior objects."""
    out = []
    for k, o in enumerate(objs):
        x, y, z, th = post[k]
        moved = math.hypot(x - o.x, y - o.y) >= MOVE_DEADBAND_XY or abs(z - o.z) >= MOVE_DEADBAND_Z
        if not moved:
            out.append(o)
            continue
        if rng is not None:
            if sigma_t > 0:
                x += rng.normal(0.0, sigma_t)
                y += rng.normal(0.0, sigma_t)
            if sigma_r > 0:
                th += rng.normal(0.0, sigma_r)
        out.append(o.moved(float(x), float(y), float(max(0.0, z)), float(th)))
    return out


def predict_many(model: MlpModel, s: ClutterState, actions: Sequence[Tuple],
                 rng: Optional[np.random.Generator] = None, sigma_t: float = 1.5,
                 sigma_r: float = 0.02) -> List[ClutterState]:
    """Batched prediction for several actions from one state.

    Each action is ``("slide", direction, distance, support_id)`` or
    ``("remove", object_id)``.
    """
    order = slot_order(s)
    base = [s.objects[i] for i in order]
    rows_P, rows_A, rows_M, objsets = [], [], [], []
    for a in actions:
        if a[0] == "remove":
            rid = a[1]
            objs = [o for o in base if o.id != rid]
            removed = next(o for o in base if o.id == rid)
            act = encode_removal(base[0], removed, model.workspace)
        else:
            _, direction, distance, support_id = a
            objs = base
            slot = None
            if support_id is not None:
                slot = next(k for k, o in enumerate(base) if o.id == support_id)
            act = encode_slide(base, direction, distance, slot, model.workspace)
        P, M = state_poses(objs, model.slots)
        rows_P.append(P.reshape(-1))
        rows_A.append(act)
        rows_M.append(M)
        objsets.append(objs)
    if not rows_P:
        return []
    post = forward(model, np.stack(rows_P), np.stack(rows_A), np.stack(rows_M))
    post = post.reshape(len(rows_P), model.slots, POSE_DIM)
    return [s.with_objects(decode(objs, post[k], rng, sigma_t, sigma_r))
            for k, objs in enumerate(objsets)]


def predict_transition(model: MlpModel, s: ClutterState, action: Tuple, noise_seed: Optional[int] = None,
                       sigma_t: float = 1.5, sigma_r: float = 0.02) -> ClutterState:
    rng = None if noise_seed is None else np.random.default_rng(noise_seed)
    return predict_many(model, s, [action], rng, sigma_t, sigma_r)[0]


def evaluate_center_error(model: MlpModel, records: Sequence[TransitionRecord]) -> float:
    """Mean planar center error (mm) over present objects.

    Uses the same still-object snapping as :func:`decode`, without noise.
    """
    P, A, Q, M = dataset_arrays(records, model.slots, model.workspace)
    pred = forward(model, P.reshape(len(P), -1), A, M).reshape(Q.shape)
    still = ((np.hypot(pred[..., 0] - P[..., 0], pred[..., 1] - P[..., 1]) < MOVE_DEADBAND_XY)
             & (np.abs(pred[..., 2] - P[..., 2]) < MOVE_DEADBAND_Z))
    pred[still] = P[still]
    err = np.hypot(pred[..., 0] - Q[..., 0], pred[..., 1] - Q[..., 1])
    return float((err * M).sum() / M.sum())
