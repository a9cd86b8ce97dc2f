"""Group-relative policy optimization and a toy policy trained with it.

Each prompt gets ``G`` sampled trajectories. Their returns are standardized
within the group, and the resulting advantage is shared by every token
(decision) of the trajectory inside a PPO-style clipped ratio objective.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .controller import RoundRecord, Trajectory
from .protocol import (AgentResponse, FinalAnswer, FrameRequest, SummaryState, option_labels,
                       parse_response, serialize_response)
from .reward import RewardWeights, score_trajectory
from .synth import EnvState, EnvTask, SyntheticEnv

log = logging.getLogger(__name__)

ADV_EPS = 1e-8
# Learning rate used for full-size vision-language models; the toy policy
# below has nine parameters and needs a far larger step.
REFERENCE_LEARNING_RATE = 1e-6


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    group_size: int = 8
    learning_rate: float = 0.02
    kl_coef: float = 0.001
    iterations: int = 200
    batch_tasks: int = 8
    inner_epochs: int = 2

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.learning_rate < 0 or self.kl_coef < 0:
            raise ValueError("learning_rate and kl_coef must be non-negative")
        if self.iterations < 0 or self.batch_tasks < 1 or self.inner_epochs < 1:
            raise ValueError("iterations >= 0, batch_tasks >= 1 and inner_epochs >= 1 required")


@dataclass
class TrajectoryGroup:
    """``G`` trajectories for one prompt: returns and per-token log-probabilities."""

    returns: Sequence[float]
    logp_new: Sequence[Sequence[float]]
    logp_old: Sequence[Sequence[float]]

    def __post_init__(self) -> None:
        G = len(self.returns)
        if G < 2:
            raise ValueError("a group needs at least two trajectories")
        if len(self.logp_new) != G or len(self.logp_old) != G:
            raise ValueError("returns and log-probability lists differ in length")
        for i, (a, b) in enumerate(zip(self.logp_new, self.logp_old)):
            if len(a) != len(b):
                raise ValueError(f"trajectory {i}: new/old token counts differ ({len(a)} vs {len(b)})")
            if len(a) == 0:
                raise ValueError(f"trajectory {i} has no tokens")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ValueError(f"trajectory {i} has non-finite log-probabilities")

    @property
    def size(self) -> int:
        return len(self.returns)


def group_advantages(returns: Sequence[float]) -> np.ndarray:
    r = np.asarray(returns, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two returns to standardize")
    centred = r - r.mean()
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return centred / (r.std() + ADV_EPS)


def grpo_objective(group: TrajectoryGroup, advantages: Sequence[float], epsilon: float) -> float:
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.shape != (group.size,):
        raise ValueError("one advantage per trajectory required")
    total = 0.0
    for a, new, old in zip(adv, group.logp_new, group.logp_old):
        rho = np.exp(np.asarray(new, dtype=np.float64) - np.asarray(old, dtype=np.float64))
        total += np.mean(np.minimum(rho * a, np.clip(rho, 1 - epsilon, 1 + epsilon) * a))
    return float(total / group.size)


# -- toy policy ----------------------------------------------------------------------

FEATURES = ("req_bias", "req_cue", "req_visited", "req_f", "req_t",
            "ans_bias", "ans_belief", "ans_f", "ans_t")
CHECKPOINT_HEADER = "# sparsevid toy-policy v1"


@dataclass
class ToyPolicy:
    """Log-linear softmax policy over "request bin b" and "answer option j"."""

    theta: np.ndarray = field(default_factory=lambda: ToyPolicy.initial_theta())

    @staticmethod
    def initial_theta() -> np.ndarray:
        # Starts out answering with its best guess but asking for frames too often.
        theta = np.zeros(len(FEATURES))
        theta[FEATURES.index("req_bias")] = 1.5
        theta[FEATURES.index("ans_belief")] = 2.0
        return theta

    def logp(self, phi: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Log-probabilities for one state ``(A, D)`` or a stack ``(S, A, D)``."""
        if phi.ndim == 2:
            return kernels.policy_logp(phi[None], mask[None], self.theta)[0]
        return kernels.policy_logp(phi, mask, self.theta)

    def probs(self, phi: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return np.where(mask, np.exp(self.logp(phi, mask)), 0.0)

    def save(self, path: str | Path) -> None:
        lines = [CHECKPOINT_HEADER] + [f"{n}={v!r}" for n, v in zip(FEATURES, self.theta.tolist())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ToyPolicy":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != CHECKPOINT_HEADER:
            raise ValueError(f"{path}: not a toy-policy checkpoint")
        values = dict(line.split("=", 1) for line in lines[1:] if line)
        return cls(np.array([float(values[n]) for n in FEATURES]))


def state_features(env: SyntheticEnv, et: EnvTask, state: EnvState) -> tuple[np.ndarray, np.ndarray]:
    """Feature tensor ``(actions, features)`` and the mask of allowed actions."""
    c = env.config
    n_opt = len(et.task.options)
    phi = np.zeros((c.n_bins + n_opt, len(FEATURES)))
    mask = np.zeros(c.n_bins + n_opt, dtype=np.uint8)
    f = state.f(et.task)
    tt = state.t / c.max_rounds
    can_request = state.t < c.max_rounds
    for b in range(c.n_bins):
        phi[b, :5] = (1.0, float(env.cue_visible(et, state, b)), float(b in state.visited), f, tt)
        mask[b] = can_request and bool(env.request_frames(et, state, b))
    belief = env.scores(et, state).logprobs
    for j, lab in enumerate(option_labels(et.task.options)):
        phi[c.n_bins + j, 5:] = (1.0, belief[lab], f, tt)
        mask[c.n_bins + j] = 1
    return phi, mask


@dataclass
class ToyEpisode:
    phi: np.ndarray       # (N, A, D)
    mask: np.ndarray      # (N, A)
    actions: np.ndarray   # (N,)
    old_logp: np.ndarray  # (N, A) under the sampling policy
    trajectory: Trajectory
    episode_return: float = 0.0

    @property
    def n_tokens(self) -> int:
        return len(self.actions)


def _summary(et: EnvTask, state: EnvState, env: SyntheticEnv) -> SummaryState:
    clues = [i for i in state.seen if et.task.is_evidence(i)]
    cues = [str(b) for b in range(env.config.n_bins) if env.cue_visible(et, state, b)]
    return SummaryState(
        "frames " + ",".join(map(str, sorted(state.seen))),
        ("clues at " + ",".join(map(str, clues))) if clues else "no clues yet",
        f"{len(clues)}/{et.task.k} clue frames located",
        ("cue in bin " + ",".join(cues)) if cues else "no cue seen",
        "bins visited " + (",".join(map(str, state.visited)) or "none"),
    )


def rollout(env: SyntheticEnv, et: EnvTask, policy: ToyPolicy, rng: np.random.Generator,
            weights: RewardWeights | None = None) -> ToyEpisode:
    """Play one episode and score it with the episode reward."""
    c = env.config
    options = et.task.options
    labels = option_labels(options)
    traj = Trajectory(et.task.id, et.task.question, options, c.max_rounds, et.task.correct)
    state = env.reset(et)
    phis, masks, acts, olds = [], [], [], []
    while True:
        phi, mask = state_features(env, et, state)
        logp = policy.logp(phi, mask)
        p = np.where(mask, np.exp(logp), 0.0)
        a = int(rng.choice(len(p), p=p / p.sum()))
        phis.append(phi)
        masks.append(mask)
        acts.append(a)
        olds.append(logp)
        scores = env.scores(et, state)
        if a < c.n_bins:
            action: FrameRequest | FinalAnswer = FrameRequest(env.request_frames(et, state, a))
        else:
            action = FinalAnswer(labels[a - c.n_bins])
        raw = serialize_response(AgentResponse(_summary(et, state, env), action))
        traj.rounds.append(RoundRecord(state.t, "round", "", state.shown,
                                       tuple(i / c.fps for i in state.shown), raw,
                                       parse_response(raw, options), 0, 0, scores))
        if isinstance(action, FinalAnswer):
            traj.tau = state.t
            traj.final_answer = action.label
            traj.summary_scores = scores
            break
        state = env.step_request(et, state, a)
    traj.admitted_frames = state.seen
    traj.reward = score_trajectory(traj, None, weights)
    return ToyEpisode(np.stack(phis), np.stack(masks), np.array(acts, dtype=np.int64),
                      np.stack(olds), traj, traj.reward.episode_return)


@dataclass
class ToyBatch:
    """Decisions of several groups stacked for the gradient kernel."""

    phi: np.ndarray
    mask: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    adv: np.ndarray     # per decision: its trajectory's advantage
    weight: np.ndarray  # per decision: 1 / (groups * G * N_i)


def build_batch(groups: Sequence[Sequence[ToyEpisode]]) -> ToyBatch:
    phi, mask, act, old, adv, w = [], [], [], [], [], []
    n_groups = len(groups)
    for eps in groups:
        A = group_advantages([e.episode_return for e in eps])
        for e, a in zip(eps, A):
            n = e.n_tokens
            phi.append(e.phi)
            mask.append(e.mask)
            act.append(e.actions)
            old.append(e.old_logp)
            adv.append(np.full(n, a))
            w.append(np.full(n, 1.0 / (n_groups * len(eps) * n)))
    return ToyBatch(np.concatenate(phi), np.concatenate(mask), np.concatenate(act),
                    np.concatenate(old), np.concatenate(adv), np.concatenate(w))


def toy_objective(theta: np.ndarray, batch: ToyBatch, config: GrpoConfig) -> float:
    """Clipped objective minus ``kl_coef`` times KL(old || theta), averaged like the tokens."""
    obj, kl, _ = kernels.surrogate_grad(batch.phi, batch.mask, batch.actions, theta,
                                        batch.old_logp, batch.adv, batch.weight,
                                        config.epsilon, config.kl_coef)
    return obj - config.kl_coef * kl


def toy_policy_gradient(policy: ToyPolicy, batch: ToyBatch, config: GrpoConfig) -> np.ndarray:
    _, _, grad = kernels.surrogate_grad(batch.phi, batch.mask, batch.actions, policy.theta,
                                        batch.old_logp, batch.adv, batch.weight,
                                        config.epsilon, config.kl_coef)
    return np.asarray(grad)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: np.ndarray | None = None
    _v: np.ndarray | None = None
    _t: int = 0

    def ascend(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(theta)
            self._v = np.zeros_like(theta)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad * grad
        m_hat = self._m / (1 - self.beta1 ** self._t)
        v_hat = self._v / (1 - self.beta2 ** self._t)
        return theta + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


CURVE_FIELDS = ("iteration", "mean_return", "mean_tau", "mean_frames", "accuracy")


@dataclass
class TrainResult:
    curve: list[dict[str, float]]
    policy: ToyPolicy
    seconds: float

    def write_curve(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
            w.writeheader()
            w.writerows(self.curve)


def train_toy(env: SyntheticEnv | None = None, config: GrpoConfig | None = None,
              weights: RewardWeights | None = None, seed: int = 0,
              policy: ToyPolicy | None = None,
              on_iteration: Callable[[dict[str, float]], None] | None = None) -> TrainResult:
    """Sample groups, score them, standardize returns, take clipped-objective steps.

    Row ``i`` of the curve describes the rollouts drawn by the policy before
    update ``i``; a final row evaluates the trained policy.
    """
    env = env or SyntheticEnv()
    cfg = config or GrpoConfig()
    weights = weights or RewardWeights()
    policy = ToyPolicy(policy.theta.copy()) if policy else ToyPolicy()
    rng = np.random.default_rng(seed)
    opt = Adam(cfg.learning_rate)
    curve: list[dict[str, float]] = []
    t0 = time.perf_counter()

    def sample_groups() -> list[list[ToyEpisode]]:
        seeds = rng.integers(0, 2**31 - 1, size=cfg.batch_tasks)
        out = []
        for s in seeds:
            et = env.sample_task(int(s))
            out.append([rollout(env, et, policy, rng, weights) for _ in range(cfg.group_size)])
        return out

    def summarize(it: int, groups: list[list[ToyEpisode]]) -> dict[str, float]:
        eps = [e for g in groups for e in g]
        row = {
            "iteration": it,
            "mean_return": float(np.mean([e.episode_return for e in eps])),
            "mean_tau": float(np.mean([e.trajectory.tau for e in eps])),
            "mean_frames": float(np.mean([e.trajectory.frames_used for e in eps])),
            "accuracy": float(np.mean([bool(e.trajectory.correct) for e in eps])),
        }
        curve.append(row)
        if on_iteration:
            on_iteration(row)
        return row

    for it in range(cfg.iterations):
        groups = sample_groups()
        summarize(it, groups)
        batch = build_batch(groups)
        for _ in range(cfg.inner_epochs):
            grad = toy_policy_gradient(policy, batch, cfg)
            policy.theta = opt.ascend(policy.theta, grad)
        if not np.all(np.isfinite(policy.theta)):
            raise TrainingDiverged(f"non-finite parameters after iteration {it}: "
                                   f"{dict(zip(FEATURES, policy.theta.tolist()))}, last grad {grad}")
    summarize(cfg.iterations, sample_groups())
    return TrainResult(curve, policy, time.perf_counter() - t0)


def smoothed(values: Sequence[float], window: int) -> list[float]:
    """Means of consecutive non-overlapping windows (a trailing partial window is dropped)."""
    n = len(values) // window
    return [float(np.mean(values[i * window:(i + 1) * window])) for i in range(n)]


__all__ = [
    "GrpoConfig", "TrajectoryGroup", "group_advantages", "grpo_objective", "ToyPolicy",
    "FEATURES", "state_features", "rollout", "ToyEpisode", "ToyBatch", "build_batch",
    "toy_objective", "toy_policy_gradient", "train_toy", "TrainResult", "TrainingDiverged",
    "Adam", "smoothed", "REFERENCE_LEARNING_RATE",
]
