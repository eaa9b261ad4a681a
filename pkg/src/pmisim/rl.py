"""
Advantage actor-critic machinery on numpy: a tanh MLP with a shared
trunk, independent categorical policy heads and a value head, n-step
returns, entropy-regularized policy-gradient updates with hand-written
reverse-mode gradients, finite-difference verification and JSON
checkpoints.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import ConfigDict, Field

from .errors import CheckpointError, DomainError, SchemaError, TrainingDivergedError
from .log import get_logger
from .model import RecordModel

logger = get_logger(__name__)

CHECKPOINT_FORMAT = 1


class A2cConfig(RecordModel):
    """Learner hyperparameters; defaults follow the common A2C defaults."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    n_steps: int = Field(default=5, ge=1)
    gamma: float = Field(default=0.99, gt=0.0, le=1.0)
    learning_rate: float = Field(default=7e-4, ge=0.0)
    vf_coef: float = Field(default=0.5, ge=0.0)
    ent_coef: float = Field(default=0.01, ge=0.0)
    max_grad_norm: float = Field(default=0.5, gt=0.0)
    optimizer: Literal["rmsprop", "sgd"] = "rmsprop"
    rms_alpha: float = Field(default=0.99, ge=0.0, lt=1.0)
    rms_eps: float = Field(default=1e-5, gt=0.0)
    normalize_advantage: bool = False


def logsumexp(z: np.ndarray) -> np.ndarray:
    peak = np.max(z, axis=-1, keepdims=True)
    return (peak + np.log(np.sum(np.exp(z - peak), axis=-1, keepdims=True)))[
        ..., 0
    ]


def log_softmax(z: np.ndarray) -> np.ndarray:
    return z - logsumexp(z)[..., None]


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from the categorical distribution of `logits`."""
    cdf = np.cumsum(softmax(np.asarray(logits, dtype=float)))
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def log_prob(logits: np.ndarray, action: int) -> float:
    logits = np.asarray(logits, dtype=float)
    return float(logits[action] - logsumexp(logits))


def entropy(logits: np.ndarray) -> float:
    logp = log_softmax(np.asarray(logits, dtype=float))
    return float(-np.sum(np.exp(logp) * logp))


@dataclass
class ForwardPass:
    logits: List[np.ndarray]  # one (B, n_k) array per head
    values: np.ndarray  # (B,)
    activations: List[np.ndarray]  # input then every hidden layer


class PolicyValueNet:
    """
    MLP with tanh hidden layers, categorical heads and a scalar value head.
    All parameters live in one flat vector; `views` exposes named
    weight/bias arrays that alias it.
    """

    def __init__(
        self,
        state_dim: int,
        hidden: Sequence[int],
        head_sizes: Sequence[int],
        rng: Optional[np.random.Generator] = None,
        zero_heads: bool = False,
    ):
        if any(n < 1 for n in head_sizes):
            raise DomainError(f"every head needs >= 1 category: {head_sizes}")
        self.state_dim = state_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.head_sizes = tuple(int(n) for n in head_sizes)

        self._shapes: List[Tuple[str, Tuple[int, ...]]] = []
        fan_in = state_dim
        for i, width in enumerate(self.hidden):
            self._shapes.append((f"trunk{i}.w", (width, fan_in)))
            self._shapes.append((f"trunk{i}.b", (width,)))
            fan_in = width
        for k, n in enumerate(self.head_sizes):
            self._shapes.append((f"head{k}.w", (n, fan_in)))
            self._shapes.append((f"head{k}.b", (n,)))
        self._shapes.append(("value.w", (1, fan_in)))
        self._shapes.append(("value.b", (1,)))

        self.params = np.zeros(sum(math.prod(s) for _, s in self._shapes))
        self.views = self.split(self.params)
        if rng is not None:
            self.initialize(rng, zero_heads)

    @property
    def size(self) -> int:
        return len(self.params)

    def split(self, flat: np.ndarray) -> Dict[str, np.ndarray]:
        out = {}
        offset = 0
        for name, shape in self._shapes:
            n = math.prod(shape)
            out[name] = flat[offset : offset + n].reshape(shape)
            offset += n
        return out

    def initialize(self, rng: np.random.Generator, zero_heads: bool = False):
        """
        Scaled uniform weights with variance gain^2 / fan_in: gain sqrt(2)
        in the trunk, 0.01 on policy heads and 1 on the value head.
        Biases start at zero.
        """
        self.params[:] = 0.0
        for name, shape in self._shapes:
            if name.endswith(".b"):
                continue
            if name.startswith("trunk"):
                gain = math.sqrt(2.0)
            elif name.startswith("head"):
                gain = 0.0 if zero_heads else 0.01
            else:
                gain = 0.0 if zero_heads else 1.0
            bound = gain * math.sqrt(3.0 / shape[1])
            self.views[name][...] = rng.uniform(-bound, bound, size=shape)

    def forward(self, states) -> ForwardPass:
        x = np.atleast_2d(np.asarray(states, dtype=float))
        if x.shape[-1] != self.state_dim:
            raise DomainError(
                f"state has {x.shape[-1]} components, expected {self.state_dim}"
            )
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite network input")
        activations = [x]
        h = x
        for i in range(len(self.hidden)):
            h = np.tanh(h @ self.views[f"trunk{i}.w"].T + self.views[f"trunk{i}.b"])
            activations.append(h)
        logits = [
            h @ self.views[f"head{k}.w"].T + self.views[f"head{k}.b"]
            for k in range(len(self.head_sizes))
        ]
        values = (h @ self.views["value.w"].T + self.views["value.b"])[:, 0]
        return ForwardPass(logits, values, activations)

    def backward(
        self,
        fp: ForwardPass,
        dlogits: Sequence[np.ndarray],
        dvalues: np.ndarray,
    ) -> np.ndarray:
        """Gradient of the loss w.r.t. the flat parameters, given output grads."""
        grad = np.zeros_like(self.params)
        g = self.split(grad)
        h = fp.activations[-1]
        dh = np.zeros_like(h)
        for k, dz in enumerate(dlogits):
            g[f"head{k}.w"][...] = dz.T @ h
            g[f"head{k}.b"][...] = dz.sum(axis=0)
            dh += dz @ self.views[f"head{k}.w"]
        dv = np.asarray(dvalues, dtype=float)[:, None]
        g["value.w"][...] = dv.T @ h
        g["value.b"][...] = dv.sum(axis=0)
        dh += dv @ self.views["value.w"]
        for i in reversed(range(len(self.hidden))):
            out = fp.activations[i + 1]
            dz = dh * (1.0 - out**2)
            g[f"trunk{i}.w"][...] = dz.T @ fp.activations[i]
            g[f"trunk{i}.b"][...] = dz.sum(axis=0)
            dh = dz @ self.views[f"trunk{i}.w"]
        return grad

    def copy(self) -> PolicyValueNet:
        twin = PolicyValueNet(self.state_dim, self.hidden, self.head_sizes)
        twin.params[:] = self.params
        return twin


@dataclass(frozen=True)
class TrajectoryStep:
    state: np.ndarray
    action: Tuple[int, ...]
    log_prob: float
    reward: float
    value: float
    done: bool


@dataclass
class Trajectory:
    steps: List[TrajectoryStep] = field(default_factory=list)

    def append(self, step: TrajectoryStep) -> None:
        if not math.isfinite(step.reward):
            raise DomainError(f"non-finite reward {step.reward}")
        if self.steps and len(step.action) != len(self.steps[0].action):
            raise DomainError("inconsistent action arity in trajectory")
        self.steps.append(step)

    def __len__(self) -> int:
        return len(self.steps)

    def close(self) -> None:
        """Marks the last recorded step as terminal."""
        if self.steps and not self.steps[-1].done:
            self.steps[-1] = replace(self.steps[-1], done=True)

    def clear(self) -> None:
        self.steps.clear()

    @property
    def rewards(self) -> List[float]:
        return [s.reward for s in self.steps]


def n_step_returns(
    rewards: Sequence[float],
    values: Sequence[float],
    dones: Sequence[bool],
    bootstrap_value: float,
    gamma: float,
    n_steps: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    R_t = sum_{i<n} gamma^i r_{t+i} + gamma^n V(s_{t+n}), cut at episode
    ends. `bootstrap_value` is V of the state following the last step.
    Returns (returns, advantages) with A_t = R_t - V(s_t).
    """
    count = len(rewards)
    if count == 0:
        raise DomainError("empty trajectory")
    n = n_steps or count
    next_values = list(values[1:]) + [bootstrap_value]
    returns = np.zeros(count)
    for t in range(count):
        acc = 0.0
        discount = 1.0
        for i in range(n):
            k = t + i
            acc += discount * rewards[k]
            discount *= gamma
            if dones[k]:
                break
            if i == n - 1 or k == count - 1:
                acc += discount * next_values[k]
                break
        returns[t] = acc
    return returns, returns - np.asarray(values, dtype=float)


@dataclass
class Batch:
    states: np.ndarray  # (B, state_dim)
    actions: np.ndarray  # (B, heads) int
    returns: np.ndarray  # (B,)
    advantages: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class LossTerms:
    policy: float
    value: float
    entropy: float
    total: float


def loss_and_grad(
    net: PolicyValueNet, batch: Batch, cfg: A2cConfig
) -> Tuple[LossTerms, np.ndarray]:
    """
    loss = -mean(A log pi(a|s)) + vf_coef mean((R - V)^2)
           - ent_coef mean(H(pi(.|s)))
    with the joint log-probability summed over independent heads and A
    held constant.
    """
    if len(batch) == 0:
        raise DomainError("empty batch")
    fp = net.forward(batch.states)
    size = len(batch)
    rows = np.arange(size)
    adv = np.asarray(batch.advantages, dtype=float)
    policy_loss = 0.0
    mean_entropy = 0.0
    dlogits = []
    for k, z in enumerate(fp.logits):
        logp = log_softmax(z)
        p = np.exp(logp)
        chosen = batch.actions[:, k]
        policy_loss -= float(np.mean(adv * logp[rows, chosen]))
        ent = -np.sum(p * logp, axis=1)
        mean_entropy += float(np.mean(ent))
        onehot = np.zeros_like(p)
        onehot[rows, chosen] = 1.0
        dz = -(adv[:, None] / size) * (onehot - p)
        dz += (cfg.ent_coef / size) * p * (logp + ent[:, None])
        dlogits.append(dz)
    err = fp.values - batch.returns
    value_loss = float(np.mean(err**2))
    dvalues = cfg.vf_coef * 2.0 * err / size
    total = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * mean_entropy
    grad = net.backward(fp, dlogits, dvalues)
    return LossTerms(policy_loss, value_loss, mean_entropy, total), grad


def loss_value(net: PolicyValueNet, batch: Batch, cfg: A2cConfig) -> float:
    return loss_and_grad(net, batch, cfg)[0].total


def clip_by_global_norm(
    grad: np.ndarray, max_norm: float
) -> Tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm), norm
    return grad, norm


@dataclass(frozen=True)
class GradientCheck:
    max_abs_error: float
    max_rel_error: float

    def passed(self, rel_tol: float = 1e-4) -> bool:
        return self.max_rel_error < rel_tol


def check_gradients(
    net: PolicyValueNet,
    batch: Batch,
    cfg: A2cConfig,
    eps: float = 1e-5,
    abs_floor: float = 1e-7,
) -> GradientCheck:
    """
    Compares analytic gradients to central differences for every
    parameter. Components whose absolute error is below `abs_floor` do not
    count towards the relative error.
    """
    _, analytic = loss_and_grad(net, batch, cfg)
    saved = net.params.copy()
    numeric = np.zeros_like(analytic)
    try:
        for i in range(net.size):
            net.params[i] = saved[i] + eps
            plus = loss_value(net, batch, cfg)
            net.params[i] = saved[i] - eps
            minus = loss_value(net, batch, cfg)
            net.params[i] = saved[i]
            numeric[i] = (plus - minus) / (2.0 * eps)
    finally:
        net.params[:] = saved
    abs_err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(abs_err > abs_floor, abs_err / scale, 0.0)
    return GradientCheck(float(abs_err.max()), float(rel.max()))


@dataclass(frozen=True)
class UpdateStats:
    losses: LossTerms
    grad_norm: float
    skipped: bool = False


class A2cLearner:
    """Applies clipped RMSprop (or SGD) steps to a PolicyValueNet."""

    def __init__(self, net: PolicyValueNet, cfg: A2cConfig):
        self.net = net
        self.cfg = cfg
        self._square_avg = np.zeros_like(net.params)
        self._nonfinite_streak = 0
        self.updates = 0

    def make_batch(self, trajectory: Trajectory, bootstrap_value: float) -> Batch:
        steps = trajectory.steps
        returns, advantages = n_step_returns(
            [s.reward for s in steps],
            [s.value for s in steps],
            [s.done for s in steps],
            bootstrap_value,
            self.cfg.gamma,
            self.cfg.n_steps,
        )
        if self.cfg.normalize_advantage and len(steps) > 1:
            advantages = (advantages - advantages.mean()) / (
                advantages.std() + 1e-8
            )
        return Batch(
            states=np.array([s.state for s in steps], dtype=float),
            actions=np.array([s.action for s in steps], dtype=int),
            returns=returns,
            advantages=advantages,
        )

    def update(self, batch: Batch) -> UpdateStats:
        losses, grad = loss_and_grad(self.net, batch, self.cfg)
        if not (math.isfinite(losses.total) and np.all(np.isfinite(grad))):
            self._nonfinite_streak += 1
            logger.warning(
                "Non-finite loss (%s), update skipped", losses.total
            )
            if self._nonfinite_streak >= 2:
                raise TrainingDivergedError(
                    "loss non-finite on two consecutive updates"
                )
            return UpdateStats(losses, float("nan"), skipped=True)
        self._nonfinite_streak = 0

        grad, norm = clip_by_global_norm(grad, self.cfg.max_grad_norm)
        lr = self.cfg.learning_rate
        if self.cfg.optimizer == "rmsprop":
            alpha = self.cfg.rms_alpha
            self._square_avg *= alpha
            self._square_avg += (1.0 - alpha) * grad**2
            self.net.params -= lr * grad / (
                np.sqrt(self._square_avg) + self.cfg.rms_eps
            )
        else:
            self.net.params -= lr * grad
        self.updates += 1
        return UpdateStats(losses, norm)


class Checkpoint(RecordModel):
    """Architecture header plus the flat parameter vector."""

    model_config = ConfigDict(extra="forbid")

    format_version: int = CHECKPOINT_FORMAT
    agent: str
    state_dim: int = Field(ge=1)
    hidden: List[int]
    head_sizes: List[int]
    params: List[float]

    @classmethod
    def from_net(cls, net: PolicyValueNet, agent: str) -> Checkpoint:
        return cls(
            agent=agent,
            state_dim=net.state_dim,
            hidden=list(net.hidden),
            head_sizes=list(net.head_sizes),
            params=[float(v) for v in net.params],
        )

    def check_architecture(
        self, state_dim: int, hidden: Sequence[int], head_sizes: Sequence[int]
    ) -> None:
        expected = (state_dim, list(hidden), list(head_sizes))
        found = (self.state_dim, self.hidden, self.head_sizes)
        if expected != found:
            raise CheckpointError(
                f"checkpoint architecture {found} does not match {expected}"
            )

    def to_net(self) -> PolicyValueNet:
        net = PolicyValueNet(self.state_dim, self.hidden, self.head_sizes)
        if len(self.params) != net.size:
            raise CheckpointError(
                f"checkpoint holds {len(self.params)} parameters, "
                f"architecture needs {net.size}"
            )
        net.params[:] = self.params
        return net

    def save(self, path: os.PathLike) -> None:
        self.to_json_file(path)

    @classmethod
    def load(cls, path: os.PathLike) -> Checkpoint:
        try:
            ckpt = cls.from_json_file(path)
        except (OSError, ValueError, SchemaError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        if ckpt.format_version != CHECKPOINT_FORMAT:
            raise CheckpointError(
                f"unsupported checkpoint format {ckpt.format_version}"
            )
        return ckpt
