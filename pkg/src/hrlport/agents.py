"""
Two-level decision stack over the trading environment.

The auxiliary policy proposes baseline portfolio weights from the return
window; its reward pulls a mean/variance/turnover score toward the value
attained by the closed-form mean-variance optimum.  The executive policy
applies a bounded residual to the baseline and is trained with DDPG
(critic + target networks) on the floored risk-adjusted return reward.

State flattening order everywhere: [weights || window tensors in
chronological order, row-major].  Checkpoint bundles refuse to load under
a different configuration fingerprint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .market_data import MomentEstimates, ReturnWindow
from .neural import (
    DenseNetwork,
    GradientRecord,
    build_network,
    network_from_bytes,
    network_manifest,
    network_to_bytes,
)

REPLAY_CAPACITY = 2 ** 14

# Output heads start near zero (the usual deterministic actor-critic
# practice) so initial values and residuals are flat rather than random.
HEAD_INIT_BOUND = 3e-3


class AgentError(ValueError):
    """Raised on dimension mismatches or irrecoverable numerics."""


@dataclass(frozen=True)
class AgentConfig:
    """State window, reward shaping and action parameterization."""

    window_periods: int = 40            # periods in the observation tensor
    target_risk_aversion: float = 50.0  # risk aversion of the closed-form target
    weight_bound: float = 1.0           # per-asset cap on baseline weights
    residual_bound: float = 0.5         # per-asset cap on the executive residual
    hidden: tuple[int, ...] = (128, 128)
    noise_scale: float = 0.1            # exploration stddev at the start
    noise_final: float = 0.01           # linearly decayed to this by the end
    noise_process: str = "gaussian"     # gaussian | ou
    sigma_timing: str = "realized"      # covariance used in rewards: realized | decision

    def __post_init__(self):
        if self.window_periods < 1:
            raise AgentError("window_periods must be positive")
        if self.target_risk_aversion <= 0:
            raise AgentError("target_risk_aversion must be positive")
        if self.weight_bound <= 0 or self.residual_bound <= 0:
            raise AgentError("action bounds must be positive")
        if self.noise_process not in ("gaussian", "ou"):
            raise AgentError(f"unknown noise_process {self.noise_process!r}")
        if self.sigma_timing not in ("realized", "decision"):
            raise AgentError(f"unknown sigma_timing {self.sigma_timing!r}")


def state_dim(n_assets: int, window_periods: int, days_per_period: int) -> int:
    """Flattened [weights || window] length."""
    return n_assets + window_periods * days_per_period * n_assets


@dataclass(frozen=True)
class AuxState:
    """Auxiliary observation: its own previous weights plus the window."""

    prev_weights: np.ndarray
    window: ReturnWindow

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.prev_weights, self.window.to_vector()])


@dataclass(frozen=True)
class ExecState:
    """Executive observation: the fresh baseline weights plus the window."""

    baseline_weights: np.ndarray
    window: ReturnWindow

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.baseline_weights, self.window.to_vector()])


@dataclass(frozen=True)
class Transition:
    """One replay entry.  Auxiliary tuples carry no reward; their reward is
    recomputed at update time from the cached moments, so those are stored
    alongside the flattened states."""

    level: str                          # auxiliary | executive
    state: np.ndarray                   # flattened
    action: np.ndarray
    next_state: np.ndarray
    reward: float | None = None
    mean: np.ndarray | None = None      # auxiliary only
    covariance: np.ndarray | None = None  # auxiliary only

    def __post_init__(self):
        if self.level == "auxiliary":
            if self.reward is not None:
                raise AgentError("auxiliary transitions carry no reward")
            if self.mean is None or self.covariance is None:
                raise AgentError("auxiliary transitions must cache moments")
        elif self.level == "executive":
            if self.reward is None:
                raise AgentError("executive transitions carry exactly one reward")
        else:
            raise AgentError(f"unknown transition level {self.level!r}")


class ReplayBuffer:
    """Fixed-capacity ring with uniform without-replacement minibatches."""

    def __init__(self, capacity: int = REPLAY_CAPACITY):
        if capacity < 1:
            raise AgentError("capacity must be positive")
        self.capacity = capacity
        self._ring: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._ring)

    def add(self, transition: Transition) -> None:
        if len(self._ring) < self.capacity:
            self._ring.append(transition)
        else:
            self._ring[self._cursor] = transition
        self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if batch_size < 1 or batch_size > len(self._ring):
            raise AgentError(f"cannot sample {batch_size} of {len(self._ring)}")
        picks = rng.choice(len(self._ring), size=batch_size, replace=False)
        return [self._ring[i] for i in picks]


# ---------------------------------------------------------------------------
# Reward shaping
# ---------------------------------------------------------------------------

def evaluation_score(weights: np.ndarray, mean: np.ndarray, covariance: np.ndarray,
                     prev_weights: np.ndarray, risk_penalty: float,
                     turnover_penalty: float) -> float:
    """Differentiable stand-in for the trading objective:
    w'mu - l1 * w'Sigma w - l2 * sum|w - w_prev|."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != mean.shape or w.shape != prev_weights.shape:
        raise AgentError("weight/moment dimensions disagree")
    if covariance.shape != (w.size, w.size):
        raise AgentError("covariance dimension disagrees with weights")
    return float(w @ mean - risk_penalty * (w @ covariance @ w)
                 - turnover_penalty * np.abs(w - prev_weights).sum())


def evaluation_score_gradient(weights: np.ndarray, mean: np.ndarray,
                              covariance: np.ndarray, prev_weights: np.ndarray,
                              risk_penalty: float, turnover_penalty: float) -> np.ndarray:
    """d(score)/dw; the turnover term uses sign with sign(0) = 0."""
    w = np.asarray(weights, dtype=np.float64)
    return (mean - 2.0 * risk_penalty * (covariance @ w)
            - turnover_penalty * np.sign(w - prev_weights))


def markowitz_optimal(mean: np.ndarray, covariance: np.ndarray,
                      risk_aversion: float) -> np.ndarray:
    """Unconstrained mean-variance maximizer (1 / 2*lambda) Sigma^-1 mu.

    The covariance is ridge-regularized by 1e-8 * mean(diag) before the
    solve; a matrix still singular after that is an error.
    """
    if risk_aversion <= 0:
        raise AgentError("risk_aversion must be positive")
    mu = np.asarray(mean, dtype=np.float64)
    n = mu.size
    if covariance.shape != (n, n):
        raise AgentError("covariance dimension disagrees with mean")
    ridge = 1e-8 * float(np.mean(np.diag(covariance)))
    regularized = covariance + ridge * np.eye(n)
    try:
        solution = np.linalg.solve(regularized, mu)
    except np.linalg.LinAlgError as exc:
        raise AgentError(f"covariance singular after regularization: {exc}") from exc
    if not np.all(np.isfinite(solution)):
        raise AgentError("covariance solve produced non-finite weights")
    return solution / (2.0 * risk_aversion)


def target_value(mean: np.ndarray, covariance: np.ndarray, prev_weights: np.ndarray,
                 risk_penalty: float, turnover_penalty: float,
                 risk_aversion: float) -> float:
    """Score attained by the closed-form optimum: the auxiliary target."""
    optimum = markowitz_optimal(mean, covariance, risk_aversion)
    return evaluation_score(optimum, mean, covariance, prev_weights,
                            risk_penalty, turnover_penalty)


def aux_reward(action: np.ndarray, prev_weights: np.ndarray,
               moments: MomentEstimates, risk_penalty: float,
               turnover_penalty: float, risk_aversion: float) -> float:
    """Negated squared gap between the action's score and the target value."""
    gamma_t = target_value(moments.mean, moments.covariance, prev_weights,
                           risk_penalty, turnover_penalty, risk_aversion)
    score = evaluation_score(action, moments.mean, moments.covariance,
                             prev_weights, risk_penalty, turnover_penalty)
    return -((gamma_t - score) ** 2)


# ---------------------------------------------------------------------------
# Policies and critic
# ---------------------------------------------------------------------------

class AuxiliaryPolicy:
    """Deterministic baseline-weight policy, tanh-bounded per asset."""

    def __init__(self, net: DenseNetwork, weight_bound: float):
        self.net = net
        self.weight_bound = weight_bound

    @classmethod
    def create(cls, n_assets: int, window_periods: int, days_per_period: int,
               hidden: Sequence[int], rng: np.random.Generator,
               weight_bound: float = 1.0,
               head_init_bound: float = HEAD_INIT_BOUND) -> "AuxiliaryPolicy":
        net = build_network(state_dim(n_assets, window_periods, days_per_period),
                            hidden, n_assets, rng, output_activation="tanh",
                            output_init_bound=head_init_bound)
        return cls(net, weight_bound)

    def act(self, state: AuxState) -> np.ndarray:
        return self.act_batch(state.to_vector()[None, :])[0]

    def act_batch(self, states: np.ndarray) -> np.ndarray:
        """Batch action; retains intermediates for backward_batch."""
        return self.weight_bound * self.net.forward(states)

    def backward_batch(self, upstream_weights: np.ndarray) -> GradientRecord:
        """Gradients through the bound for an upstream d(loss)/d(action)."""
        return self.net.backward(self.weight_bound * upstream_weights)


class ExecutivePolicy:
    """Residual policy: executed weights = baseline + bounded correction."""

    def __init__(self, net: DenseNetwork, residual_bound: float):
        self.net = net
        self.residual_bound = residual_bound

    @classmethod
    def create(cls, n_assets: int, window_periods: int, days_per_period: int,
               hidden: Sequence[int], rng: np.random.Generator,
               residual_bound: float = 0.5,
               head_init_bound: float = HEAD_INIT_BOUND) -> "ExecutivePolicy":
        net = build_network(state_dim(n_assets, window_periods, days_per_period),
                            hidden, n_assets, rng, output_activation="tanh",
                            output_init_bound=head_init_bound)
        return cls(net, residual_bound)

    @property
    def n_assets(self) -> int:
        return self.net.output_dim

    def act(self, state: ExecState, noise: np.ndarray | None = None) -> np.ndarray:
        action = self.act_batch(state.to_vector()[None, :])[0]
        return action if noise is None else action + noise

    def act_batch(self, states: np.ndarray) -> np.ndarray:
        """Baseline columns of the state plus the bounded residual."""
        residual = self.residual_bound * self.net.forward(states)
        return states[:, : self.n_assets] + residual

    def backward_batch(self, upstream_weights: np.ndarray) -> GradientRecord:
        return self.net.backward(self.residual_bound * upstream_weights)


class Critic:
    """Scalar action-value network over the flattened (state, action) pair."""

    def __init__(self, net: DenseNetwork):
        self.net = net

    @classmethod
    def create(cls, n_assets: int, window_periods: int, days_per_period: int,
               hidden: Sequence[int], rng: np.random.Generator,
               head_init_bound: float = HEAD_INIT_BOUND) -> "Critic":
        dim = state_dim(n_assets, window_periods, days_per_period) + n_assets
        return cls(build_network(dim, hidden, 1, rng,
                                 output_init_bound=head_init_bound))

    def value(self, state: np.ndarray | ExecState, action: np.ndarray) -> float:
        vec = state.to_vector() if isinstance(state, ExecState) else state
        return float(self.value_batch(vec[None, :], action[None, :])[0])

    def value_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        if states.shape[0] != actions.shape[0]:
            raise AgentError("state/action batch sizes differ")
        return self.net.forward(np.hstack([states, actions]))[:, 0]

    def backward_batch(self, upstream_values: np.ndarray) -> GradientRecord:
        return self.net.backward(upstream_values[:, None])


def make_noise_process(cfg: AgentConfig, n_assets: int, rng: np.random.Generator):
    if cfg.noise_process == "ou":
        return OrnsteinUhlenbeckNoise(n_assets, rng)
    return GaussianNoise(n_assets, rng)


class GaussianNoise:
    """Uncorrelated exploration noise."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng

    def sample(self, scale: float) -> np.ndarray:
        return self.rng.normal(0.0, scale, size=self.n)

    def reset(self) -> None:
        pass


class OrnsteinUhlenbeckNoise:
    """Temporally correlated exploration noise (optional alternative)."""

    def __init__(self, n: int, rng: np.random.Generator, theta: float = 0.15):
        self.n = n
        self.rng = rng
        self.theta = theta
        self.state = np.zeros(n)

    def sample(self, scale: float) -> np.ndarray:
        self.state += (-self.theta * self.state
                       + self.rng.normal(0.0, scale, size=self.n))
        return self.state.copy()

    def reset(self) -> None:
        self.state = np.zeros(self.n)


# ---------------------------------------------------------------------------
# Training objectives (values and exact parameter gradients)
# ---------------------------------------------------------------------------

def stack_executive(batch: Sequence[Transition]):
    if not batch:
        raise AgentError("empty batch")
    if any(t.level != "executive" for t in batch):
        raise AgentError("expected executive transitions")
    states = np.stack([t.state for t in batch])
    actions = np.stack([t.action for t in batch])
    rewards = np.array([t.reward for t in batch])
    next_states = np.stack([t.next_state for t in batch])
    return states, actions, rewards, next_states


def bellman_targets(batch: Sequence[Transition], target_critic: Critic,
                    target_actor: ExecutivePolicy, discount: float) -> np.ndarray:
    _, _, rewards, next_states = stack_executive(batch)
    next_actions = target_actor.act_batch(next_states)
    return rewards + discount * target_critic.value_batch(next_states, next_actions)


def critic_loss(batch: Sequence[Transition], online_critic: Critic,
                target_critic: Critic, target_actor: ExecutivePolicy,
                discount: float) -> float:
    """Mean squared one-step Bellman residual under the target networks."""
    states, actions, _, _ = stack_executive(batch)
    targets = bellman_targets(batch, target_critic, target_actor, discount)
    residuals = online_critic.value_batch(states, actions) - targets
    return float(np.mean(residuals ** 2))


def critic_loss_gradients(batch: Sequence[Transition], online_critic: Critic,
                          target_critic: Critic, target_actor: ExecutivePolicy,
                          discount: float) -> tuple[float, GradientRecord]:
    """Loss plus its exact gradient w.r.t. the online critic parameters."""
    states, actions, _, _ = stack_executive(batch)
    targets = bellman_targets(batch, target_critic, target_actor, discount)
    residuals = online_critic.value_batch(states, actions) - targets
    loss = float(np.mean(residuals ** 2))
    grads = online_critic.backward_batch(2.0 * residuals / len(batch))
    return loss, grads


def actor_objective(batch: Sequence[Transition], critic: Critic,
                    actor: ExecutivePolicy) -> float:
    """Mean critic value of the actor's own actions (to be ascended)."""
    states, _, _, _ = stack_executive(batch)
    actions = actor.act_batch(states)
    return float(np.mean(critic.value_batch(states, actions)))


def actor_objective_gradients(batch: Sequence[Transition], critic: Critic,
                              actor: ExecutivePolicy) -> tuple[float, GradientRecord]:
    """Objective plus its gradient w.r.t. the actor, chained through the critic."""
    states, _, _, _ = stack_executive(batch)
    actions = actor.act_batch(states)
    values = critic.value_batch(states, actions)
    objective = float(np.mean(values))
    critic_record = critic.backward_batch(np.full(len(batch), 1.0 / len(batch)))
    d_action = critic_record.wrt_input[:, states.shape[1]:]
    return objective, actor.backward_batch(d_action)


def aux_objective(batch: Sequence[Transition], policy: AuxiliaryPolicy,
                  risk_penalty: float, turnover_penalty: float,
                  risk_aversion: float) -> float:
    """Mean recomputed reward of the policy's own actions on stored states."""
    value, _ = aux_objective_gradients(batch, policy, risk_penalty,
                                       turnover_penalty, risk_aversion)
    return value


def aux_objective_gradients(batch: Sequence[Transition], policy: AuxiliaryPolicy,
                            risk_penalty: float, turnover_penalty: float,
                            risk_aversion: float) -> tuple[float, GradientRecord]:
    if not batch:
        raise AgentError("empty batch")
    if any(t.level != "auxiliary" for t in batch):
        raise AgentError("expected auxiliary transitions")
    states = np.stack([t.state for t in batch])
    weights = policy.act_batch(states)
    n = weights.shape[1]
    size = len(batch)
    total = 0.0
    upstream = np.empty_like(weights)
    for i, transition in enumerate(batch):
        prev = transition.state[:n]
        gamma_t = target_value(transition.mean, transition.covariance, prev,
                               risk_penalty, turnover_penalty, risk_aversion)
        score = evaluation_score(weights[i], transition.mean,
                                 transition.covariance, prev,
                                 risk_penalty, turnover_penalty)
        total += -((gamma_t - score) ** 2)
        d_score = evaluation_score_gradient(weights[i], transition.mean,
                                            transition.covariance, prev,
                                            risk_penalty, turnover_penalty)
        upstream[i] = 2.0 * (gamma_t - score) * d_score / size
    return total / size, policy.backward_batch(upstream)


# ---------------------------------------------------------------------------
# Checkpoint bundles
# ---------------------------------------------------------------------------

BUNDLE_MANIFEST = "bundle.json"


def save_bundle(directory: str | Path, *, fingerprint: str,
                aux: AuxiliaryPolicy | None = None,
                executive: ExecutivePolicy | None = None,
                critic: Critic | None = None,
                target_actor: ExecutivePolicy | None = None,
                target_critic: Critic | None = None) -> None:
    """Write every present network plus the configuration fingerprint."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entry: dict = {"format_version": 1, "fingerprint": fingerprint, "networks": {}}
    named = {
        "aux": (aux, {"weight_bound": aux.weight_bound} if aux else None),
        "executive": (executive,
                      {"residual_bound": executive.residual_bound} if executive else None),
        "critic": (critic, {}),
        "target_actor": (target_actor,
                         {"residual_bound": target_actor.residual_bound}
                         if target_actor else None),
        "target_critic": (target_critic, {}),
    }
    for name, (wrapper, extra) in named.items():
        if wrapper is None:
            continue
        net = wrapper.net
        (directory / f"{name}.bin").write_bytes(network_to_bytes(net))
        entry["networks"][name] = {"manifest": network_manifest(net), **(extra or {})}
    (directory / BUNDLE_MANIFEST).write_text(json.dumps(entry, indent=2) + "\n",
                                             encoding="utf-8")


def load_bundle(directory: str | Path, expected_fingerprint: str | None = None) -> dict:
    """Load the saved networks; refuse when the fingerprint does not match."""
    directory = Path(directory)
    path = directory / BUNDLE_MANIFEST
    if not path.exists():
        raise AgentError(f"no checkpoint bundle at {directory}")
    entry = json.loads(path.read_text(encoding="utf-8"))
    if expected_fingerprint is not None and entry["fingerprint"] != expected_fingerprint:
        raise AgentError(
            "checkpoint fingerprint mismatch: bundle was trained under "
            f"{entry['fingerprint'][:12]}..., current config is "
            f"{expected_fingerprint[:12]}...")
    loaded: dict = {"fingerprint": entry["fingerprint"]}
    for name, spec in entry["networks"].items():
        net = network_from_bytes(spec["manifest"],
                                 (directory / f"{name}.bin").read_bytes())
        if name == "aux":
            loaded[name] = AuxiliaryPolicy(net, spec["weight_bound"])
        elif name in ("executive", "target_actor"):
            loaded[name] = ExecutivePolicy(net, spec["residual_bound"])
        else:
            loaded[name] = Critic(net)
    return loaded
