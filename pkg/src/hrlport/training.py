"""
Two-phase training loop with in-sample tracking.

Phase 1 trains the auxiliary policy alone: collect observation tuples in
rounds, then ascend the mean recomputed reward over replay minibatches.
Phase 2 freezes the auxiliary policy and trains the executive
actor/critic pair with DDPG: noisy collection, then per minibatch one
critic descent, one target-critic soft update, one actor ascent and one
target-actor soft update.

After every collection-plus-update round a deterministic (noise-free)
tracking episode is rolled over the training horizon and summarized into
a TrackRecord row: cumulative log return (AR), amplified cumulative
variance (AV), cumulative reward (ARD), periods with non-negative return
(NP) and with non-negative reward (NPR), plus the round's mean training
objectives.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable

import numpy as np

from .agents import (
    AgentConfig,
    AuxiliaryPolicy,
    AuxState,
    Critic,
    ExecState,
    ExecutivePolicy,
    ReplayBuffer,
    Transition,
    actor_objective_gradients,
    aux_objective_gradients,
    aux_reward,
    critic_loss_gradients,
    make_noise_process,
)
from .neural import optimizer_step, soft_update
from .trading_env import BankruptcyError, TradingEnv


class TrainingError(RuntimeError):
    """Raised when a training run cannot continue (non-finite losses)."""


@dataclass(frozen=True)
class TrainConfig:
    """Step budget, minibatching and optimizer settings for both phases."""

    steps_per_round_aux: int = 1080
    steps_per_round_exec: int = 1080
    minibatch_aux: int = 128
    minibatch_exec: int = 128
    total_steps_aux: int = 300_000
    total_steps_exec: int = 600_000
    lr_aux: float = 1e-5
    lr_actor: float = 1e-6
    lr_critic: float = 1e-8
    discount: float = 0.99
    tau: float = 0.005
    buffer_capacity: int = 2 ** 14
    seed: int = 0

    def __post_init__(self):
        if min(self.steps_per_round_aux, self.steps_per_round_exec,
               self.minibatch_aux, self.minibatch_exec) < 1:
            raise TrainingError("round and minibatch sizes must be positive")
        if min(self.total_steps_aux, self.total_steps_exec) < 0:
            raise TrainingError("total step budgets must be non-negative")
        if max(self.minibatch_aux, self.minibatch_exec) > self.buffer_capacity:
            raise TrainingError("minibatch cannot exceed buffer capacity")
        if not 0.0 <= self.discount <= 1.0:
            raise TrainingError("discount must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise TrainingError("tau must lie in [0, 1]")


@dataclass(frozen=True)
class TrackEntry:
    step: int
    cum_log_return: float           # AR
    cum_variance: float             # AV (amplified by K * risk_penalty)
    cum_reward: float               # ARD
    periods_positive_return: int    # NP
    periods_positive_reward: int    # NPR
    actor_objective: float | None
    critic_loss: float | None
    truncated: bool = False


TRACK_HEADER = ("step", "AR", "AV", "ARD", "NP", "NPR", "actor_obj", "critic_loss")


@dataclass
class TrackRecord:
    entries: list[TrackEntry] = field(default_factory=list)

    def add(self, entry: TrackEntry) -> None:
        self.entries.append(entry)

    def write_csv(self, sink: IO[str] | str | Path) -> None:
        own = isinstance(sink, (str, Path))
        handle = open(sink, "w", newline="", encoding="utf-8") if own else sink
        try:
            writer = csv.writer(handle)
            writer.writerow(TRACK_HEADER)
            for e in self.entries:
                writer.writerow([
                    e.step, repr(e.cum_log_return), repr(e.cum_variance),
                    repr(e.cum_reward), e.periods_positive_return,
                    e.periods_positive_reward,
                    _cell(e.actor_objective), _cell(e.critic_loss),
                ])
        finally:
            if own:
                handle.close()


def _cell(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "undefined"
    return repr(value)


def tracking_pass(env: TradingEnv, aux: AuxiliaryPolicy,
                  executive: ExecutivePolicy | None,
                  target_risk_aversion: float | None = None) -> TrackEntry:
    """Roll one deterministic episode and accumulate the tracked indices.

    Exploration noise is off; with ``executive=None`` the auxiliary
    baseline trades directly and, when ``target_risk_aversion`` is given,
    the entry's ``actor_objective`` is the greedy mean auxiliary reward
    over the pass.  A bankruptcy truncates the pass and flags the entry.
    """
    env = env.clone()
    n = env.cfg.n_assets
    prev_aux = np.zeros(n)
    cum_variance = 0.0
    cum_reward = 0.0
    positive_return = 0
    positive_reward = 0
    aux_reward_sum = 0.0
    periods = 0
    truncated = False
    while not env.done:
        window = env.window()
        baseline = aux.act(AuxState(prev_aux, window))
        if target_risk_aversion is not None:
            aux_reward_sum += aux_reward(baseline, prev_aux,
                                         env.moments(timing="realized"),
                                         env.cfg.risk_penalty,
                                         env.cfg.turnover_penalty,
                                         target_risk_aversion)
        weights = (executive.act(ExecState(baseline, window))
                   if executive is not None else baseline)
        try:
            outcome = env.step(weights)
        except BankruptcyError:
            truncated = True
            break
        periods += 1
        cum_variance += outcome.variance
        cum_reward += outcome.reward
        if outcome.period_log_return >= 0.0:
            positive_return += 1
        if outcome.reward >= 0.0:
            positive_reward += 1
        prev_aux = baseline
    amplification = env.cfg.days_per_period * env.cfg.risk_penalty
    return TrackEntry(
        step=-1,
        cum_log_return=math.log2(env.state.total_assets / env.cfg.initial_capital),
        cum_variance=amplification * cum_variance,
        cum_reward=cum_reward,
        periods_positive_return=positive_return,
        periods_positive_reward=positive_reward,
        actor_objective=(aux_reward_sum / periods
                         if target_risk_aversion is not None and periods else None),
        critic_loss=None,
        truncated=truncated,
    )


def _stamped(entry: TrackEntry, step: int, actor_objective: float | None,
             critic_loss: float | None) -> TrackEntry:
    return TrackEntry(step, entry.cum_log_return, entry.cum_variance,
                      entry.cum_reward, entry.periods_positive_return,
                      entry.periods_positive_reward, actor_objective,
                      critic_loss, entry.truncated)


def train_auxiliary(env: TradingEnv, policy: AuxiliaryPolicy,
                    agent_cfg: AgentConfig, train_cfg: TrainConfig) -> TrackRecord:
    """Phase 1: collect observation rounds, ascend the recomputed reward.

    Collection never executes trades; the account plays no part in the
    auxiliary reward, which is recomputed at update time from the moments
    cached on each stored tuple.
    """
    rng = np.random.default_rng(np.random.SeedSequence(train_cfg.seed).spawn(1)[0])
    buffer = ReplayBuffer(train_cfg.buffer_capacity)
    record = TrackRecord()
    n = env.cfg.n_assets
    risk, turnover = env.cfg.risk_penalty, env.cfg.turnover_penalty
    aversion = agent_cfg.target_risk_aversion

    env.reset()
    prev_w = np.zeros(n)
    steps = 0
    running = train_cfg.total_steps_aux > 0
    while running:
        for _ in range(train_cfg.steps_per_round_aux):
            window = env.window()
            state = AuxState(prev_w, window)
            action = policy.act(state)
            moments = env.moments(timing="realized")
            env.advance()
            next_state = AuxState(action, env.window(env.t))
            buffer.add(Transition("auxiliary", state.to_vector(), action,
                                  next_state.to_vector(), mean=moments.mean,
                                  covariance=moments.covariance))
            prev_w = action
            if env.done:
                env.reset()
                prev_w = np.zeros(n)

        for _ in range(len(buffer) // train_cfg.minibatch_aux):
            batch = buffer.sample(train_cfg.minibatch_aux, rng)
            value, grads = aux_objective_gradients(batch, policy, risk,
                                                   turnover, aversion)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite auxiliary objective {value!r} "
                                    f"at step {steps}")
            optimizer_step(policy.net, grads, train_cfg.lr_aux, "ascend")

        steps += train_cfg.steps_per_round_aux
        entry = tracking_pass(env, policy, None, aversion)
        record.add(_stamped(entry, steps, entry.actor_objective, None))
        if steps > train_cfg.total_steps_aux:
            running = False
    return record


@dataclass
class ExecutiveTrainResult:
    executive: ExecutivePolicy
    critic: Critic
    target_actor: ExecutivePolicy
    target_critic: Critic
    record: TrackRecord


def train_executive(env: TradingEnv, aux: AuxiliaryPolicy,
                    executive: ExecutivePolicy, critic: Critic,
                    agent_cfg: AgentConfig, train_cfg: TrainConfig
                    ) -> ExecutiveTrainResult:
    """Phase 2: DDPG on the executive level with the auxiliary frozen.

    Target networks start as copies of the online ones.  A bankruptcy
    during noisy collection resets the episode and the round continues.
    """
    seq = np.random.SeedSequence(train_cfg.seed).spawn(3)
    sample_rng = np.random.default_rng(seq[1])
    noise = make_noise_process(agent_cfg, env.cfg.n_assets,
                               np.random.default_rng(seq[2]))
    buffer = ReplayBuffer(train_cfg.buffer_capacity)
    record = TrackRecord()
    n = env.cfg.n_assets

    target_actor = ExecutivePolicy(executive.net.copy(), executive.residual_bound)
    target_critic = Critic(critic.net.copy())

    def noise_scale(step: int) -> float:
        if train_cfg.total_steps_exec <= 0:
            return agent_cfg.noise_final
        frac = min(step / train_cfg.total_steps_exec, 1.0)
        return agent_cfg.noise_scale + frac * (agent_cfg.noise_final
                                               - agent_cfg.noise_scale)

    def fresh_states() -> tuple[np.ndarray, ExecState]:
        window = env.window()
        baseline = aux.act(AuxState(np.zeros(n), window))
        return baseline, ExecState(baseline, window)

    env.reset()
    noise.reset()
    prev_aux, exec_state = fresh_states()
    steps = 0
    running = train_cfg.total_steps_exec > 0
    while running:
        for inner in range(train_cfg.steps_per_round_exec):
            action = executive.act(exec_state,
                                   noise.sample(noise_scale(steps + inner)))
            try:
                outcome = env.step(action)
            except BankruptcyError:
                env.reset()
                noise.reset()
                prev_aux, exec_state = fresh_states()
                continue
            window = env.window(env.t)
            baseline = aux.act(AuxState(prev_aux, window))
            next_state = ExecState(baseline, window)
            buffer.add(Transition("executive", exec_state.to_vector(), action,
                                  next_state.to_vector(), reward=outcome.reward))
            prev_aux, exec_state = baseline, next_state
            if env.done:
                env.reset()
                noise.reset()
                prev_aux, exec_state = fresh_states()

        loss_sum = objective_sum = 0.0
        updates = 0
        for _ in range(len(buffer) // train_cfg.minibatch_exec):
            batch = buffer.sample(train_cfg.minibatch_exec, sample_rng)
            loss, critic_grads = critic_loss_gradients(
                batch, critic, target_critic, target_actor, train_cfg.discount)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite critic loss {loss!r} at step {steps}")
            optimizer_step(critic.net, critic_grads, train_cfg.lr_critic, "descend")
            soft_update(target_critic.net, critic.net, train_cfg.tau)
            value, actor_grads = actor_objective_gradients(batch, critic, executive)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite actor objective {value!r} "
                                    f"at step {steps}")
            optimizer_step(executive.net, actor_grads, train_cfg.lr_actor, "ascend")
            soft_update(target_actor.net, executive.net, train_cfg.tau)
            loss_sum += loss
            objective_sum += value
            updates += 1

        steps += train_cfg.steps_per_round_exec
        entry = tracking_pass(env, aux, executive)
        record.add(_stamped(entry, steps,
                            objective_sum / updates if updates else None,
                            loss_sum / updates if updates else None))
        if steps > train_cfg.total_steps_exec:
            running = False
    return ExecutiveTrainResult(executive, critic, target_actor, target_critic,
                                record)
