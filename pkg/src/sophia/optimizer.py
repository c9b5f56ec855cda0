"""Objective estimates, bias diagnostics, and the toy training loop.

The training objective is an importance-weighted expected reward over
records drawn from a behavior policy. Because every kept record carries
reward 1 and the behavior policy stays within a small ratio band of the
trained one on rewarded sequences, the importance ratio can be dropped:
the gap between the weighted and unweighted estimates is bounded by the
largest ratio deviation, and `check_bias_bound` verifies that bound by
exhaustive enumeration rather than sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from sophia.core import TrainConfig, derive_rng
from sophia.policy import (
    ToyPolicy,
    full_support_enumeration,
    grad_log_prob,
    log_prob,
    random_policy,
    sample,
    uniform_policy,
    with_params,
)
from sophia.rewards import select_shortest


class CoverageError(ValueError):
    """A record has zero probability under the behavior policy."""


class TrainDivergenceError(RuntimeError):
    """Parameters blew past the configured divergence cap."""


@dataclass(frozen=True)
class ToyRecord:
    """One behavior-policy rollout with its binary reward."""

    context: tuple[float, ...]
    sequence: tuple[int, ...]
    reward: int
    length: int
    group_index: int = 0
    rollout_index: int = 0


# ---------------------------------------------------------------------------
# Objective estimates
# ---------------------------------------------------------------------------


def estimate_objective_is(
    records: Sequence[ToyRecord], pi: ToyPolicy, mu: ToyPolicy
) -> float:
    """Importance-weighted mean reward of records drawn from mu.

    Raises CoverageError when any record has zero probability under mu,
    since the ratio is undefined there.
    """
    if not records:
        raise ValueError("records must be non-empty")
    total = 0.0
    for record in records:
        log_mu = log_prob(mu, record.context, record.sequence)
        if not math.isfinite(log_mu) or math.exp(log_mu) == 0.0:
            raise CoverageError(
                f"behavior policy gives zero probability to {record.sequence}"
            )
        log_pi = log_prob(pi, record.context, record.sequence)
        total += math.exp(log_pi - log_mu) * record.reward
    return total / len(records)


def estimate_objective_plain(records: Sequence[ToyRecord]) -> float:
    """Unweighted mean reward; the ratio-free estimate."""
    if not records:
        raise ValueError("records must be non-empty")
    return sum(record.reward for record in records) / len(records)


# ---------------------------------------------------------------------------
# Bias bound
# ---------------------------------------------------------------------------

BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class BiasReport:
    """Exact comparison of the weighted and unweighted objectives.

    delta is the largest importance-ratio deviation |pi/mu - 1| over the
    rewarded support, and the bound states |G_IS - G_1| <= delta up to
    floating-point slack.
    """

    g_is: float
    g_1: float
    delta: float
    bound_satisfied: bool

    @property
    def gap(self) -> float:
        return abs(self.g_is - self.g_1)

    def to_dict(self) -> dict:
        return {
            "G_IS": self.g_is,
            "G_1": self.g_1,
            "gap": self.gap,
            "delta": self.delta,
            "bound_satisfied": self.bound_satisfied,
        }


def default_bias_reward(sequence: tuple[int, ...]) -> int:
    """Reward rule used by the bias diagnostic: starts with token 0."""
    return 1 if sequence and sequence[0] == 0 else 0


def check_bias_bound(
    pi: ToyPolicy,
    mu: ToyPolicy,
    reward_fn: Callable[[tuple[int, ...]], int] = default_bias_reward,
    context: Sequence[float] | None = None,
) -> BiasReport:
    """Compare E_mu[(pi/mu) R] against E_mu[R] by exhaustive enumeration.

    Both expectations run over the behavior policy's full support, so
    the comparison carries no sampling error at all; delta is likewise
    exact over the rewarded sequences.
    """
    if context is None:
        context = np.zeros(mu.context_dim)
    g_is = 0.0
    g_1 = 0.0
    delta = 0.0
    for sequence, mu_prob in full_support_enumeration(mu, context):
        reward = reward_fn(sequence)
        if reward == 0:
            continue
        pi_prob = math.exp(log_prob(pi, context, sequence))
        g_is += pi_prob * reward
        g_1 += mu_prob * reward
        if mu_prob > 0.0:
            delta = max(delta, abs(pi_prob / mu_prob - 1.0))
    return BiasReport(
        g_is=g_is,
        g_1=g_1,
        delta=delta,
        bound_satisfied=abs(g_is - g_1) <= delta + BOUND_SLACK,
    )


def max_ratio_deviation(
    pi: ToyPolicy,
    mu: ToyPolicy,
    reward_fn: Callable[[tuple[int, ...]], int] = default_bias_reward,
    context: Sequence[float] | None = None,
) -> float:
    """Largest |pi/mu - 1| over mu's rewarded support."""
    if context is None:
        context = np.zeros(mu.context_dim)
    worst = 0.0
    for sequence, mu_prob in full_support_enumeration(mu, context):
        if reward_fn(sequence) == 0 or mu_prob == 0.0:
            continue
        pi_prob = math.exp(log_prob(pi, context, sequence))
        worst = max(worst, abs(pi_prob / mu_prob - 1.0))
    return worst


def engineer_biased_pair(
    vocab_size: int,
    max_len: int,
    target_delta: float,
    seed: int = 0,
    reward_fn: Callable[[tuple[int, ...]], int] = default_bias_reward,
) -> tuple[ToyPolicy, ToyPolicy, float]:
    """Build (pi, mu) whose largest rewarded-support ratio deviation is
    target_delta, up to bisection precision, approached from below.

    mu is a random policy; pi perturbs mu's parameters along a random
    direction scaled so the achieved deviation lands in
    [target_delta - 1e-9, target_delta].
    """
    if target_delta <= 0:
        raise ValueError("target_delta must be positive")
    rng = derive_rng(seed, "bias-pair", vocab_size, max_len, target_delta)
    mu = random_policy(vocab_size, max_len, context_dim=1, rng=rng, window=1, scale=0.3)
    direction = rng.normal(0.0, 1.0, size=mu.params.shape)
    context = np.zeros(mu.context_dim)

    def deviation(scale: float) -> float:
        perturbed = with_params(mu, mu.params + scale * direction)
        return max_ratio_deviation(perturbed, mu, reward_fn, context)

    hi = 1e-3
    while deviation(hi) < target_delta:
        hi *= 2.0
        if hi > 1e6:
            raise RuntimeError("could not reach the requested deviation")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if deviation(mid) <= target_delta:
            lo = mid
        else:
            hi = mid
        if target_delta - deviation(lo) <= 1e-9 and deviation(lo) <= target_delta:
            break
    achieved = deviation(lo)
    pi = with_params(mu, mu.params + lo * direction)
    return pi, mu, achieved


# ---------------------------------------------------------------------------
# Policy gradient
# ---------------------------------------------------------------------------


def policy_gradient(records: Sequence[ToyRecord], pi: ToyPolicy) -> np.ndarray:
    """Ratio-free gradient estimate: mean of reward * grad log pi."""
    if not records:
        raise ValueError("records must be non-empty")
    grad = np.zeros_like(pi.params)
    for record in records:
        if record.reward == 0:
            continue
        grad += record.reward * grad_log_prob(pi, record.context, record.sequence)
    return grad / len(records)


# ---------------------------------------------------------------------------
# Curriculum
# ---------------------------------------------------------------------------


# Scaled-up context one-hots speed learning at the small fixed step size:
# the per-coordinate update is proportional to the squared feature value.
CONTEXT_SCALE = 4.0


@dataclass(frozen=True)
class ToyCurriculum:
    """Contexts that each encode which first token earns reward.

    Context i is a scaled one-hot vector of its target token, so the
    rewarded pattern is linearly readable from the features and the policy
    can actually learn the mapping. When required_len is positive, reward
    additionally requires the sequence to run exactly that long. Rewarded
    sequences then never carry a stop-token factor, which matters for
    learning speed: a rewarded sequence that stops right after the target
    token pushes the target's logit back down through the stop step's
    score function, and the two updates nearly cancel.
    """

    contexts: tuple[tuple[float, ...], ...]
    targets: tuple[int, ...]
    vocab_size: int
    required_len: int = 0

    def __post_init__(self):
        if len(self.contexts) != len(self.targets):
            raise ValueError("contexts and targets must align")
        for target in self.targets:
            if not 0 <= target < self.vocab_size:
                raise ValueError("target outside vocabulary")

    @property
    def context_dim(self) -> int:
        return self.vocab_size

    def reward(self, context_index: int, sequence: tuple[int, ...]) -> int:
        if self.required_len > 0 and len(sequence) != self.required_len:
            return 0
        target = self.targets[context_index]
        return 1 if sequence and sequence[0] == target else 0


def curriculum_from_world(world, tasks, vocab_size: int, max_len: int = 0) -> ToyCurriculum:
    """Derive a curriculum from a synthetic world's hidden attributes.

    Each task's first hidden attribute, reduced into the vocabulary,
    names the rewarded first token for that task's context. Passing the
    policy's max_len as the required length rewards only full-length
    sequences that start with the target token.
    """
    targets = []
    contexts = []
    for task in tasks:
        target = world.attributes(task.image_ref)[0] % vocab_size
        one_hot = tuple(CONTEXT_SCALE if i == target else 0.0 for i in range(vocab_size))
        targets.append(target)
        contexts.append(one_hot)
    return ToyCurriculum(
        contexts=tuple(contexts),
        targets=tuple(targets),
        vocab_size=vocab_size,
        required_len=max_len,
    )


def exact_mean_reward(policy: ToyPolicy, curriculum: ToyCurriculum) -> float:
    """Mean over contexts of the exact expected reward, by enumeration."""
    total = 0.0
    for index, context in enumerate(curriculum.contexts):
        expected = 0.0
        for sequence, prob in full_support_enumeration(policy, context):
            expected += prob * curriculum.reward(index, sequence)
        total += expected
    return total / len(curriculum.contexts)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def cosine_lr(initial: float, step: int, horizon: int, floor_ratio: float = 0.25) -> float:
    """Cosine schedule from `initial` down to `initial * floor_ratio`.

    `step` runs from 0 to horizon - 1; the final step lands exactly on
    the floor.
    """
    if horizon <= 1:
        return initial
    floor = initial * floor_ratio
    return floor + 0.5 * (initial - floor) * (1.0 + math.cos(math.pi * step / (horizon - 1)))


@dataclass
class RoundLog:
    round: int
    lr: float
    behavior_mean_reward: float | None
    selected: int
    eval_mean_reward: float
    grad_norm: float
    theta_abs_mean: float

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "lr": self.lr,
            "behavior_mean_reward": self.behavior_mean_reward,
            "selected": self.selected,
            "eval_mean_reward": self.eval_mean_reward,
            "grad_norm": self.grad_norm,
            "theta_abs_mean": self.theta_abs_mean,
        }


@dataclass
class TrainState:
    policy: ToyPolicy
    step: int = 0
    lr: float = 0.0
    running_mean_reward: float = 0.0


class _AdamState:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def update(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad * grad
        m_hat = self.m / (1.0 - 0.9**self.t)
        v_hat = self.v / (1.0 - 0.999**self.t)
        return lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def collect_toy_records(
    policy: ToyPolicy,
    curriculum: ToyCurriculum,
    rollouts: int,
    seed: int,
    round_index: int,
) -> list[ToyRecord]:
    """Sample `rollouts` behavior rollouts per context and score them."""
    records = []
    for context_index, context in enumerate(curriculum.contexts):
        for rollout_index in range(rollouts):
            rng = derive_rng(seed, "train-rollout", round_index, context_index, rollout_index)
            sequence = sample(policy, context, rng)
            records.append(
                ToyRecord(
                    context=tuple(context),
                    sequence=sequence,
                    reward=curriculum.reward(context_index, sequence),
                    length=len(sequence),
                    group_index=context_index,
                    rollout_index=rollout_index,
                )
            )
    return records


def select_toy_records(
    records: Sequence[ToyRecord], alpha: Fraction, keep_n: int
) -> list[ToyRecord]:
    """Group-threshold-and-shortest selection over toy rollouts.

    Mirrors the text pipeline: a group (all rollouts of one context in
    one round) passes when its mean reward strictly exceeds alpha, and
    only the keep_n shortest rewarded members of passing groups survive.
    """
    by_group: dict[int, list[ToyRecord]] = {}
    for record in records:
        by_group.setdefault(record.group_index, []).append(record)
    kept: list[ToyRecord] = []
    for group_index in sorted(by_group):
        members = by_group[group_index]
        group_reward = Fraction(sum(r.reward for r in members), len(members))
        if not group_reward > alpha:
            continue
        candidates = [
            (r.length, r.group_index, r.rollout_index) for r in members if r.reward == 1
        ]
        chosen = set(select_shortest(candidates, keep_n))
        kept.extend(
            r for r in members if (r.length, r.group_index, r.rollout_index) in chosen
        )
    return kept


def train(
    curriculum: ToyCurriculum,
    config: TrainConfig,
    seed: int,
) -> tuple[TrainState, list[RoundLog]]:
    """Run the full desk-scale loop: collect, score, select, update.

    Each round draws rollouts from the current policy, selects records
    by group threshold and shortest length, and takes one gradient pass
    over the selected records (mean reward times score function, no
    ratio, no divergence penalty of any kind). The learning rate follows
    a cosine schedule down to a quarter of its initial value. History
    row 0 logs the untrained policy's exact evaluation reward.
    """
    policy = uniform_policy(
        vocab_size=curriculum.vocab_size,
        max_len=config.max_len,
        context_dim=curriculum.context_dim,
        window=config.window,
    )
    state = TrainState(policy=policy)
    adam = _AdamState(policy.params.shape) if config.adaptive else None

    history = [
        RoundLog(
            round=0,
            lr=0.0,
            behavior_mean_reward=None,
            selected=0,
            eval_mean_reward=exact_mean_reward(policy, curriculum),
            grad_norm=0.0,
            theta_abs_mean=float(np.mean(np.abs(policy.params))),
        )
    ]

    for round_index in range(1, config.rounds + 1):
        lr = cosine_lr(config.learning_rate, round_index - 1, config.rounds)
        records = collect_toy_records(
            state.policy, curriculum, config.rollouts, seed, round_index
        )
        behavior_mean = estimate_objective_plain(records)
        kept = select_toy_records(records, config.alpha, config.keep_n)

        grad_norm = 0.0
        if kept:
            if config.batch_size and config.batch_size < len(kept):
                batches = [
                    kept[i : i + config.batch_size]
                    for i in range(0, len(kept), config.batch_size)
                ]
            else:
                batches = [kept]
            params = state.policy.params
            for batch in batches:
                grad = policy_gradient(batch, with_params(state.policy, params))
                grad_norm += float(np.linalg.norm(grad))
                if adam is not None:
                    params = params + adam.update(grad, lr)
                else:
                    params = params + lr * grad
            state.policy = with_params(state.policy, params)

        theta_abs_mean = float(np.mean(np.abs(state.policy.params)))
        if theta_abs_mean > config.divergence_cap:
            raise TrainDivergenceError(
                f"mean absolute parameter {theta_abs_mean:.3f} exceeded the cap "
                f"{config.divergence_cap} at round {round_index}"
            )

        eval_reward = exact_mean_reward(state.policy, curriculum)
        state.step = round_index
        state.lr = lr
        state.running_mean_reward += (eval_reward - state.running_mean_reward) / round_index
        history.append(
            RoundLog(
                round=round_index,
                lr=lr,
                behavior_mean_reward=behavior_mean,
                selected=len(kept),
                eval_mean_reward=eval_reward,
                grad_norm=grad_norm,
                theta_abs_mean=theta_abs_mean,
            )
        )

    return state, history
