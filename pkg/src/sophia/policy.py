"""A tiny autoregressive softmax policy over a finite vocabulary.

Sequences are tuples of token ids below `vocab_size`. At each step the
policy scores every token plus an explicit stop symbol from a linear map
over (context features, one-hot window of the last `window` tokens, bias).
A sequence ends when the stop symbol is drawn, or silently at `max_len`,
so the probabilities of all sequences up to the cap sum to one and the
whole distribution can be enumerated and checked exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

ENUMERATION_GUARD = 1_000_000


@dataclass(frozen=True, eq=False)
class ToyPolicy:
    vocab_size: int
    max_len: int
    context_dim: int
    window: int = 2
    params: np.ndarray = None  # shape (vocab_size + 1, feature_dim)

    def __post_init__(self):
        if not 2 <= self.vocab_size <= 16:
            raise ValueError("vocab_size must lie in [2, 16]")
        if not 1 <= self.max_len <= 6:
            raise ValueError("max_len must lie in [1, 6]")
        if self.context_dim < 1:
            raise ValueError("context_dim must be >= 1")
        if self.window < 0:
            raise ValueError("window must be >= 0")
        if self.params is None:
            object.__setattr__(
                self, "params", np.zeros((self.vocab_size + 1, self.feature_dim))
            )
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (self.vocab_size + 1, self.feature_dim):
            raise ValueError(
                f"params must have shape {(self.vocab_size + 1, self.feature_dim)}, "
                f"got {params.shape}"
            )
        object.__setattr__(self, "params", params)

    @property
    def feature_dim(self) -> int:
        return self.context_dim + self.window * self.vocab_size + 1

    @property
    def stop_token(self) -> int:
        return self.vocab_size


def uniform_policy(vocab_size: int, max_len: int, context_dim: int, window: int = 2) -> ToyPolicy:
    """Zero parameters: every step distribution is uniform over V+1 symbols."""
    return ToyPolicy(vocab_size=vocab_size, max_len=max_len, context_dim=context_dim, window=window)


def random_policy(
    vocab_size: int,
    max_len: int,
    context_dim: int,
    rng: np.random.Generator,
    window: int = 2,
    scale: float = 0.5,
) -> ToyPolicy:
    blank = uniform_policy(vocab_size, max_len, context_dim, window)
    params = rng.normal(0.0, scale, size=blank.params.shape)
    return replace(blank, params=params)


def with_params(policy: ToyPolicy, params: np.ndarray) -> ToyPolicy:
    return replace(policy, params=np.asarray(params, dtype=np.float64))


def _check_context(policy: ToyPolicy, context: Sequence[float]) -> np.ndarray:
    context = np.asarray(context, dtype=np.float64)
    if context.shape != (policy.context_dim,):
        raise ValueError(f"context must have shape ({policy.context_dim},), got {context.shape}")
    return context


def _check_sequence(policy: ToyPolicy, sequence: Sequence[int]) -> tuple[int, ...]:
    seq = tuple(int(t) for t in sequence)
    if len(seq) > policy.max_len:
        raise ValueError(f"sequence longer than max_len={policy.max_len}")
    for token in seq:
        if not 0 <= token < policy.vocab_size:
            raise ValueError(f"token {token} outside vocabulary [0, {policy.vocab_size})")
    return seq


def step_features(policy: ToyPolicy, context: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
    """Feature vector for the step that follows `prefix`."""
    features = np.zeros(policy.feature_dim)
    features[: policy.context_dim] = context
    base = policy.context_dim
    for slot in range(policy.window):
        pos = len(prefix) - 1 - slot
        if pos >= 0:
            features[base + slot * policy.vocab_size + prefix[pos]] = 1.0
    features[-1] = 1.0
    return features


def step_log_probs(policy: ToyPolicy, context: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
    logits = policy.params @ step_features(policy, context, prefix)
    shifted = logits - np.max(logits)
    return shifted - np.log(np.sum(np.exp(shifted)))


def step_probs(policy: ToyPolicy, context: np.ndarray, prefix: Sequence[int]) -> np.ndarray:
    return np.exp(step_log_probs(policy, context, prefix))


def log_prob(policy: ToyPolicy, context: Sequence[float], sequence: Sequence[int]) -> float:
    """Log probability of a complete sequence.

    Includes the stop emission after the last token whenever the
    sequence is shorter than max_len; sequences at exactly max_len end
    by the cap and carry no stop factor.
    """
    context = _check_context(policy, context)
    seq = _check_sequence(policy, sequence)
    total = 0.0
    for pos, token in enumerate(seq):
        total += step_log_probs(policy, context, seq[:pos])[token]
    if len(seq) < policy.max_len:
        total += step_log_probs(policy, context, seq)[policy.stop_token]
    return float(total)


def sample(policy: ToyPolicy, context: Sequence[float], rng: np.random.Generator) -> tuple[int, ...]:
    """Draw one sequence by ancestral sampling."""
    context = _check_context(policy, context)
    prefix: tuple[int, ...] = ()
    while len(prefix) < policy.max_len:
        probs = step_probs(policy, context, prefix)
        token = int(rng.choice(policy.vocab_size + 1, p=probs))
        if token == policy.stop_token:
            break
        prefix = prefix + (token,)
    return prefix


def grad_log_prob(
    policy: ToyPolicy, context: Sequence[float], sequence: Sequence[int]
) -> np.ndarray:
    """Exact gradient of log_prob with respect to the parameter matrix.

    Softmax score function per step: (one-hot of the chosen symbol minus
    the step distribution), outer product with the step features.
    """
    context = _check_context(policy, context)
    seq = _check_sequence(policy, sequence)
    grad = np.zeros_like(policy.params)

    def accumulate(prefix: Sequence[int], symbol: int) -> None:
        features = step_features(policy, context, prefix)
        probs = step_probs(policy, context, prefix)
        indicator = np.zeros(policy.vocab_size + 1)
        indicator[symbol] = 1.0
        grad_step = np.outer(indicator - probs, features)
        np.add(grad, grad_step, out=grad)

    for pos, token in enumerate(seq):
        accumulate(seq[:pos], token)
    if len(seq) < policy.max_len:
        accumulate(seq, policy.stop_token)
    return grad


def sequence_count(vocab_size: int, max_len: int) -> int:
    return sum(vocab_size**length for length in range(max_len + 1))


def full_support_enumeration(
    policy: ToyPolicy, context: Sequence[float], guard: int = ENUMERATION_GUARD
) -> list[tuple[tuple[int, ...], float]]:
    """All sequences up to max_len with their exact model probabilities.

    Probabilities are accumulated stepwise rather than re-running
    log_prob per sequence, so enumeration stays linear in the tree size.
    Refuses to enumerate supports larger than `guard` sequences.
    """
    total = sequence_count(policy.vocab_size, policy.max_len)
    if total > guard:
        raise ValueError(f"support holds {total} sequences, above the guard of {guard}")
    context = _check_context(policy, context)
    out: list[tuple[tuple[int, ...], float]] = []

    def visit(prefix: tuple[int, ...], log_mass: float) -> None:
        if len(prefix) == policy.max_len:
            out.append((prefix, float(np.exp(log_mass))))
            return
        step = step_log_probs(policy, context, prefix)
        out.append((prefix, float(np.exp(log_mass + step[policy.stop_token]))))
        for token in range(policy.vocab_size):
            visit(prefix + (token,), log_mass + step[token])

    visit((), 0.0)
    return out


def save_policy(policy: ToyPolicy, path: str | Path) -> None:
    """Persist a policy as a small header plus the flat parameter array."""
    payload = {
        "vocab_size": policy.vocab_size,
        "max_len": policy.max_len,
        "context_dim": policy.context_dim,
        "window": policy.window,
        "params": [float(v) for v in policy.params.ravel()],
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_policy(path: str | Path) -> ToyPolicy:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    blank = ToyPolicy(
        vocab_size=payload["vocab_size"],
        max_len=payload["max_len"],
        context_dim=payload["context_dim"],
        window=payload["window"],
    )
    params = np.array(payload["params"], dtype=np.float64).reshape(blank.params.shape)
    return replace(blank, params=params)
