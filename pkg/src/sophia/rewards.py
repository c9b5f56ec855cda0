"""Outcome scoring, backward reward propagation, and record selection.

A trajectory earns outcome reward 1 when its extracted answer verifies
against the task's gold answer. A caption's reward is the exact rational
fraction of its successfully generated trajectories that earned reward 1.
Selection keeps, per task, the shortest rewarded trajectories whose
caption reward strictly exceeds the threshold; everything else is dropped
with an accounted reason.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Sequence

from sophia.core import (
    DEFAULT_PROMPT,
    SLOW_THINKING,
    Caption,
    OffPolicyRecord,
    Trajectory,
)
from sophia.sampler import RawPool
from sophia.verifier import score_with_extraction

REJECT_WRONG_ANSWER = "wrong_answer"
REJECT_CAPTION_BELOW_ALPHA = "caption_below_alpha"
REJECT_NOT_SHORTEST = "not_shortest"
REJECTION_REASONS = (REJECT_WRONG_ANSWER, REJECT_CAPTION_BELOW_ALPHA, REJECT_NOT_SHORTEST)


def as_fraction(value: Fraction | int | float | str) -> Fraction:
    """Coerce a threshold to an exact rational.

    Floats go through their shortest decimal rendering, so a configured
    0.75 means exactly 3/4 rather than the nearest binary float.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(repr(value))
    return Fraction(value)


def score_pool(
    pool: RawPool,
    gold_answers: dict[str, str],
    score_fn: Callable[[str, str], tuple[str | None, int]] = score_with_extraction,
) -> RawPool:
    """Fill in extracted answers and outcome rewards for every trajectory.

    Mutates the pool in place and returns it. Raises KeyError when a
    task in the pool has no gold answer.
    """
    for task in pool.tasks:
        if task.task_id not in gold_answers:
            raise KeyError(f"no gold answer for task {task.task_id!r}")
        gold = gold_answers[task.task_id]
        for cap_slot in task.captions:
            for traj_slot in cap_slot.trajectories:
                if traj_slot.trajectory is None:
                    continue
                extracted, reward = score_fn(traj_slot.trajectory.text, gold)
                traj_slot.trajectory = replace(
                    traj_slot.trajectory,
                    extracted_answer=extracted,
                    outcome_reward=reward,
                )
    return pool


def caption_reward(outcomes: Iterable[int]) -> Fraction | None:
    """Mean outcome reward of a caption's successful trajectories, exact.

    Returns None when there are no successful trajectories to average
    over; such a caption is ineligible for selection.
    """
    outcomes = list(outcomes)
    if not outcomes:
        return None
    return Fraction(sum(outcomes), len(outcomes))


def compute_caption_rewards(pool: RawPool) -> RawPool:
    """Propagate trajectory outcomes back onto their captions, in place."""
    for task in pool.tasks:
        for cap_slot in task.captions:
            if cap_slot.caption is None:
                continue
            outcomes = [
                slot.trajectory.outcome_reward
                for slot in cap_slot.trajectories
                if slot.trajectory is not None
            ]
            if any(o is None for o in outcomes):
                raise ValueError(
                    f"caption {cap_slot.caption.task_id}/{cap_slot.caption.index} "
                    "has unscored trajectories"
                )
            cap_slot.caption = replace(cap_slot.caption, reward=caption_reward(outcomes))
    return pool


def select_shortest(
    candidates: Sequence[tuple[int, int, int]], keep_n: int
) -> list[tuple[int, int, int]]:
    """Order candidates by (length, then slot indices) and keep the head.

    Candidates are (length, group index, member index) triples. Shared
    by the text pipeline and the toy trainer so both apply the same
    shortest-first rule with the same deterministic tie-break.
    """
    return sorted(candidates)[: max(keep_n, 0)]


@dataclass
class TaskSelection:
    task_id: str
    eligible_count: int
    selected: list[dict] = field(default_factory=list)
    rejections: dict = field(default_factory=dict)
    caption_rewards: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "eligible_count": self.eligible_count,
            "selected": self.selected,
            "rejections": self.rejections,
            "caption_rewards": self.caption_rewards,
        }


@dataclass
class SelectionReport:
    alpha: Fraction
    keep_n: int
    tasks: list[TaskSelection] = field(default_factory=list)

    def totals(self) -> dict:
        out = {reason: 0 for reason in REJECTION_REASONS}
        selected = 0
        for task in self.tasks:
            selected += len(task.selected)
            for reason, count in task.rejections.items():
                out[reason] += count
        out["selected"] = selected
        return out

    def to_rows(self) -> list[dict]:
        header = {
            "kind": "summary",
            "alpha": str(self.alpha),
            "keep_n": self.keep_n,
            **self.totals(),
        }
        rows = [header]
        for task in self.tasks:
            rows.append({"kind": "task", **task.to_dict()})
        return rows


def select(
    pool: RawPool,
    alpha: Fraction | float | str,
    keep_n: int,
) -> tuple[list[OffPolicyRecord], SelectionReport]:
    """Choose the per-task training records from a scored pool.

    A trajectory is eligible when its own outcome reward is 1 and its
    caption's reward strictly exceeds alpha. Of the eligible ones, the
    keep_n shortest survive (ties broken by caption index, then
    trajectory index). Zero-reward trajectories never appear in the
    output: the returned records all carry dataset_reward 1.
    """
    if keep_n < 1:
        raise ValueError("keep_n must be >= 1")
    alpha = as_fraction(alpha)
    compute_caption_rewards(pool)

    records: list[OffPolicyRecord] = []
    report = SelectionReport(alpha=alpha, keep_n=keep_n)
    for task in pool.tasks:
        rewards_by_cap: dict[int, Fraction | None] = {}
        for cap_index, cap_slot in enumerate(task.captions):
            if cap_slot.caption is not None:
                rewards_by_cap[cap_index] = cap_slot.caption.reward

        candidates: list[tuple[int, int, int]] = []
        trajectories: dict[tuple[int, int], Trajectory] = {}
        for cap_index, cap_slot in enumerate(task.captions):
            for traj_slot in cap_slot.trajectories:
                traj = traj_slot.trajectory
                if traj is None:
                    continue
                trajectories[(traj.caption_index, traj.index)] = traj
                cap_reward = rewards_by_cap.get(cap_index)
                if traj.outcome_reward == 1 and cap_reward is not None and cap_reward > alpha:
                    candidates.append((traj.length_tokens, traj.caption_index, traj.index))

        chosen = select_shortest(candidates, keep_n)
        chosen_keys = {(ci, ti) for _, ci, ti in chosen}

        selection = TaskSelection(
            task_id=task.task_id,
            eligible_count=len(candidates),
            rejections={reason: 0 for reason in REJECTION_REASONS},
            caption_rewards={
                str(ci): (str(r) if r is not None else None)
                for ci, r in sorted(rewards_by_cap.items())
            },
        )
        for _, cap_index, traj_index in chosen:
            traj = trajectories[(cap_index, traj_index)]
            selection.selected.append(
                {
                    "caption_index": cap_index,
                    "trajectory_index": traj_index,
                    "length_tokens": traj.length_tokens,
                }
            )
            records.append(
                OffPolicyRecord(
                    task_id=task.task_id,
                    query=task.query,
                    image_ref=task.image_ref,
                    caption_index=cap_index,
                    trajectory=traj,
                    dataset_reward=1,
                    system_prompt_id=SLOW_THINKING if traj.has_think_tag else DEFAULT_PROMPT,
                )
            )

        for (cap_index, traj_index), traj in sorted(trajectories.items()):
            if (cap_index, traj_index) in chosen_keys:
                continue
            cap_reward = rewards_by_cap.get(cap_index)
            if traj.outcome_reward != 1:
                selection.rejections[REJECT_WRONG_ANSWER] += 1
            elif cap_reward is None or cap_reward <= alpha:
                selection.rejections[REJECT_CAPTION_BELOW_ALPHA] += 1
            else:
                selection.rejections[REJECT_NOT_SHORTEST] += 1
        report.tasks.append(selection)

    return records, report
