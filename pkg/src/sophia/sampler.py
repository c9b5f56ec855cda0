"""Prompt construction and batch collection of captions and trajectories.

Collection fans out over a thread pool but derives every sampling stream
from (run seed, task id, slot indices), so the pool contents never depend
on scheduling order or on how many workers ran.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from sophia.backends import BackendError, GenRequest
from sophia.core import (
    Caption,
    PipelineConfig,
    TaskItem,
    Trajectory,
    count_tokens,
    derive_seed,
    read_jsonl,
    write_jsonl,
)

THINK_TAG = "<think>"

CAPTION_SYSTEM_PROMPT = "You are an image description assistant."

# The caption request deliberately never mentions the question that will
# later be asked about the image. A captioner that saw the question could
# smuggle an answer guess into the description and collect reward for it.
CAPTION_USER_PROMPT = (
    "Describe the image as completely as you can. Cover every object and its "
    "attributes (color, size, count, printed text or numbers), the spatial "
    "layout, and how the objects relate to each other. Include the "
    "fine-grained details a careful reader would need in order to answer "
    "arbitrary questions about the image later. Describe only what is "
    "actually visible; never guess at anything the image does not show."
)

REASONING_SYSTEM_PROMPT = (
    "You are a careful step-by-step problem solver. Reason inside "
    "<think>...</think> before answering, question your own intermediate "
    "results, and finish with the final answer in \\boxed{}."
)

_REASONING_USER_TEMPLATE = """You cannot see the image directly. The description below is your only view of it; treat every detail in it as something you can observe by looking at the image.

<description>
{caption}
</description>

Question: {query}

Work from the description alone. Whenever a step depends on a visual detail, look back at the description and quote the relevant part before using it. End with the final answer in \\boxed{{}}.

Here is an example of the expected style, for a different image:
<think> The description says the chart has three bars labeled A, B, and C with heights 2, 5, and 1. The question asks for the tallest bar. Look back: "heights 2, 5, and 1". The largest height is 5, which belongs to B. </think> The tallest bar is B.
The final answer is \\boxed{{B}}."""


def build_caption_prompt() -> tuple[str, str]:
    """System and user prompts for caption sampling.

    Identical for every task by construction; the image itself is
    attached to the request separately as an opaque reference.
    """
    return CAPTION_SYSTEM_PROMPT, CAPTION_USER_PROMPT


def build_reasoning_prompt(query: str, caption: str) -> tuple[str, str]:
    """System and user prompts asking a text model to reason over a caption."""
    if not caption or not caption.strip():
        raise ValueError("caption must be non-empty")
    user = _REASONING_USER_TEMPLATE.format(caption=caption.strip(), query=query)
    return REASONING_SYSTEM_PROMPT, user


# ---------------------------------------------------------------------------
# Pool structure
# ---------------------------------------------------------------------------


@dataclass
class TrajectorySlot:
    trajectory: Trajectory | None = None
    error: str | None = None


@dataclass
class CaptionSlot:
    caption: Caption | None = None
    error: str | None = None
    trajectories: list[TrajectorySlot] = field(default_factory=list)


@dataclass
class TaskPool:
    task_id: str
    image_ref: str
    query: str
    captions: list[CaptionSlot] = field(default_factory=list)


@dataclass
class RawPool:
    """Everything one collection run produced, successes and failures alike."""

    k: int
    n: int
    tasks: list[TaskPool] = field(default_factory=list)

    def iter_trajectories(self) -> Iterator[tuple[TaskPool, CaptionSlot, Trajectory]]:
        for task in self.tasks:
            for cap_slot in task.captions:
                for traj_slot in cap_slot.trajectories:
                    if traj_slot.trajectory is not None:
                        yield task, cap_slot, traj_slot.trajectory

    def slot_counts(self, task: TaskPool) -> tuple[int, int]:
        """(successful trajectories, error slots) for one task."""
        ok = 0
        failed = 0
        for cap_slot in task.captions:
            for traj_slot in cap_slot.trajectories:
                if traj_slot.trajectory is not None:
                    ok += 1
                else:
                    failed += 1
        return ok, failed

    def zero_success_task_ids(self) -> list[str]:
        return [t.task_id for t in self.tasks if self.slot_counts(t)[0] == 0]

    def trajectory_count(self) -> int:
        return sum(self.slot_counts(t)[0] for t in self.tasks)

    def caption_count(self) -> int:
        return sum(1 for t in self.tasks for c in t.captions if c.caption is not None)


def pool_rows(pool: RawPool) -> Iterator[dict]:
    """Flatten a pool into line-delimited rows keyed by slot indices."""
    for task in pool.tasks:
        yield {
            "kind": "task",
            "id": task.task_id,
            "image_ref": task.image_ref,
            "query": task.query,
            "k": pool.k,
            "n": pool.n,
        }
        for cap_index, cap_slot in enumerate(task.captions):
            if cap_slot.caption is not None:
                row = {"kind": "caption", **cap_slot.caption.to_dict()}
            else:
                row = {
                    "kind": "caption",
                    "task_id": task.task_id,
                    "index": cap_index,
                    "text": None,
                    "reward": None,
                    "backend_id": "",
                    "error": cap_slot.error or "caption slot failed",
                }
            yield row
            for traj_index, traj_slot in enumerate(cap_slot.trajectories):
                if traj_slot.trajectory is not None:
                    yield {"kind": "trajectory", **traj_slot.trajectory.to_dict()}
                else:
                    yield {
                        "kind": "trajectory",
                        "task_id": task.task_id,
                        "caption_index": cap_index,
                        "index": traj_index,
                        "text": None,
                        "error": traj_slot.error or "trajectory slot failed",
                    }


def save_pool(path: str | Path, pool: RawPool) -> None:
    write_jsonl(path, pool_rows(pool))


def load_pool(path: str | Path) -> RawPool:
    pool: RawPool | None = None
    tasks: dict[str, TaskPool] = {}
    for row in read_jsonl(path):
        kind = row.get("kind")
        if kind == "task":
            if pool is None:
                pool = RawPool(k=row["k"], n=row["n"])
            task = TaskPool(task_id=row["id"], image_ref=row["image_ref"], query=row["query"])
            task.captions = [CaptionSlot(trajectories=[]) for _ in range(pool.k)]
            for cap_slot in task.captions:
                cap_slot.trajectories = [TrajectorySlot() for _ in range(pool.n)]
            tasks[task.task_id] = task
            pool.tasks.append(task)
        elif kind == "caption":
            task = tasks[row["task_id"]]
            slot = task.captions[row["index"]]
            if row.get("error"):
                slot.error = row["error"]
            else:
                slot.caption = Caption.from_dict(row)
        elif kind == "trajectory":
            task = tasks[row["task_id"]]
            slot = task.captions[row["caption_index"]].trajectories[row["index"]]
            if row.get("error"):
                slot.error = row["error"]
            else:
                slot.trajectory = Trajectory.from_dict(row)
        else:
            raise ValueError(f"pool file has a row of unknown kind {kind!r}")
    if pool is None:
        raise ValueError(f"pool file {path} is empty")
    return pool


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------


def _caption_request(config: PipelineConfig, task: TaskItem, cap_index: int) -> GenRequest:
    system, user = build_caption_prompt()
    return GenRequest(
        system_prompt=system,
        user_prompt=user,
        temperature=config.vision.temperature,
        max_tokens=config.max_gen_tokens,
        seed=derive_seed(config.seed, "caption", task.id, cap_index),
        image_ref=task.image_ref,
    )


def _trajectory_request(
    config: PipelineConfig, task: TaskItem, cap_index: int, traj_index: int, caption_text: str
) -> GenRequest:
    system, user = build_reasoning_prompt(task.query, caption_text)
    return GenRequest(
        system_prompt=system,
        user_prompt=user,
        temperature=config.reasoning.temperature,
        max_tokens=config.max_gen_tokens,
        seed=derive_seed(config.seed, "trajectory", task.id, cap_index, traj_index),
    )


def collect(
    dataset: list[TaskItem],
    config: PipelineConfig,
    vision_backend,
    reasoning_backend,
    reasoning_overrides: dict[str, object] | None = None,
) -> RawPool:
    """Sample K captions per task and N trajectories per caption.

    Per-slot backend failures are recorded in the pool instead of
    aborting the batch; a caption failure marks all N of its dependent
    trajectory slots as failed. `reasoning_overrides` optionally routes
    specific task ids to a different reasoning backend.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    overrides = reasoning_overrides or {}
    pool = RawPool(k=config.k, n=config.n)
    for task in dataset:
        entry = TaskPool(task_id=task.id, image_ref=task.image_ref, query=task.query)
        entry.captions = [
            CaptionSlot(trajectories=[TrajectorySlot() for _ in range(config.n)])
            for _ in range(config.k)
        ]
        pool.tasks.append(entry)

    def run_caption(job: tuple[int, TaskItem, int]) -> None:
        task_pos, task, cap_index = job
        slot = pool.tasks[task_pos].captions[cap_index]
        try:
            response = vision_backend.generate(_caption_request(config, task, cap_index))
        except BackendError as exc:
            slot.error = f"{type(exc).__name__}: {exc}"
            for traj_slot in slot.trajectories:
                traj_slot.error = "caption slot failed"
            return
        slot.caption = Caption(
            task_id=task.id,
            index=cap_index,
            text=response.text,
            reward=None,
            backend_id=response.backend_id,
        )

    caption_jobs = [
        (task_pos, task, cap_index)
        for task_pos, task in enumerate(dataset)
        for cap_index in range(config.k)
    ]
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool_exec:
        list(pool_exec.map(run_caption, caption_jobs))

    def run_trajectory(job: tuple[int, TaskItem, int, int, str]) -> None:
        task_pos, task, cap_index, traj_index, caption_text = job
        slot = pool.tasks[task_pos].captions[cap_index].trajectories[traj_index]
        backend = overrides.get(task.id, reasoning_backend)
        try:
            request = _trajectory_request(config, task, cap_index, traj_index, caption_text)
            response = backend.generate(request)
        except BackendError as exc:
            slot.error = f"{type(exc).__name__}: {exc}"
            return
        slot.trajectory = Trajectory(
            task_id=task.id,
            caption_index=cap_index,
            index=traj_index,
            text=response.text,
            extracted_answer=None,
            outcome_reward=None,
            length_tokens=count_tokens(
                response.text, config.tokenization_rule, reported=response.token_count
            ),
            has_think_tag=THINK_TAG in response.text,
            backend_id=response.backend_id,
        )

    trajectory_jobs = []
    for task_pos, task in enumerate(dataset):
        for cap_index, cap_slot in enumerate(pool.tasks[task_pos].captions):
            if cap_slot.caption is None:
                continue
            for traj_index in range(config.n):
                trajectory_jobs.append(
                    (task_pos, task, cap_index, traj_index, cap_slot.caption.text)
                )
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool_exec:
        list(pool_exec.map(run_trajectory, trajectory_jobs))

    return pool
