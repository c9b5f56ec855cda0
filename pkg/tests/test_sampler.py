"""Tests for prompt construction and the two-phase collection loop."""

import pytest

from sophia.backends import (
    BackendError,
    StubReasonerBackend,
    StubVisionBackend,
    SyntheticWorld,
)
from sophia.core import PipelineConfig, config_replace, count_tokens, dumps_record
from sophia.sampler import (
    CAPTION_SYSTEM_PROMPT,
    CAPTION_USER_PROMPT,
    THINK_TAG,
    build_caption_prompt,
    build_reasoning_prompt,
    collect,
    load_pool,
    pool_rows,
    save_pool,
)


def small_config(**overrides):
    base = config_replace(PipelineConfig(), k=3, n=2, num_tasks=4, parallelism=2)
    return config_replace(base, **overrides) if overrides else base


def make_world(config, num_tasks=4):
    world = SyntheticWorld(
        seed=config.seed,
        attr_count=config.stub.attr_count,
        caption_fidelity=config.stub.caption_fidelity,
        reasoner_skill=config.stub.reasoner_skill,
        gold_fn=config.stub.gold_fn,
    )
    return world, world.make_tasks(num_tasks)


class FailingBackend:
    """Raises for selected slots, delegates the rest."""

    def __init__(self, inner, should_fail):
        self.inner = inner
        self.backend_id = inner.backend_id
        self.should_fail = should_fail

    def generate(self, request):
        if self.should_fail(request):
            raise BackendError("synthetic failure")
        return self.inner.generate(request)


class TestPrompts:
    def test_caption_prompt_is_task_independent(self):
        """The captioner must never see the question it will be graded against."""
        assert build_caption_prompt() == build_caption_prompt()
        system, user = build_caption_prompt()
        assert (system, user) == (CAPTION_SYSTEM_PROMPT, CAPTION_USER_PROMPT)
        world = SyntheticWorld(seed=7)
        for gold_fn in ("sum", "max", "count"):
            query = SyntheticWorld(seed=7, gold_fn=gold_fn).query_text()
            assert query not in system
            assert query not in user

    def test_caption_prompt_never_mentions_dials(self):
        """No hint of the synthetic environment's content leaks into the prompt."""
        system, user = build_caption_prompt()
        assert "dial" not in (system + user).lower()

    def test_reasoning_prompt_embeds_caption_and_query(self):
        system, user = build_reasoning_prompt("What is the sum?", "Dial 1 shows 3.")
        assert "<description>" in user
        assert "Dial 1 shows 3." in user
        assert user.index("Dial 1 shows 3.") < user.index("What is the sum?")
        assert "\\boxed{}" in user

    def test_reasoning_prompt_rejects_empty_caption(self):
        with pytest.raises(ValueError):
            build_reasoning_prompt("q", "   ")


class TestCollect:
    def collect_small(self, config=None, **kwargs):
        config = config or small_config()
        world, tasks = make_world(config)
        vision = StubVisionBackend(world)
        reasoning = StubReasonerBackend(world)
        return collect(tasks, config, vision, reasoning, **kwargs), config

    def test_shapes(self):
        pool, config = self.collect_small()
        assert pool.k == config.k
        assert pool.n == config.n
        assert len(pool.tasks) == 4
        for task in pool.tasks:
            assert len(task.captions) == config.k
            for cap_slot in task.captions:
                assert len(cap_slot.trajectories) == config.n

    def test_indices_match_slots(self):
        pool, _ = self.collect_small()
        for task in pool.tasks:
            for cap_index, cap_slot in enumerate(task.captions):
                assert cap_slot.caption.index == cap_index
                for traj_index, traj_slot in enumerate(cap_slot.trajectories):
                    assert traj_slot.trajectory.caption_index == cap_index
                    assert traj_slot.trajectory.index == traj_index

    def test_rewards_unset_at_collection(self):
        pool, _ = self.collect_small()
        for task in pool.tasks:
            for cap_slot in task.captions:
                assert cap_slot.caption.reward is None

    def test_trajectory_bookkeeping(self):
        pool, config = self.collect_small()
        for _, _, traj in pool.iter_trajectories():
            assert traj.has_think_tag == (THINK_TAG in traj.text)
            assert traj.length_tokens == count_tokens(traj.text, config.tokenization_rule)
            assert traj.outcome_reward is None
            assert traj.backend_id == "stub-reasoner"

    def test_deterministic(self):
        pool_a, _ = self.collect_small()
        pool_b, _ = self.collect_small()
        rows_a = [dumps_record(r) for r in pool_rows(pool_a)]
        rows_b = [dumps_record(r) for r in pool_rows(pool_b)]
        assert rows_a == rows_b

    def test_parallelism_does_not_change_output(self):
        pool_a, _ = self.collect_small(small_config())
        pool_b, _ = self.collect_small(config_replace(small_config(), parallelism=1))
        assert list(pool_rows(pool_a)) == list(pool_rows(pool_b))

    def test_seed_changes_output(self):
        low_fidelity = config_replace(
            small_config(), stub=small_config().stub.__class__(caption_fidelity=0.5)
        )
        pool_a, _ = self.collect_small(low_fidelity)
        pool_b, _ = self.collect_small(config_replace(low_fidelity, seed=8))
        texts_a = [c.caption.text for t in pool_a.tasks for c in t.captions]
        texts_b = [c.caption.text for t in pool_b.tasks for c in t.captions]
        assert texts_a != texts_b

    def test_slot_accounting_with_failures(self):
        """Successes plus recorded errors always add up to K*N per task."""
        config = small_config()
        world, tasks = make_world(config)
        flaky = FailingBackend(
            StubReasonerBackend(world),
            should_fail=lambda req: req.seed % 3 == 0,
        )
        pool = collect(tasks, config, StubVisionBackend(world), flaky)
        for task in pool.tasks:
            ok, failed = pool.slot_counts(task)
            assert ok + failed == config.k * config.n
            assert failed > 0

    def test_caption_failure_fails_whole_branch(self):
        config = small_config()
        world, tasks = make_world(config)
        first_task_refs = {tasks[0].image_ref}
        broken_vision = FailingBackend(
            StubVisionBackend(world),
            should_fail=lambda req: req.image_ref in first_task_refs,
        )
        pool = collect(tasks, config, broken_vision, StubReasonerBackend(world))
        assert pool.zero_success_task_ids() == [tasks[0].id]
        ok, failed = pool.slot_counts(pool.tasks[0])
        assert (ok, failed) == (0, config.k * config.n)
        for cap_slot in pool.tasks[0].captions:
            assert cap_slot.caption is None
            assert cap_slot.error
            assert all(t.error for t in cap_slot.trajectories)

    def test_reasoning_overrides_route_per_task(self):
        config = small_config()
        world, tasks = make_world(config)

        class RenamedBackend(StubReasonerBackend):
            def __init__(self, world):
                super().__init__(world)
                self.backend_id = "stub-reasoner-alt"

        overrides = {tasks[1].id: RenamedBackend(world)}
        pool = collect(
            tasks, config, StubVisionBackend(world), StubReasonerBackend(world),
            reasoning_overrides=overrides,
        )
        by_task = {
            task.task_id: {traj.backend_id for _, _, traj in pool.iter_trajectories()
                           if traj.task_id == task.task_id}
            for task in pool.tasks
        }
        assert by_task[tasks[1].id] == {"stub-reasoner-alt"}
        assert by_task[tasks[0].id] == {"stub-reasoner"}


class TestPoolPersistence:
    def test_round_trip(self, tmp_path):
        config = small_config()
        world, tasks = make_world(config)
        pool = collect(tasks, config, StubVisionBackend(world), StubReasonerBackend(world))
        path = tmp_path / "pool.jsonl"
        save_pool(path, pool)
        loaded = load_pool(path)
        assert list(pool_rows(loaded)) == list(pool_rows(pool))

    def test_round_trip_preserves_errors(self, tmp_path):
        config = small_config()
        world, tasks = make_world(config)
        flaky = FailingBackend(
            StubReasonerBackend(world), should_fail=lambda req: req.seed % 2 == 0
        )
        pool = collect(tasks, config, StubVisionBackend(world), flaky)
        path = tmp_path / "pool.jsonl"
        save_pool(path, pool)
        loaded = load_pool(path)
        for orig_task, loaded_task in zip(pool.tasks, loaded.tasks):
            assert pool.slot_counts(orig_task) == loaded.slot_counts(loaded_task)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        path.write_text("")
        with pytest.raises(ValueError):
            load_pool(path)

    def test_unknown_kind_rejected(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        path.write_text('{"kind": "mystery"}\n')
        with pytest.raises(ValueError):
            load_pool(path)
