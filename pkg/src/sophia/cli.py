"""Command-line interface for the batch engine.

Stages write separate artifacts (pool, scored pool, records, report,
history) so later stages can be re-run cheaply, for example re-selecting
at a different threshold without re-sampling anything. Report paths also
render PNG figures next to the delimited output, and every pipeline
command leaves a manifest describing what ran.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

from sophia.backends import SyntheticWorld, make_backend
from sophia.core import (
    ENGINE_VERSION,
    ConfigError,
    OffPolicyRecord,
    PipelineConfig,
    config_hash,
    config_to_text,
    load_config,
    load_dataset,
    read_jsonl,
    write_dataset,
    write_json,
    write_jsonl,
)
from sophia.sampler import collect, load_pool, save_pool
from sophia.rewards import select as select_records
from sophia.rewards import score_pool
from sophia.verifier import check_equivalence

_EXPORT_FORMATS = ("jsonl",)


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

# (flag dest, config section or None, field name, value parser)
_OVERRIDE_FLAGS = [
    ("K", None, "k", int),
    ("N", None, "n", int),
    ("alpha", None, "alpha", Fraction),
    ("keep_n", None, "keep_n", int),
    ("max_gen_tokens", None, "max_gen_tokens", int),
    ("seed", None, "seed", int),
    ("parallelism", None, "parallelism", int),
    ("tokenization_rule", None, "tokenization_rule", str),
    ("num_tasks", None, "num_tasks", int),
    ("stub_attr_count", "stub", "attr_count", int),
    ("stub_caption_fidelity", "stub", "caption_fidelity", float),
    ("stub_reasoner_skill", "stub", "reasoner_skill", float),
    ("stub_gold_fn", "stub", "gold_fn", str),
    ("rounds", "train", "rounds", int),
    ("learning_rate", "train", "learning_rate", float),
]


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="plain-text key-value config file")
    for dest, _, _, parser_fn in _OVERRIDE_FLAGS:
        flag = "--" + dest.replace("_", "-")
        parser.add_argument(flag, dest=dest, type=parser_fn, default=None)


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Load the config file, then apply any flag overrides on top."""
    config = load_config(args.config) if args.config else PipelineConfig()
    sections: dict[str | None, dict] = {}
    for dest, section, field_name, _ in _OVERRIDE_FLAGS:
        value = getattr(args, dest, None)
        if value is not None:
            sections.setdefault(section, {})[field_name] = value
    for section, updates in sections.items():
        if section is None:
            config = replace(config, **updates)
        else:
            config = replace(config, **{section: replace(getattr(config, section), **updates)})
    config.validate()
    return config


def _build_world(config: PipelineConfig) -> SyntheticWorld:
    return SyntheticWorld(
        seed=config.seed,
        attr_count=config.stub.attr_count,
        caption_fidelity=config.stub.caption_fidelity,
        reasoner_skill=config.stub.reasoner_skill,
        gold_fn=config.stub.gold_fn,
    )


def _manifest(config: PipelineConfig, command: str) -> dict:
    return {
        "command": command,
        "engine_version": ENGINE_VERSION,
        "config_hash": config_hash(config),
        "seed": config.seed,
        "backends": [],
        "stage_timings_s": {},
        "counts": {},
    }


class _StageTimer:
    def __init__(self, manifest: dict, stage: str):
        self.manifest = manifest
        self.stage = stage

    def __enter__(self):
        self.started = time.monotonic()
        return self

    def __exit__(self, *exc_info):
        elapsed = round(time.monotonic() - self.started, 6)
        self.manifest["stage_timings_s"][self.stage] = elapsed
        return False


def _check_counts(counts: dict) -> None:
    # Selected records can never exceed sampled trajectories, which can
    # never exceed the number of requested slots.
    slots = counts.get("tasks", 0) * counts.get("K", 0) * counts.get("N", 0)
    trajectories = counts.get("trajectories", 0)
    selected = counts.get("selected_records", 0)
    if not selected <= trajectories <= slots:
        raise RuntimeError(
            f"inconsistent counts: selected={selected} trajectories={trajectories} slots={slots}"
        )


def _pool_counts(pool, config: PipelineConfig, dataset_size: int) -> dict:
    error_slots = sum(pool.slot_counts(task)[1] for task in pool.tasks)
    return {
        "tasks": dataset_size,
        "K": config.k,
        "N": config.n,
        "captions": pool.caption_count(),
        "trajectories": pool.trajectory_count(),
        "error_slots": error_slots,
    }


def _warn_zero_success(pool) -> list[str]:
    flagged = pool.zero_success_task_ids()
    for task_id in flagged:
        print(f"warning: task {task_id} produced zero successful trajectories", file=sys.stderr)
    return flagged


# ---------------------------------------------------------------------------
# Pipeline commands
# ---------------------------------------------------------------------------


def cmd_make_dataset(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    world = _build_world(config)
    tasks = world.make_tasks(config.num_tasks)
    write_dataset(args.out, tasks)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    dataset = load_dataset(args.dataset)
    world = _build_world(config)
    for task in dataset:
        world.register_image(task.image_ref)
    vision = make_backend("vision", config, world)
    reasoning = make_backend("reasoning", config, world)

    manifest = _manifest(config, "sample")
    manifest["backends"] = sorted({vision.backend_id, reasoning.backend_id})
    with _StageTimer(manifest, "sample"):
        pool = collect(dataset, config, vision, reasoning)
    save_pool(args.out, pool)
    manifest["counts"] = _pool_counts(pool, config, len(dataset))
    manifest["counts"]["zero_success_tasks"] = _warn_zero_success(pool)
    write_json(args.manifest or f"{args.out}.manifest.json", manifest)
    print(
        f"sampled {manifest['counts']['captions']} captions and "
        f"{manifest['counts']['trajectories']} trajectories over {len(dataset)} tasks"
    )
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    pool = load_pool(args.pool)
    dataset = load_dataset(args.dataset)
    golds = {task.id: task.gold_answer for task in dataset}

    manifest = _manifest(config, "score")
    with _StageTimer(manifest, "score"):
        score_pool(pool, golds)
    save_pool(args.out, pool)
    scored = [t.trajectory.outcome_reward for t in _iter_traj(pool)]
    manifest["counts"] = {
        "trajectories": len(scored),
        "outcome_reward_1": sum(1 for r in scored if r == 1),
    }
    write_json(args.manifest or f"{args.out}.manifest.json", manifest)
    print(
        f"scored {len(scored)} trajectories, "
        f"{manifest['counts']['outcome_reward_1']} with outcome reward 1"
    )
    return 0


def _iter_traj(pool):
    for task in pool.tasks:
        for cap_slot in task.captions:
            for slot in cap_slot.trajectories:
                if slot.trajectory is not None:
                    yield slot


def cmd_select(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    alpha = Fraction(args.alpha) if args.alpha is not None else config.alpha
    keep_n = args.keep_n if args.keep_n is not None else config.keep_n
    pool = load_pool(args.scored)

    manifest = _manifest(config, "select")
    with _StageTimer(manifest, "select"):
        records, report = select_records(pool, alpha, keep_n)
    write_jsonl(args.out, (record.to_dict() for record in records))
    report_rows = report.to_rows()
    write_jsonl(args.report, report_rows)
    if not args.no_figures:
        from sophia.figures import render_selection_figure

        render_selection_figure(report_rows, Path(args.report).with_suffix(".png"))
    totals = report.totals()
    manifest["counts"] = {
        "tasks": len(pool.tasks),
        "K": pool.k,
        "N": pool.n,
        "trajectories": pool.trajectory_count(),
        "selected_records": len(records),
        **{k: v for k, v in totals.items() if k != "selected"},
    }
    _check_counts(manifest["counts"])
    write_json(args.manifest or f"{args.out}.manifest.json", manifest)
    print(f"selected {len(records)} records at alpha={alpha} keep_n={keep_n}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from sophia.optimizer import curriculum_from_world, train

    config = _resolve_config(args)
    world = _build_world(config)
    tasks = world.make_tasks(config.num_tasks)
    curriculum = curriculum_from_world(
        world, tasks, config.train.vocab_size, config.train.max_len
    )

    manifest = _manifest(config, "train")
    with _StageTimer(manifest, "train"):
        state, history = train(curriculum, config.train, config.seed)
    history_rows = [row.to_dict() for row in history]
    write_jsonl(args.out, history_rows)
    if not args.no_figures:
        from sophia.figures import render_history_figure

        render_history_figure(history_rows, Path(args.out).with_suffix(".png"))
    from sophia.policy import save_policy

    policy_path = args.policy_out or f"{args.out}.policy.json"
    save_policy(state.policy, policy_path)
    manifest["counts"] = {
        "rounds": config.train.rounds,
        "contexts": len(curriculum.contexts),
        "baseline_eval_reward": history[0].eval_mean_reward,
        "final_eval_reward": history[-1].eval_mean_reward,
    }
    write_json(args.manifest or f"{args.out}.manifest.json", manifest)
    print(
        f"trained {config.train.rounds} rounds: eval reward "
        f"{history[0].eval_mean_reward:.3f} -> {history[-1].eval_mean_reward:.3f}"
    )
    return 0


def cmd_e2e_stub(args: argparse.Namespace) -> int:
    from sophia.optimizer import curriculum_from_world, train

    config = _resolve_config(args)
    if config.vision.kind != "stub" or config.reasoning.kind != "stub":
        raise ConfigError("vision.kind", "e2e-stub requires stub backends for both roles")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(config, "e2e-stub")

    world = _build_world(config)
    tasks = world.make_tasks(config.num_tasks)
    write_dataset(out_dir / "dataset.jsonl", tasks)

    vision = make_backend("vision", config, world)
    reasoning = make_backend("reasoning", config, world)
    manifest["backends"] = sorted({vision.backend_id, reasoning.backend_id})

    with _StageTimer(manifest, "sample"):
        pool = collect(tasks, config, vision, reasoning)
    save_pool(out_dir / "pool.jsonl", pool)

    golds = {task.id: task.gold_answer for task in tasks}
    with _StageTimer(manifest, "score"):
        score_pool(pool, golds)
    save_pool(out_dir / "scored.jsonl", pool)

    with _StageTimer(manifest, "select"):
        records, report = select_records(pool, config.alpha, config.keep_n)
    write_jsonl(out_dir / "records.jsonl", (record.to_dict() for record in records))
    report_rows = report.to_rows()
    write_jsonl(out_dir / "report.jsonl", report_rows)

    curriculum = curriculum_from_world(
        world, tasks, config.train.vocab_size, config.train.max_len
    )
    with _StageTimer(manifest, "train"):
        state, history = train(curriculum, config.train, config.seed)
    history_rows = [row.to_dict() for row in history]
    write_jsonl(out_dir / "history.jsonl", history_rows)

    if not args.no_figures:
        from sophia.figures import render_history_figure, render_selection_figure

        render_selection_figure(report_rows, out_dir / "selection.png")
        render_history_figure(history_rows, out_dir / "training.png")

    from sophia.policy import save_policy

    save_policy(state.policy, out_dir / "policy.json")

    counts = _pool_counts(pool, config, len(tasks))
    counts["zero_success_tasks"] = _warn_zero_success(pool)
    counts["selected_records"] = len(records)
    counts["final_eval_reward"] = history[-1].eval_mean_reward
    _check_counts(counts)
    manifest["counts"] = counts
    (out_dir / "config.resolved.txt").write_text(config_to_text(config), encoding="utf-8")
    write_json(out_dir / "manifest.json", manifest)

    print(
        f"e2e: {counts['captions']} captions, {counts['trajectories']} trajectories, "
        f"{counts['selected_records']} selected, final eval reward "
        f"{counts['final_eval_reward']:.3f}"
    )
    return 0


def cmd_check_bias(args: argparse.Namespace) -> int:
    from sophia.optimizer import check_bias_bound, engineer_biased_pair

    pi, mu, achieved = engineer_biased_pair(
        vocab_size=args.vtok,
        max_len=args.maxlen,
        target_delta=args.delta,
        seed=args.seed,
    )
    report = check_bias_bound(pi, mu)
    for key, value in report.to_dict().items():
        print(f"{key} = {value}")
    print(f"engineered_delta = {achieved}")
    return 0 if report.bound_satisfied else 1


def cmd_verify_answer(args: argparse.Namespace) -> int:
    print("1" if check_equivalence(args.pred, args.gold) else "0")
    return 0


def _parse_corpus_line(line: str) -> tuple[str, str, bool] | None:
    if not line.strip() or line.lstrip().startswith("#"):
        return None
    columns = line.rstrip("\n").split("\t")
    if len(columns) < 2:
        raise ValueError(f"corpus line needs at least two tab-separated columns: {line!r}")
    pred, gold = columns[0], columns[1]
    expected = True
    if len(columns) >= 3 and columns[2].strip():
        expected = columns[2].strip() == "1"
    return pred, gold, expected


def cmd_verify_corpus(args: argparse.Namespace) -> int:
    passed = 0
    total = 0
    failures = []
    for raw_line in Path(args.corpus).read_text(encoding="utf-8").splitlines():
        parsed = _parse_corpus_line(raw_line)
        if parsed is None:
            continue
        pred, gold, expected = parsed
        total += 1
        if check_equivalence(pred, gold) == expected:
            passed += 1
        else:
            failures.append((pred, gold, expected))
    for pred, gold, expected in failures:
        print(f"FAIL: {pred!r} vs {gold!r} (expected {'equivalent' if expected else 'different'})")
    print(f"passed {passed}/{total}")
    return 0 if passed == total else 1


def cmd_export(args: argparse.Namespace) -> int:
    if args.format not in _EXPORT_FORMATS:
        print(f"error: unknown export format {args.format!r}", file=sys.stderr)
        return 2
    records = [OffPolicyRecord.from_dict(row) for row in read_jsonl(args.records)]
    rows = []
    for record in records:
        rows.append(
            {
                "system_prompt_id": record.system_prompt_id,
                "user": f"[image: {record.image_ref}]\n{record.query}",
                "assistant": record.trajectory.text,
            }
        )
    write_jsonl(args.out, rows)
    print(f"exported {len(rows)} chat rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sophia",
        description="Batch engine for a semi-off-policy reasoning data loop.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write a synthetic task dataset")
    _add_override_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("sample", help="collect captions and reasoning trajectories")
    _add_override_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="pool file to write")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("score", help="verify trajectories against gold answers")
    _add_override_flags(p)
    p.add_argument("--pool", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="scored pool file to write")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="pick threshold-passing shortest records")
    _add_override_flags(p)
    p.add_argument("--scored", required=True)
    p.add_argument("--out", required=True, help="records file to write")
    p.add_argument("--report", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="run the toy policy-gradient loop")
    _add_override_flags(p)
    p.add_argument("--out", required=True, help="history file to write")
    p.add_argument("--policy-out", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("e2e-stub", help="run sample, score, select, and train on stubs")
    _add_override_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_e2e_stub)

    p = sub.add_parser("check-bias", help="enumerate the objective-gap bound")
    p.add_argument("--vtok", type=int, default=3)
    p.add_argument("--maxlen", type=int, default=3)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_bias)

    p = sub.add_parser("verify-answer", help="check two answers for equivalence")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.set_defaults(func=cmd_verify_answer)

    p = sub.add_parser("verify-corpus", help="run a tab-separated equivalence corpus")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_verify_corpus)

    p = sub.add_parser("export", help="render records as chat-format rows")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="jsonl")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
