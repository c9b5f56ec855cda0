"""Shared domain types, configuration, seeded RNG streams, and record I/O.

Everything downstream builds on the types defined here: tasks, captions,
reasoning trajectories, selected training records, and the pipeline
configuration. Records serialize to line-delimited JSON, one object per
line, using exactly the field names given in the type definitions.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

ENGINE_VERSION = "0.1.0"

WHITESPACE = "whitespace"
BACKEND_REPORTED = "backend_reported"
TOKENIZATION_RULES = (WHITESPACE, BACKEND_REPORTED)

SLOW_THINKING = "slow_thinking"
DEFAULT_PROMPT = "default"
SYSTEM_PROMPT_IDS = (SLOW_THINKING, DEFAULT_PROMPT)

GOLD_FNS = ("sum", "max", "count")
BACKEND_KINDS = ("stub", "remote")


class ConfigError(ValueError):
    """A config file failed to parse or violates an invariant.

    The message always names the offending key so a bad run can be
    traced back to one line of the file.
    """

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


def derive_seed(*parts: Any) -> int:
    """Derive a stable 64-bit seed from a sequence of labels.

    Labels are usually caller-supplied identifiers (task ids, slot
    indices). Hashing them means the stream for one item never depends
    on how many other items were processed before it.
    """
    canon = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(canon.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(*parts: Any) -> np.random.Generator:
    """Build an independent RNG stream keyed by the given labels."""
    return np.random.default_rng(derive_seed(*parts))


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------


def count_tokens(text: str, rule: str = WHITESPACE, reported: int | None = None) -> int:
    """Count tokens of `text` under the configured rule.

    The whitespace rule counts maximal runs of non-whitespace characters.
    The backend_reported rule trusts the generating backend's count when
    one was reported and falls back to the whitespace rule otherwise.
    """
    if rule not in TOKENIZATION_RULES:
        raise ValueError(f"unknown tokenization rule {rule!r}")
    if rule == BACKEND_REPORTED and reported is not None:
        if reported < 0:
            raise ValueError("reported token count must be non-negative")
        return reported
    return len(text.split())


# ---------------------------------------------------------------------------
# Domain records
# ---------------------------------------------------------------------------


def _encode_fraction(value: Fraction | None) -> str | None:
    return None if value is None else str(value)


def _decode_fraction(value: str | None) -> Fraction | None:
    return None if value is None else Fraction(value)


@dataclass(frozen=True)
class TaskItem:
    """One image-query pair with its verifiable gold answer."""

    id: str
    image_ref: str
    query: str
    gold_answer: str

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_ref": self.image_ref,
            "query": self.query,
            "gold_answer": self.gold_answer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskItem":
        return cls(
            id=d["id"],
            image_ref=d["image_ref"],
            query=d["query"],
            gold_answer=d["gold_answer"],
        )


@dataclass(frozen=True)
class Caption:
    """A sampled image description and its propagated reward.

    `reward`, when set, is the exact rational fraction of this caption's
    successfully generated trajectories that earned outcome reward 1.
    """

    task_id: str
    index: int
    text: str
    reward: Fraction | None = None
    backend_id: str = ""

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "index": self.index,
            "text": self.text,
            "reward": _encode_fraction(self.reward),
            "backend_id": self.backend_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Caption":
        return cls(
            task_id=d["task_id"],
            index=d["index"],
            text=d["text"],
            reward=_decode_fraction(d.get("reward")),
            backend_id=d.get("backend_id", ""),
        )


@dataclass(frozen=True)
class Trajectory:
    """One reasoning rollout generated from a caption."""

    task_id: str
    caption_index: int
    index: int
    text: str
    extracted_answer: str | None = None
    outcome_reward: int | None = None
    length_tokens: int = 0
    has_think_tag: bool = False
    backend_id: str = ""

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "caption_index": self.caption_index,
            "index": self.index,
            "text": self.text,
            "extracted_answer": self.extracted_answer,
            "outcome_reward": self.outcome_reward,
            "length_tokens": self.length_tokens,
            "has_think_tag": self.has_think_tag,
            "backend_id": self.backend_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            task_id=d["task_id"],
            caption_index=d["caption_index"],
            index=d["index"],
            text=d["text"],
            extracted_answer=d.get("extracted_answer"),
            outcome_reward=d.get("outcome_reward"),
            length_tokens=d.get("length_tokens", 0),
            has_think_tag=d.get("has_think_tag", False),
            backend_id=d.get("backend_id", ""),
        )


@dataclass(frozen=True)
class OffPolicyRecord:
    """A selected trajectory packaged for training or export.

    System prompt routing depends on the trajectory text: rollouts that
    carry a <think> section are tagged slow_thinking, everything else
    gets the default prompt id.
    """

    task_id: str
    query: str
    image_ref: str
    caption_index: int
    trajectory: Trajectory
    dataset_reward: int
    system_prompt_id: str

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "query": self.query,
            "image_ref": self.image_ref,
            "caption_index": self.caption_index,
            "trajectory": self.trajectory.to_dict(),
            "dataset_reward": self.dataset_reward,
            "system_prompt_id": self.system_prompt_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OffPolicyRecord":
        return cls(
            task_id=d["task_id"],
            query=d["query"],
            image_ref=d["image_ref"],
            caption_index=d["caption_index"],
            trajectory=Trajectory.from_dict(d["trajectory"]),
            dataset_reward=d["dataset_reward"],
            system_prompt_id=d["system_prompt_id"],
        )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StubWorldConfig:
    """Parameters of the synthetic image environment."""

    attr_count: int = 4
    caption_fidelity: float = 1.0
    reasoner_skill: float = 1.0
    gold_fn: str = "sum"


@dataclass(frozen=True)
class BackendConfig:
    """Where a generation role (vision or reasoning) sends its requests."""

    kind: str = "stub"
    url: str = ""
    model: str = ""
    temperature: float = 1.0
    max_attempts: int = 3
    backoff_base: float = 1.0
    timeout: float = 30.0
    auth_env: str = "SOPHIA_API_TOKEN"


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale settings for the toy training loop."""

    learning_rate: float = 0.1
    rounds: int = 50
    vocab_size: int = 4
    max_len: int = 4
    window: int = 2
    rollouts: int = 8
    alpha: Fraction = Fraction(0)
    keep_n: int = 1
    batch_size: int = 0
    divergence_cap: float = 50.0
    adaptive: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved settings for one batch run.

    `k` is the number of captions sampled per image and `n` the number of
    reasoning rollouts per caption; the file keys are spelled K and N.
    """

    k: int = 8
    n: int = 8
    alpha: Fraction = Fraction(3, 4)
    keep_n: int = 1
    max_gen_tokens: int = 32768
    seed: int = 7
    parallelism: int = 4
    tokenization_rule: str = WHITESPACE
    num_tasks: int = 12
    stub: StubWorldConfig = field(default_factory=StubWorldConfig)
    vision: BackendConfig = field(default_factory=BackendConfig)
    reasoning: BackendConfig = field(default_factory=BackendConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError("K", f"must be >= 1, got {self.k}")
        if self.n < 1:
            raise ConfigError("N", f"must be >= 1, got {self.n}")
        if not (Fraction(0) < self.alpha < Fraction(1)):
            raise ConfigError("alpha", f"must lie strictly between 0 and 1, got {self.alpha}")
        if self.keep_n < 1:
            raise ConfigError("keep_n", f"must be >= 1, got {self.keep_n}")
        if self.max_gen_tokens < 1:
            raise ConfigError("max_gen_tokens", f"must be >= 1, got {self.max_gen_tokens}")
        if not (-(2**63) <= self.seed < 2**64):
            raise ConfigError("seed", "must fit in 64 bits")
        if self.parallelism < 1:
            raise ConfigError("parallelism", f"must be >= 1, got {self.parallelism}")
        if self.tokenization_rule not in TOKENIZATION_RULES:
            raise ConfigError(
                "tokenization_rule",
                f"must be one of {TOKENIZATION_RULES}, got {self.tokenization_rule!r}",
            )
        if self.num_tasks < 1:
            raise ConfigError("num_tasks", f"must be >= 1, got {self.num_tasks}")
        if self.stub.attr_count < 1:
            raise ConfigError("stub.attr_count", f"must be >= 1, got {self.stub.attr_count}")
        if not 0.0 <= self.stub.caption_fidelity <= 1.0:
            raise ConfigError("stub.caption_fidelity", "must lie in [0, 1]")
        if not 0.0 <= self.stub.reasoner_skill <= 1.0:
            raise ConfigError("stub.reasoner_skill", "must lie in [0, 1]")
        if self.stub.gold_fn not in GOLD_FNS:
            raise ConfigError("stub.gold_fn", f"must be one of {GOLD_FNS}")
        for role, backend in (("vision", self.vision), ("reasoning", self.reasoning)):
            if backend.kind not in BACKEND_KINDS:
                raise ConfigError(f"{role}.kind", f"must be one of {BACKEND_KINDS}")
            if backend.kind == "remote" and not backend.url:
                raise ConfigError(f"{role}.url", "required when kind is remote")
            if backend.max_attempts < 1:
                raise ConfigError(f"{role}.max_attempts", "must be >= 1")
            if backend.temperature < 0.0:
                raise ConfigError(f"{role}.temperature", "must be >= 0")
        if self.train.learning_rate < 0.0:
            raise ConfigError("train.learning_rate", "must be >= 0")
        if self.train.rounds < 1:
            raise ConfigError("train.rounds", f"must be >= 1, got {self.train.rounds}")
        if self.train.vocab_size < 2 or self.train.vocab_size > 16:
            raise ConfigError("train.vocab_size", "must lie in [2, 16]")
        if self.train.max_len < 1 or self.train.max_len > 6:
            raise ConfigError("train.max_len", "must lie in [1, 6]")
        if self.train.window < 0:
            raise ConfigError("train.window", "must be >= 0")
        if self.train.rollouts < 1:
            raise ConfigError("train.rollouts", "must be >= 1")
        if not (Fraction(0) <= self.train.alpha < Fraction(1)):
            raise ConfigError("train.alpha", "must lie in [0, 1)")
        if self.train.keep_n < 1:
            raise ConfigError("train.keep_n", "must be >= 1")
        if self.train.batch_size < 0:
            raise ConfigError("train.batch_size", "must be >= 0 (0 means full batch)")
        if self.train.divergence_cap <= 0.0:
            raise ConfigError("train.divergence_cap", "must be > 0")


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_fraction(raw: str) -> Fraction:
    # Fraction() parses both "3/4" and decimal strings like "0.75" exactly.
    return Fraction(raw.strip())


# File key -> (config section, attribute, parser). Top-level keys use
# section None. K and N keep their file spelling.
_CONFIG_KEYS: dict[str, tuple[str | None, str, Any]] = {
    "K": (None, "k", int),
    "N": (None, "n", int),
    "alpha": (None, "alpha", _parse_fraction),
    "keep_n": (None, "keep_n", int),
    "max_gen_tokens": (None, "max_gen_tokens", int),
    "seed": (None, "seed", int),
    "parallelism": (None, "parallelism", int),
    "tokenization_rule": (None, "tokenization_rule", str),
    "num_tasks": (None, "num_tasks", int),
    "stub.attr_count": ("stub", "attr_count", int),
    "stub.caption_fidelity": ("stub", "caption_fidelity", float),
    "stub.reasoner_skill": ("stub", "reasoner_skill", float),
    "stub.gold_fn": ("stub", "gold_fn", str),
    "vision.kind": ("vision", "kind", str),
    "vision.url": ("vision", "url", str),
    "vision.model": ("vision", "model", str),
    "vision.temperature": ("vision", "temperature", float),
    "vision.max_attempts": ("vision", "max_attempts", int),
    "vision.backoff_base": ("vision", "backoff_base", float),
    "vision.timeout": ("vision", "timeout", float),
    "vision.auth_env": ("vision", "auth_env", str),
    "reasoning.kind": ("reasoning", "kind", str),
    "reasoning.url": ("reasoning", "url", str),
    "reasoning.model": ("reasoning", "model", str),
    "reasoning.temperature": ("reasoning", "temperature", float),
    "reasoning.max_attempts": ("reasoning", "max_attempts", int),
    "reasoning.backoff_base": ("reasoning", "backoff_base", float),
    "reasoning.timeout": ("reasoning", "timeout", float),
    "reasoning.auth_env": ("reasoning", "auth_env", str),
    "train.learning_rate": ("train", "learning_rate", float),
    "train.rounds": ("train", "rounds", int),
    "train.vocab_size": ("train", "vocab_size", int),
    "train.max_len": ("train", "max_len", int),
    "train.window": ("train", "window", int),
    "train.rollouts": ("train", "rollouts", int),
    "train.alpha": ("train", "alpha", _parse_fraction),
    "train.keep_n": ("train", "keep_n", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.divergence_cap": ("train", "divergence_cap", float),
    "train.adaptive": ("train", "adaptive", _parse_bool),
}


def parse_config_text(text: str, source: str = "<string>") -> PipelineConfig:
    """Parse plain-text `key = value` lines into a validated config.

    Blank lines and lines starting with '#' are skipped. Unknown keys,
    unparseable values, and invariant violations all raise ConfigError
    naming the offending key. Omitted keys keep their defaults.
    """
    sections: dict[str | None, dict[str, Any]] = {
        None: {},
        "stub": {},
        "vision": {},
        "reasoning": {},
        "train": {},
    }
    seen: set[str] = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(line.split()[0], f"{source}:{lineno}: expected 'key = value'")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(key, f"{source}:{lineno}: unknown key")
        if key in seen:
            raise ConfigError(key, f"{source}:{lineno}: duplicate key")
        seen.add(key)
        section, attr, parser = _CONFIG_KEYS[key]
        try:
            value = parser(raw_value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(key, f"{source}:{lineno}: bad value {raw_value!r} ({exc})") from None
        sections[section][attr] = value

    config = PipelineConfig(
        stub=StubWorldConfig(**sections["stub"]),
        vision=BackendConfig(**sections["vision"]),
        reasoning=BackendConfig(**sections["reasoning"]),
        train=TrainConfig(**sections["train"]),
        **sections[None],
    )
    config.validate()
    return config


def load_config(path: str | Path) -> PipelineConfig:
    """Load and validate a plain-text key-value config file."""
    return parse_config_text(Path(path).read_text(encoding="utf-8"), source=str(path))


def config_to_text(config: PipelineConfig) -> str:
    """Render a config back to canonical key-value lines.

    The rendering covers every known key in a fixed order, so two equal
    configs always produce identical text. Used for hashing and for
    writing resolved configs next to run outputs.
    """
    lines = []
    for key, (section, attr, _) in _CONFIG_KEYS.items():
        holder = config if section is None else getattr(config, section)
        value = getattr(holder, attr)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"


def config_hash(config: PipelineConfig) -> str:
    """Stable hex digest of the fully resolved configuration."""
    return hashlib.sha256(config_to_text(config).encode("utf-8")).hexdigest()


def config_replace(config: PipelineConfig, **overrides: Any) -> PipelineConfig:
    """Return a validated copy of `config` with top-level fields replaced."""
    updated = replace(config, **overrides)
    updated.validate()
    return updated


# ---------------------------------------------------------------------------
# Record I/O
# ---------------------------------------------------------------------------


def dumps_record(row: dict) -> str:
    return json.dumps(row, ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    """Write rows as line-delimited JSON, atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(dumps_record(row))
            handle.write("\n")
    os.replace(tmp, path)


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with Path(path).open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_dataset(path: str | Path) -> list[TaskItem]:
    """Read a task dataset, enforcing unique ids and present gold answers."""
    tasks = [TaskItem.from_dict(row) for row in read_jsonl(path)]
    if not tasks:
        raise ValueError(f"dataset {path} is empty")
    seen: set[str] = set()
    for task in tasks:
        if task.id in seen:
            raise ValueError(f"dataset {path} has duplicate task id {task.id!r}")
        seen.add(task.id)
        if not task.gold_answer:
            raise ValueError(f"task {task.id!r} has an empty gold answer")
    return tasks


def write_dataset(path: str | Path, tasks: Iterable[TaskItem]) -> None:
    write_jsonl(path, (task.to_dict() for task in tasks))
