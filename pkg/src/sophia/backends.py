"""Text-generation backends.

Two families: a remote client speaking the common chat-completion wire
shape, and a fully deterministic synthetic environment (hidden per-image
attribute vectors, a noisy captioner, a noisy reasoner) that lets the
whole pipeline run on a desk with analytically known reward laws.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import requests

from sophia.core import TaskItem, count_tokens, derive_rng

ATTRIBUTE_DOMAIN = 10  # attribute values live in [0, ATTRIBUTE_DOMAIN)

_GOLD_QUERIES = {
    "sum": "What is the sum of all the dial readings shown in the image?",
    "max": "What is the largest dial reading shown in the image?",
    "count": "How many distinct values appear among the dial readings shown in the image?",
}


class BackendError(Exception):
    """Base class for generation failures."""


class BackendConnectionError(BackendError):
    """The endpoint could not be reached at all."""


class BackendStatusError(BackendError):
    """The endpoint answered with a non-success status code."""

    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"endpoint returned status {status}" + (f": {detail}" if detail else ""))
        self.status = status


class BackendProtocolError(BackendError):
    """The endpoint answered, but the body did not have the expected shape."""


class BackendRetryExhausted(BackendError):
    """All configured attempts failed on retryable errors."""

    def __init__(self, attempts: int, last_error: BackendError):
        super().__init__(f"gave up after {attempts} attempts: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


@dataclass(frozen=True)
class GenRequest:
    """One generation call.

    `image_ref` is an opaque reference to the image a vision request is
    about; text-only requests leave it unset. `seed` pins the sampling
    stream so identical requests reproduce identical outputs on
    backends that honor it (the stubs always do).
    """

    system_prompt: str
    user_prompt: str
    temperature: float = 1.0
    max_tokens: int = 1024
    seed: int = 0
    image_ref: str | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0.0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class GenResponse:
    text: str
    token_count: int | None
    backend_id: str
    latency_ms: int


def generate(backend, request: GenRequest) -> GenResponse:
    """Dispatch a request to any backend object with a generate method."""
    return backend.generate(request)


# ---------------------------------------------------------------------------
# Remote chat-completion client
# ---------------------------------------------------------------------------


class RemoteChatBackend:
    """Client for a chat-completion endpoint.

    The request body carries model, messages, temperature, max_tokens,
    and seed; the response text is the first choice's message content.
    Authentication comes exclusively from the environment variable named
    by `auth_env`, never from config files or CLI flags. Connection
    failures and 5xx/429 statuses are retried with exponential backoff
    and byte-identical bodies; other client errors and malformed bodies
    are surfaced immediately.
    """

    def __init__(
        self,
        url: str,
        model: str,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 30.0,
        auth_env: str = "SOPHIA_API_TOKEN",
        sleep: Callable[[float], None] = time.sleep,
        session: requests.Session | None = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.url = url
        self.model = model
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.auth_env = auth_env
        self.backend_id = f"remote:{model}"
        self._sleep = sleep
        self._session = session or requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _body(self, request: GenRequest) -> bytes:
        content = request.user_prompt
        if request.image_ref is not None:
            # Images travel as opaque references; attaching real pixels
            # is out of scope for this client.
            content = f"[image: {request.image_ref}]\n{content}"
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": content},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "seed": request.seed,
        }
        return json.dumps(body, ensure_ascii=False).encode("utf-8")

    def _parse(self, raw: bytes, elapsed_ms: int) -> GenResponse:
        try:
            data = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BackendProtocolError(f"response body is not JSON: {exc}") from None
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise BackendProtocolError("response body lacks choices[0].message.content") from None
        if not isinstance(text, str):
            raise BackendProtocolError("message content is not a string")
        token_count = None
        usage = data.get("usage")
        if isinstance(usage, dict) and isinstance(usage.get("completion_tokens"), int):
            token_count = usage["completion_tokens"]
        return GenResponse(
            text=text,
            token_count=token_count,
            backend_id=self.backend_id,
            latency_ms=elapsed_ms,
        )

    def generate(self, request: GenRequest) -> GenResponse:
        payload = self._body(request)
        headers = self._headers()
        last_error: BackendError | None = None
        for attempt in range(1, self.max_attempts + 1):
            started = time.monotonic()
            retryable = False
            try:
                resp = self._session.post(
                    self.url, data=payload, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = BackendConnectionError(str(exc))
                retryable = True
            else:
                elapsed_ms = int((time.monotonic() - started) * 1000)
                if 200 <= resp.status_code < 300:
                    return self._parse(resp.content, elapsed_ms)
                last_error = BackendStatusError(resp.status_code, resp.text[:200])
                retryable = resp.status_code >= 500 or resp.status_code == 429
            if not retryable:
                raise last_error
            if attempt == self.max_attempts:
                if self.max_attempts == 1:
                    raise last_error
                raise BackendRetryExhausted(attempt, last_error) from last_error
            self._sleep(self.backoff_base * (2 ** (attempt - 1)))
        raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Synthetic environment
# ---------------------------------------------------------------------------


class UnknownImageError(KeyError):
    """An image_ref was requested that this world never issued."""


@dataclass
class SyntheticWorld:
    """A deterministic image world with analytically known rewards.

    Each issued image carries a hidden vector of `attr_count` readings
    in [0, 10), derived from (seed, image_ref) alone. Captions report
    the readings, each independently corrupted with probability
    1 - caption_fidelity; a corrupted reading is shifted by one, wrapping
    inside the domain, so no combination of corruptions can preserve the
    sum of the readings. The reasoner answers the configured gold
    function over whatever the caption claims and, with probability
    1 - reasoner_skill, slips by one.
    """

    seed: int
    attr_count: int = 4
    caption_fidelity: float = 1.0
    reasoner_skill: float = 1.0
    gold_fn: str = "sum"
    _refs: set = field(default_factory=set, repr=False)

    def __post_init__(self):
        if self.attr_count < 1:
            raise ValueError("attr_count must be >= 1")
        if self.gold_fn not in _GOLD_QUERIES:
            raise ValueError(f"gold_fn must be one of {tuple(_GOLD_QUERIES)}")

    def register_image(self, image_ref: str) -> None:
        self._refs.add(image_ref)

    def attributes(self, image_ref: str) -> tuple[int, ...]:
        if image_ref not in self._refs:
            raise UnknownImageError(image_ref)
        rng = derive_rng(self.seed, "world-attrs", image_ref)
        return tuple(int(v) for v in rng.integers(0, ATTRIBUTE_DOMAIN, size=self.attr_count))

    def decoy(self, value: int) -> int:
        """The wrong reading a corrupted attribute reports.

        Shifting by exactly one (wrapping at the domain edge) keeps every
        decoy distinct from the true value while making it impossible for
        any subset of corruptions to cancel in the sum: a subset of k
        corruptions with j wraps changes the sum by k - 10j, which is
        nonzero whenever 0 < k < 10.
        """
        return (value + 1) % ATTRIBUTE_DOMAIN

    def corrupt(self, values: Sequence[int], mask: Sequence[bool]) -> tuple[int, ...]:
        return tuple(
            self.decoy(v) if corrupted else v for v, corrupted in zip(values, mask)
        )

    def gold_value(self, values: Sequence[int]) -> int:
        if self.gold_fn == "sum":
            return sum(values)
        if self.gold_fn == "max":
            return max(values)
        # count = how many distinct readings appear
        return len(set(values))

    def gold_answer(self, image_ref: str) -> str:
        return str(self.gold_value(self.attributes(image_ref)))

    def query_text(self) -> str:
        return _GOLD_QUERIES[self.gold_fn]

    def make_tasks(self, num_tasks: int) -> list[TaskItem]:
        """Issue `num_tasks` image-query pairs with their gold answers."""
        tasks = []
        for i in range(num_tasks):
            ref = f"img-{i:04d}"
            self.register_image(ref)
            tasks.append(
                TaskItem(
                    id=f"task-{i:04d}",
                    image_ref=ref,
                    query=self.query_text(),
                    gold_answer=self.gold_answer(ref),
                )
            )
        return tasks


def render_caption(values: Sequence[int]) -> str:
    """Render attribute readings as the caption the stub vision model emits."""
    parts = [
        f"The image shows a row of {len(values)} numbered dials on a gray panel."
    ]
    for i, v in enumerate(values, start=1):
        parts.append(f"Dial {i} shows {v}.")
    parts.append("Nothing else is visible in the image.")
    return " ".join(parts)


_DIAL_RE = re.compile(r"[Dd]ial\s+(\d+)\s+shows\s+(\d+)")
_DESCRIPTION_RE = re.compile(r"<description>(.*?)</description>", re.DOTALL)


def parse_caption_values(text: str) -> list[int]:
    """Recover the readings a caption claims, in dial order."""
    readings: dict[int, int] = {}
    for match in _DIAL_RE.finditer(text):
        readings[int(match.group(1))] = int(match.group(2))
    return [readings[k] for k in sorted(readings)]


def sample_corruption_mask(rng: np.random.Generator, attr_count: int, fidelity: float) -> list[bool]:
    """Draw which attributes a caption mis-reports.

    One uniform draw per attribute, in attribute order, so the mask for
    a given stream is stable however it is consumed afterwards.
    """
    return [float(rng.random()) >= fidelity for _ in range(attr_count)]


def stub_vision_caption(world: SyntheticWorld, image_ref: str, rng: np.random.Generator) -> str:
    """Generate a caption for an issued image, with fidelity noise."""
    values = world.attributes(image_ref)
    mask = sample_corruption_mask(rng, world.attr_count, world.caption_fidelity)
    return render_caption(world.corrupt(values, mask))


_FILLER_SENTENCES = (
    "Let me look back at the description and re-check each reading before committing.",
    "I re-read the description once more; the readings are as quoted above.",
    "Double-checking the arithmetic step by step confirms the same result.",
    "I pause to verify I did not skip a dial; the count matches the description.",
    "One more pass over the quoted values shows nothing was misread.",
)


def _reasoning_body(world: SyntheticWorld, values: Sequence[int], answer: int) -> tuple[str, str]:
    listed = ", ".join(str(v) for v in values)
    if world.gold_fn == "sum":
        work = f"I add them: {' + '.join(str(v) for v in values)} = {answer}."
        conclusion = f"the readings are {listed}, and their sum is {answer}"
    elif world.gold_fn == "max":
        work = f"Scanning for the largest value among {listed} gives {answer}."
        conclusion = f"the readings are {listed}, and the largest is {answer}"
    else:
        work = f"Collecting the distinct values among {listed} leaves {answer} of them."
        conclusion = f"the readings are {listed}, with {answer} distinct values"
    return work, conclusion


def stub_reasoner(world: SyntheticWorld, prompt: str, rng: np.random.Generator) -> str:
    """Answer a reasoning prompt from the caption embedded in it.

    The caption is the model's only view of the image: the answer is the
    gold function over the values the caption claims, not the true ones.
    Draw order from the stream is fixed: slip indicator, slip direction,
    filler count.
    """
    slip = float(rng.random()) >= world.reasoner_skill
    direction = -1 if float(rng.random()) < 0.5 else 1
    filler_count = int(rng.integers(0, 6))

    blocks = _DESCRIPTION_RE.findall(prompt)
    source = blocks[-1] if blocks else ""
    values = parse_caption_values(source)
    if not values:
        return (
            "<think> The description does not report any dial readings, so there is "
            "nothing to compute with. </think> I cannot determine the readings from "
            "this description."
        )

    answer = world.gold_value(values)
    if slip:
        answer += direction
    work, conclusion = _reasoning_body(world, values, answer)
    filler = " ".join(_FILLER_SENTENCES[i % len(_FILLER_SENTENCES)] for i in range(filler_count))
    think = f"The description lists the dial readings: {', '.join(str(v) for v in values)}. {work}"
    if filler:
        think = f"{think} {filler}"
    return (
        f"<think> {think} </think> Based on the description, {conclusion}.\n"
        f"The final answer is \\boxed{{{answer}}}."
    )


def _truncate(text: str, max_tokens: int) -> str:
    tokens = text.split()
    if len(tokens) <= max_tokens:
        return text
    return " ".join(tokens[:max_tokens])


class StubVisionBackend:
    """Deterministic captioner over a synthetic world."""

    def __init__(self, world: SyntheticWorld):
        self.world = world
        self.backend_id = "stub-vision"

    def generate(self, request: GenRequest) -> GenResponse:
        if request.image_ref is None:
            raise UnknownImageError("vision request carries no image_ref")
        rng = derive_rng(request.seed, "stub-vision")
        text = _truncate(
            stub_vision_caption(self.world, request.image_ref, rng), request.max_tokens
        )
        return GenResponse(
            text=text,
            token_count=count_tokens(text),
            backend_id=self.backend_id,
            latency_ms=0,
        )


class StubReasonerBackend:
    """Deterministic reasoner over a synthetic world."""

    def __init__(self, world: SyntheticWorld):
        self.world = world
        self.backend_id = "stub-reasoner"

    def generate(self, request: GenRequest) -> GenResponse:
        rng = derive_rng(request.seed, "stub-reasoner")
        text = _truncate(stub_reasoner(self.world, request.user_prompt, rng), request.max_tokens)
        return GenResponse(
            text=text,
            token_count=count_tokens(text),
            backend_id=self.backend_id,
            latency_ms=0,
        )


def make_backend(role: str, config, world: SyntheticWorld):
    """Build the backend for a pipeline role from its config section."""
    backend_cfg = getattr(config, role)
    if backend_cfg.kind == "stub":
        if role == "vision":
            return StubVisionBackend(world)
        return StubReasonerBackend(world)
    return RemoteChatBackend(
        url=backend_cfg.url,
        model=backend_cfg.model,
        max_attempts=backend_cfg.max_attempts,
        backoff_base=backend_cfg.backoff_base,
        timeout=backend_cfg.timeout,
        auth_env=backend_cfg.auth_env,
    )
