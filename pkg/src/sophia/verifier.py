"""Rule-based answer extraction and equivalence checking.

Extraction prefers an explicit boxed marker, then falls back to textual
cues like "final answer is". Parsed answers are compared exactly as
rationals wherever exactness is possible; a decimal matched against a
rational with a non-terminating expansion is accepted within a small
relative tolerance, since such a decimal can only ever be a rounding.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Any

INTEGER = "integer"
RATIONAL = "rational"
DECIMAL = "decimal"
INTERVAL = "interval"
TUPLE = "tuple"
RAW_STRING = "raw_string"

DEFAULT_CUES = ("final answer is", "answer:")

# Relative tolerance for a decimal against a rational whose decimal
# expansion does not terminate. Kept exact so boundary cases are stable.
REL_TOLERANCE = Fraction(1, 10000)

_THINK_RE = re.compile(r"<think>(.*?)(?:</think>|\Z)", re.DOTALL)
_INT_RE = re.compile(r"[+-]?\d+\Z")
_DECIMAL_RE = re.compile(r"[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?\Z")
_FRACTION_RE = re.compile(r"([+-]?\d+)\s*/\s*([+-]?\d+)\Z")


@dataclass(frozen=True)
class Interval:
    """A numeric interval with independent endpoint closedness."""

    lo: "AnswerExpr"
    hi: "AnswerExpr"
    closed_lo: bool
    closed_hi: bool


@dataclass(frozen=True)
class AnswerExpr:
    """A parsed answer in canonical form.

    kind is one of integer, rational, decimal, interval, tuple, or
    raw_string. Values: int for integer, Fraction (reduced, positive
    denominator) for rational, Decimal (exact digits and exponent) for
    decimal, Interval for interval, tuple of AnswerExpr for tuple, and
    the whitespace-stripped case-folded string for raw_string.
    """

    kind: str
    value: Any

    @property
    def negative(self) -> bool:
        """Sign of the value, where the kind has one."""
        if self.kind == INTEGER:
            return self.value < 0
        if self.kind == RATIONAL:
            return self.value < 0
        if self.kind == DECIMAL:
            return self.value < 0
        return False


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def _balanced_group(text: str, open_idx: int) -> str | None:
    """Return the contents of the brace group opening at `open_idx`."""
    depth = 0
    for pos in range(open_idx, len(text)):
        ch = text[pos]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[open_idx + 1 : pos]
    return None


def _last_boxed(text: str) -> str | None:
    marker = "\\boxed{"
    start = text.rfind(marker)
    while start != -1:
        content = _balanced_group(text, start + len(marker) - 1)
        if content is not None:
            inner = _last_boxed(content)
            return inner if inner is not None else content
        start = text.rfind(marker, 0, start)
    return None


def _clean_extracted(candidate: str) -> str | None:
    candidate = candidate.strip()
    if len(candidate) >= 4 and candidate.startswith("**") and candidate.endswith("**"):
        candidate = candidate[2:-2].strip()
    if len(candidate) >= 2 and candidate.startswith("$") and candidate.endswith("$"):
        candidate = candidate[1:-1].strip()
    candidate = candidate.rstrip(".,;:!").strip()
    return candidate or None


def _extract_from_segment(segment: str, cues: tuple[str, ...]) -> str | None:
    boxed = _last_boxed(segment)
    if boxed is not None:
        return _clean_extracted(boxed)
    lowered = segment.lower()
    best = -1
    best_end = -1
    for cue in cues:
        pos = lowered.rfind(cue.lower())
        if pos > best:
            best = pos
            best_end = pos + len(cue)
    if best == -1:
        return None
    line_end = segment.find("\n", best_end)
    if line_end == -1:
        line_end = len(segment)
    return _clean_extracted(segment[best_end:line_end])


def extract_answer(text: str, cues: tuple[str, ...] = DEFAULT_CUES) -> str | None:
    """Pull the stated final answer out of a reasoning trajectory.

    The last boxed marker wins; with no boxed marker, the remainder of
    the line after the last answer cue is used. Text outside any
    <think>...</think> span is searched first, and the spans themselves
    are consulted only when the outside text yields nothing. Returns
    None when no answer can be found.
    """
    if not isinstance(text, str) or not text:
        return None
    outside = _THINK_RE.sub(" ", text)
    inside = " ".join(match.group(1) for match in _THINK_RE.finditer(text))
    for segment in (outside, inside):
        found = _extract_from_segment(segment, cues)
        if found is not None:
            return found
    return None


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _split_top_level(text: str) -> list[str]:
    """Split on commas that sit outside any bracket pair."""
    parts = []
    depth = 0
    current = []
    for ch in text:
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
    parts.append("".join(current))
    return parts


def _wraps_whole(text: str, open_ch: str, close_ch: str) -> bool:
    if len(text) < 2 or text[0] != open_ch or text[-1] != close_ch:
        return False
    depth = 0
    for pos, ch in enumerate(text):
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
            if depth == 0 and pos != len(text) - 1:
                return False
    return depth == 0


def _parse_numeric(text: str) -> AnswerExpr | None:
    text = text.strip()
    if not text:
        return None
    if text.endswith("%"):
        inner = _parse_numeric(text[:-1])
        if inner is None or inner.kind not in (INTEGER, RATIONAL, DECIMAL):
            return None
        if inner.kind == DECIMAL:
            # Dividing a decimal by 100 only shifts its exponent, so the
            # value stays a decimal and keeps rounded-rendering tolerance
            # against non-terminating rationals.
            try:
                return AnswerExpr(DECIMAL, inner.value.scaleb(-2))
            except InvalidOperation:
                return None
        return AnswerExpr(RATIONAL, _as_fraction(inner) / 100)
    match = _FRACTION_RE.match(text)
    if match:
        num, den = int(match.group(1)), int(match.group(2))
        if den == 0:
            return None
        return AnswerExpr(RATIONAL, Fraction(num, den))
    if _INT_RE.match(text):
        return AnswerExpr(INTEGER, int(text))
    if _DECIMAL_RE.match(text):
        try:
            return AnswerExpr(DECIMAL, Decimal(text))
        except InvalidOperation:
            return None
    return None


def _raw(text: str) -> AnswerExpr:
    # Whitespace is removed entirely so spacing never separates
    # otherwise identical symbolic answers.
    normalized = "".join(text.split()).casefold()
    return AnswerExpr(RAW_STRING, normalized)


def parse_answer(text: str) -> AnswerExpr:
    """Parse an answer string into canonical form.

    Recognized forms: integers, fractions "p/q", decimals with optional
    exponent, any of those with a trailing percent sign (divided by
    100), comma-separated tuples, and bracketed intervals such as
    "[0, 1)" where at least one end uses a square bracket. A fully
    parenthesized pair "(a, b)" is a tuple, not an open interval.
    Anything else becomes a raw string, whitespace-removed and
    case-folded.
    """
    if not isinstance(text, str):
        text = str(text)
    return _parse(text)


def _parse(text: str) -> AnswerExpr:
    stripped = text.strip()
    if len(stripped) >= 2 and stripped.startswith("$") and stripped.endswith("$"):
        stripped = stripped[1:-1].strip()
    if not stripped:
        return _raw(stripped)

    numeric = _parse_numeric(stripped)
    if numeric is not None:
        return numeric

    interval = _parse_interval(stripped)
    if interval is not None:
        return interval

    parts = _split_top_level(stripped)
    if len(parts) == 1 and _wraps_whole(stripped, "(", ")"):
        return _parse(stripped[1:-1])
    if len(parts) > 1:
        inner = stripped
        if _wraps_whole(stripped, "(", ")"):
            inner = stripped[1:-1]
            parts = _split_top_level(inner)
        if all(part.strip() for part in parts):
            return AnswerExpr(TUPLE, tuple(_parse(part) for part in parts))

    return _raw(stripped)


def _parse_interval(text: str) -> AnswerExpr | None:
    if len(text) < 2 or text[0] not in "([" or text[-1] not in ")]":
        return None
    if text[0] == "(" and text[-1] == ")":
        # "(a, b)" is a tuple by convention; intervals need a square
        # bracket on at least one end.
        return None
    if not _wraps_whole(text, text[0], text[-1]):
        return None
    parts = _split_top_level(text[1:-1])
    if len(parts) != 2:
        return None
    lo = _parse_numeric(parts[0].strip())
    hi = _parse_numeric(parts[1].strip())
    if lo is None or hi is None:
        return None
    return AnswerExpr(
        INTERVAL,
        Interval(lo=lo, hi=hi, closed_lo=text[0] == "[", closed_hi=text[-1] == "]"),
    )


# ---------------------------------------------------------------------------
# Equivalence
# ---------------------------------------------------------------------------


def _as_fraction(expr: AnswerExpr) -> Fraction:
    if expr.kind == INTEGER:
        return Fraction(expr.value)
    if expr.kind == RATIONAL:
        return expr.value
    if expr.kind == DECIMAL:
        return Fraction(expr.value)
    raise TypeError(f"not a numeric kind: {expr.kind}")


def _terminating(value: Fraction) -> bool:
    """Whether the rational has a finite decimal expansion."""
    den = value.denominator
    for base in (2, 5):
        while den % base == 0:
            den //= base
    return den == 1


def _numeric_equal(a: AnswerExpr, b: AnswerExpr) -> bool:
    fa, fb = _as_fraction(a), _as_fraction(b)
    decimal_sides = (a.kind == DECIMAL, b.kind == DECIMAL)
    if decimal_sides == (True, False) or decimal_sides == (False, True):
        exact_side = fb if a.kind == DECIMAL else fa
        if not _terminating(exact_side):
            # The decimal is necessarily a rounded rendering; accept it
            # within the relative tolerance, computed exactly.
            return abs(fa - fb) <= REL_TOLERANCE * abs(exact_side)
    return fa == fb


def _expr_equal(a: AnswerExpr, b: AnswerExpr) -> bool:
    numeric_kinds = (INTEGER, RATIONAL, DECIMAL)
    if a.kind in numeric_kinds and b.kind in numeric_kinds:
        return _numeric_equal(a, b)
    if a.kind != b.kind:
        return False
    if a.kind == TUPLE:
        if len(a.value) != len(b.value):
            return False
        return all(_expr_equal(x, y) for x, y in zip(a.value, b.value))
    if a.kind == INTERVAL:
        ia, ib = a.value, b.value
        return (
            ia.closed_lo == ib.closed_lo
            and ia.closed_hi == ib.closed_hi
            and _numeric_equal(ia.lo, ib.lo)
            and _numeric_equal(ia.hi, ib.hi)
        )
    return a.value == b.value


def check_equivalence(pred: str, gold: str) -> bool:
    """Decide whether two answer strings denote the same answer.

    Symmetric in its arguments. Numeric comparisons are exact except for
    the decimal-versus-non-terminating-rational case described in the
    module docstring.
    """
    return _expr_equal(parse_answer(pred), parse_answer(gold))


def score_with_extraction(trajectory_text: str, gold_answer: str) -> tuple[str | None, int]:
    """Extract a trajectory's answer and score it against the gold one.

    Never raises on arbitrary input; anything that cannot be extracted
    or compared scores 0.
    """
    try:
        extracted = extract_answer(trajectory_text)
        if extracted is None:
            return None, 0
        return extracted, 1 if check_equivalence(extracted, gold_answer) else 0
    except Exception:
        return None, 0


def score_trajectory(trajectory_text: str, gold_answer: str) -> int:
    """Outcome reward of a trajectory: 1 for a verified answer, else 0."""
    return score_with_extraction(trajectory_text, gold_answer)[1]
