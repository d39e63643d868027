"""Parsing of coordinate-text answers.

The canonical answer grammar is one instance per line:

    <ClassName>: (<x1>, <y1>), (<x2>, <y2>), ..., (<x12>, <y12>)

with ASCII digits, a single space after each comma, and lines joined by
``\\n``. ``parse_prediction`` accepts this grammar exactly in ``strict``
mode; ``recover`` mode extracts instances from free-form model output
(bracket variants, missing spaces, bare ``x,y`` pairs, surrounding prose)
so that unaligned models can still be scored.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache

from .errors import ContractError
from .instruments import INSTRUMENT_CLASSES, KEYPOINTS_PER_INSTANCE

POLICIES = ("strict", "recover")

UNKNOWN_CLASS = "unknown"


def round_half_up(value: float) -> int:
    """Round to the nearest integer, halves away from zero-ward: 10.5 -> 11."""
    return int(math.floor(value + 0.5))


@dataclass(frozen=True)
class ParsedInstance:
    class_name: str
    keypoints: tuple[tuple[int, int], ...]


@dataclass
class ParseResult:
    """Outcome of parsing one prediction text.

    ``warnings`` holds (byte offset, message) pairs; ``fatal`` is set when
    nothing usable was found and ``instances`` is then empty.
    """

    instances: list[ParsedInstance] = field(default_factory=list)
    warnings: list[tuple[int, str]] = field(default_factory=list)
    fatal: str | None = None

    def ok(self) -> bool:
        return self.fatal is None


@dataclass(frozen=True)
class Violation:
    instance_index: int
    kind: str  # "unknown_class" | "out_of_bounds"
    message: str


# Numbers are capped at 9 integer digits so arbitrary byte strings cannot
# overflow float conversion; coordinates in practice are small.
_NUM = r"-?\d{1,9}(?:\.\d{1,9})?"
_PAIR_RE = re.compile(
    rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*\)"
    rf"|\[\s*({_NUM})\s*,\s*({_NUM})\s*\]"
    rf"|({_NUM})\s*,\s*({_NUM})"
)
# Canonical pair and full canonical line, used both for strict parsing and
# for deciding whether a recovered instance deserves a syntax warning.
_STRICT_CLASS_RE = re.compile(r"([^:\n]+): ")
_STRICT_PAIR_RE = re.compile(r"\((\d{1,9}), (\d{1,9})\)")
_STRICT_LINE_RE = re.compile(
    r"[^:\n]+: " + r", ".join([r"\(\d{1,9}, \d{1,9}\)"] * KEYPOINTS_PER_INSTANCE) + r"$"
)
# Boundary rule (a): a grammar-shaped head "Name:" at line start. The class
# chunk excludes sentence punctuation so prose like "The tool is X. Key:" is
# not mistaken for a head.
_HEAD_RE = re.compile(r"\s*([A-Za-z][A-Za-z0-9_ \-]*?)\s*:")


@lru_cache(maxsize=16)
def _vocab_re(class_vocab: tuple[str, ...]) -> re.Pattern:
    alts = "|".join(re.escape(c) for c in sorted(class_vocab, key=len, reverse=True))
    return re.compile(rf"\b(?:{alts})\b")


def _byte_offset(text: str, char_offset: int) -> int:
    return len(text[:char_offset].encode("utf-8"))


def parse_prediction(
    text: str,
    policy: str = "strict",
    class_vocab: tuple[str, ...] = INSTRUMENT_CLASSES,
    pad_short: bool = False,
) -> ParseResult:
    """Parse model output text into tool instances.

    strict: only the canonical grammar is accepted; the first deviation sets
    ``fatal`` with its byte offset and no instances are returned.

    recover: best effort. Instance boundaries are lines that either start
    with a "Name:" head followed by at least one numeric pair on the same
    line, or contain a vocabulary class word; numeric pairs are greedily
    assigned to the most recent boundary, pairs before any boundary go to a
    class-"unknown" instance. Per instance the first 12 pairs are kept
    (extra pairs warn); instances with fewer than 12 pairs warn and are
    dropped, or padded by repeating their last pair when ``pad_short`` is
    set. Decimals are rounded half up. ``fatal`` is set only when the text
    contains no numeric pairs at all.
    """
    if policy not in POLICIES:
        raise ContractError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if policy == "strict":
        return _parse_strict(text)
    return _parse_recover(text, tuple(class_vocab), pad_short)


def _parse_strict(text: str) -> ParseResult:
    result = ParseResult()
    offset = 0  # char offset of current line start
    lines = text.split("\n")
    for lineno, line in enumerate(lines):
        instance, fail_at = _parse_strict_line(line)
        if instance is None:
            result.fatal = (
                f"line {lineno + 1} deviates from the canonical grammar"
                f" at byte offset {_byte_offset(text, offset + fail_at)}"
            )
            result.instances = []
            return result
        result.instances.append(instance)
        offset += len(line) + 1
    return result


def _parse_strict_line(line: str) -> tuple[ParsedInstance | None, int]:
    """Return (instance, 0) or (None, char offset of the deviation)."""
    head = _STRICT_CLASS_RE.match(line)
    if head is None:
        return None, 0
    pos = head.end()
    points: list[tuple[int, int]] = []
    for i in range(KEYPOINTS_PER_INSTANCE):
        if i > 0:
            if not line.startswith(", ", pos):
                return None, pos
            pos += 2
        pair = _STRICT_PAIR_RE.match(line, pos)
        if pair is None:
            return None, pos
        points.append((int(pair.group(1)), int(pair.group(2))))
        pos = pair.end()
    if pos != len(line):
        return None, pos
    return ParsedInstance(head.group(1), tuple(points)), 0


def _parse_recover(
    text: str, class_vocab: tuple[str, ...], pad_short: bool
) -> ParseResult:
    result = ParseResult()
    pairs = [
        (m.start(), _match_pair(m))
        for m in _PAIR_RE.finditer(text)
    ]
    if not pairs:
        result.fatal = "no numeric pairs found"
        return result

    boundaries = _find_boundaries(text, class_vocab)
    # Greedy assignment: each pair joins the most recent boundary at or
    # before it; earlier pairs form a leading "unknown" instance.
    groups: list[tuple[int, str, bool, list[tuple[int, int]]]] = []
    if not boundaries or pairs[0][0] < boundaries[0][0]:
        groups.append((pairs[0][0] if pairs else 0, UNKNOWN_CLASS, False, []))
    for start, cls, canonical in boundaries:
        groups.append((start, cls, canonical, []))
    for pos, pair in pairs:
        target = None
        for group in groups:
            if group[0] <= pos:
                target = group
            else:
                break
        if target is None:  # pair precedes the unknown anchor; attach anyway
            target = groups[0]
        target[3].append(pair)

    for start, cls, canonical, pts in groups:
        at = _byte_offset(text, start)
        if not canonical:
            result.warnings.append((at, f"non-canonical syntax for {cls!r} instance"))
        if len(pts) > KEYPOINTS_PER_INSTANCE:
            result.warnings.append(
                (at, f"{len(pts)} pairs for {cls!r}; keeping the first"
                     f" {KEYPOINTS_PER_INSTANCE}")
            )
            pts = pts[:KEYPOINTS_PER_INSTANCE]
        elif len(pts) < KEYPOINTS_PER_INSTANCE:
            if pad_short and pts:
                result.warnings.append(
                    (at, f"only {len(pts)} pairs for {cls!r}; padding by"
                         f" repeating the last pair")
                )
                pts = pts + [pts[-1]] * (KEYPOINTS_PER_INSTANCE - len(pts))
            else:
                result.warnings.append(
                    (at, f"only {len(pts)} pairs for {cls!r}; dropping instance")
                )
                continue
        result.instances.append(ParsedInstance(cls, tuple(pts)))
    return result


def _match_pair(m: re.Match) -> tuple[int, int]:
    x, y = (g for g in m.groups() if g is not None)
    return round_half_up(float(x)), round_half_up(float(y))


def _find_boundaries(
    text: str, class_vocab: tuple[str, ...]
) -> list[tuple[int, str, bool]]:
    """Locate instance boundary lines: (line start, class name, canonical?).

    Checked in order: a fully canonical line (class taken verbatim, so
    recover accepts everything strict accepts), then a grammar-shaped
    "Name:" head followed by at least one pair on the line, then any line
    containing a vocabulary class word.
    """
    vocab_re = _vocab_re(class_vocab)
    boundaries = []
    offset = 0
    for line in text.split("\n"):
        if _STRICT_LINE_RE.fullmatch(line):
            boundaries.append((offset, _STRICT_CLASS_RE.match(line).group(1), True))
        else:
            head = _HEAD_RE.match(line)
            if head is not None and _PAIR_RE.search(line, head.end()):
                boundaries.append((offset, head.group(1), False))
            else:
                word = vocab_re.search(line)
                if word is not None:
                    boundaries.append((offset, word.group(0), False))
        offset += len(line) + 1
    return boundaries


def validate_instances(
    result: ParseResult,
    width: float,
    height: float,
    class_vocab: tuple[str, ...] = INSTRUMENT_CLASSES,
) -> list[Violation]:
    """Report out-of-bounds coordinates and unknown class names."""
    if width <= 0 or height <= 0:
        raise ContractError("width and height must be positive")
    violations = []
    for i, inst in enumerate(result.instances):
        if inst.class_name not in class_vocab:
            violations.append(
                Violation(i, "unknown_class", f"class {inst.class_name!r} not in vocabulary")
            )
        for j, (x, y) in enumerate(inst.keypoints):
            if not (0 <= x <= width and 0 <= y <= height):
                violations.append(
                    Violation(
                        i,
                        "out_of_bounds",
                        f"keypoint {j} at ({x}, {y}) outside {width}x{height}",
                    )
                )
    return violations
