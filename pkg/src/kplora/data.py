"""Keypoint annotations and instruction-record construction.

Input annotation schema (one JSON document):

    {"classes": [14 strings],
     "images": [{"image_id": str, "image_path": str,
                 "width": int, "height": int,
                 "instances": [{"class_name": str,
                                "keypoints": [[x, y] * 12]}]}]}

Output is conversation-format JSONL, one line per image:

    {"sample_id": ..., "images": ["<path>"],
     "messages": [{"role": "user", "content": "<image> <prompt>"},
                  {"role": "assistant", "content": "<answer>"}]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import FormatError, InputError, SchemaError, VocabularyError
from .grammar import parse_prediction, round_half_up
from .instruments import KEYPOINTS_PER_INSTANCE

FIXED_PROMPT = "What is/are this/these tool(s) and find 12 keypoints?"

VOCAB_SIZE_REQUIRED = 14


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float


@dataclass(frozen=True)
class ToolInstance:
    class_name: str
    keypoints: tuple[Keypoint, ...]

    def rounded(self) -> tuple[tuple[int, int], ...]:
        return tuple((round_half_up(k.x), round_half_up(k.y)) for k in self.keypoints)


@dataclass(frozen=True)
class ImageSample:
    image_id: str
    image_path: str
    width: int
    height: int
    instances: tuple[ToolInstance, ...]


@dataclass(frozen=True)
class InstructionRecord:
    sample_id: str
    image_ref: str
    prompt: str
    answer: str


@dataclass(frozen=True)
class EmissionStats:
    records: int
    instances: int


def load_annotations(
    path: str | Path, class_vocab: tuple[str, ...] | None = None
) -> list[ImageSample]:
    """Load and validate an annotation file, preserving file order.

    ``class_vocab`` overrides the file's ``classes`` entry; when both are
    present they must agree. The vocabulary must have exactly 14 entries.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(
            f"{path}: malformed JSON: {e.msg}",
            offset=len(text[: e.pos].encode("utf-8")),
        ) from e

    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise SchemaError(f"{path}: expected an object with an 'images' array")
    file_vocab = doc.get("classes")
    if file_vocab is not None:
        file_vocab = tuple(file_vocab)
    if class_vocab is None:
        if file_vocab is None:
            raise SchemaError(f"{path}: no 'classes' array and no vocabulary given")
        vocab = file_vocab
    else:
        vocab = tuple(class_vocab)
        if file_vocab is not None and file_vocab != vocab:
            raise VocabularyError(
                f"{path}: file classes {list(file_vocab)} disagree with the"
                f" configured vocabulary"
            )
    if len(vocab) != VOCAB_SIZE_REQUIRED or len(set(vocab)) != len(vocab):
        raise VocabularyError(
            f"{path}: class vocabulary must hold {VOCAB_SIZE_REQUIRED} distinct"
            f" entries, got {len(vocab)}"
        )

    samples = []
    seen_ids: set[str] = set()
    for i, img in enumerate(doc["images"]):
        samples.append(_load_sample(path, i, img, vocab, seen_ids))
    return samples


def _load_sample(path, index, img, vocab, seen_ids) -> ImageSample:
    where = f"{path}: images[{index}]"
    if not isinstance(img, dict):
        raise SchemaError(f"{where}: expected an object")
    try:
        image_id = img["image_id"]
        image_path = img["image_path"]
        width = img["width"]
        height = img["height"]
        raw_instances = img["instances"]
    except KeyError as e:
        raise SchemaError(f"{where}: missing field {e.args[0]!r}") from e
    if not isinstance(image_id, str) or not image_id:
        raise SchemaError(f"{where}: image_id must be a non-empty string")
    if image_id in seen_ids:
        raise SchemaError(f"{where}: duplicate image_id {image_id!r}")
    seen_ids.add(image_id)
    if not (isinstance(width, int) and isinstance(height, int) and width > 0 and height > 0):
        raise SchemaError(f"{where} ({image_id}): width/height must be positive integers")
    if not isinstance(raw_instances, list) or not raw_instances:
        raise SchemaError(f"{where} ({image_id}): needs at least one instance")

    instances = []
    for inst in raw_instances:
        if not isinstance(inst, dict):
            raise SchemaError(f"{where} ({image_id}): instances must be objects")
        cls = inst.get("class_name")
        if cls not in vocab:
            raise VocabularyError(
                f"{where} ({image_id}): unknown class {cls!r}"
            )
        pts = inst.get("keypoints", [])
        if len(pts) != KEYPOINTS_PER_INSTANCE:
            raise SchemaError(
                f"{where} ({image_id}): expected {KEYPOINTS_PER_INSTANCE}"
                f" keypoints, got {len(pts)}"
            )
        kps = []
        for p in pts:
            try:
                x, y = float(p[0]), float(p[1])
            except (TypeError, ValueError, IndexError) as e:
                raise SchemaError(f"{where} ({image_id}): bad keypoint {p!r}") from e
            if not (0 <= x <= width and 0 <= y <= height):
                raise SchemaError(
                    f"{where} ({image_id}): keypoint ({x}, {y}) outside"
                    f" {width}x{height}"
                )
            kps.append(Keypoint(x, y))
        instances.append(ToolInstance(cls, tuple(kps)))
    return ImageSample(image_id, image_path, width, height, tuple(instances))


def serialize_answer(instances) -> str:
    """Render instances in input order as canonical answer text.

    Coordinates are rendered as integers after round-half-up.
    """
    lines = []
    for inst in instances:
        pairs = ", ".join(f"({x}, {y})" for x, y in inst.rounded())
        lines.append(f"{inst.class_name}: {pairs}")
    return "\n".join(lines)


def canonical_instance_order(instances) -> tuple[ToolInstance, ...]:
    """Sort instances ascending by rounded-keypoint centroid x, ties by
    centroid y, then class name and coordinates for a total order."""

    def key(inst: ToolInstance):
        pts = inst.rounded()
        n = len(pts)
        cx = sum(p[0] for p in pts) / n
        cy = sum(p[1] for p in pts) / n
        return (cx, cy, inst.class_name, pts)

    return tuple(sorted(instances, key=key))


def build_instruction_record(sample: ImageSample) -> InstructionRecord:
    """Pair the fixed prompt with the canonical answer for one image.

    Instances are put in canonical order so record emission is stable; the
    answer is verified to round-trip through the grammar before returning.
    """
    ordered = canonical_instance_order(sample.instances)
    answer = serialize_answer(ordered)
    parsed = parse_prediction(answer, "strict")
    expected = [(inst.class_name, inst.rounded()) for inst in ordered]
    got = [(inst.class_name, inst.keypoints) for inst in parsed.instances]
    if parsed.fatal is not None or got != expected:
        raise AssertionError(
            f"answer for {sample.image_id} does not round-trip: {parsed.fatal}"
        )
    return InstructionRecord(
        sample_id=sample.image_id,
        image_ref=sample.image_path,
        prompt=FIXED_PROMPT,
        answer=answer,
    )


def emit_dataset(samples, out_path: str | Path) -> EmissionStats:
    """Write one conversation JSONL line per sample; returns emission stats."""
    out_path = Path(out_path)
    records = 0
    instances = 0
    try:
        with out_path.open("w", encoding="utf-8") as f:
            for sample in samples:
                record = build_instruction_record(sample)
                f.write(
                    json.dumps(
                        {
                            "sample_id": record.sample_id,
                            "images": [record.image_ref],
                            "messages": [
                                {
                                    "role": "user",
                                    "content": f"<image> {record.prompt}",
                                },
                                {"role": "assistant", "content": record.answer},
                            ],
                        }
                    )
                )
                f.write("\n")
                records += 1
                instances += len(sample.instances)
    except OSError as e:
        raise InputError(f"cannot write {out_path}: {e}") from e
    return EmissionStats(records=records, instances=instances)


def load_predictions(path: str | Path) -> list[dict]:
    """Read a prediction JSONL file of {"sample_id": ..., "output": ...}."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    records = []
    offset = 0
    for lineno, line in enumerate(text.split("\n")):
        if line.strip():
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(
                    f"{path}:{lineno + 1}: malformed JSON",
                    offset=offset + len(line[: e.pos].encode("utf-8")),
                ) from e
            if "sample_id" not in rec or "output" not in rec:
                raise SchemaError(
                    f"{path}:{lineno + 1}: prediction records need"
                    f" sample_id and output"
                )
            records.append(rec)
        offset += len(line.encode("utf-8")) + 1
    return records
