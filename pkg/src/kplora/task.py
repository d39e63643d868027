"""Synthetic scene-to-keypoints task for the toy LM.

Each sample is one instrument with 12 keypoints on the integer grid
0..9 inside a 20x20 canvas. The "observation" replaces the image: it is
the canonical answer line rendered in a mirrored coordinate frame (every
digit d becomes 9-d, an involution with no fixed points). The mapping
observation -> answer is therefore invertible but never the identity, so
a model that merely echoes the observation gets every coordinate wrong
while producing perfectly well-formed text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ImageSample, Keypoint, ToolInstance, serialize_answer
from .errors import ContractError
from .grammar import parse_prediction
from .instruments import INSTRUMENT_CLASSES, KEYPOINTS_PER_INSTANCE
from .vocab import BOS, EOS, SEP, Vocab

CANVAS_SIZE = 20  # toy image width and height in pixels
GRID_MAX = 9  # coordinates are integers 0..GRID_MAX (single digit)

# Token count of every observation (and answer): one class token, ": ",
# then 12 six-token pairs joined by ", ". Constant because coordinates are
# single digits; it equals the echo offset of the matching base model.
OBSERVATION_SPAN = 3 + 12 * 6 + 11 * 2


@dataclass(frozen=True)
class ToySample:
    sample_id: str
    class_name: str
    keypoints: tuple[tuple[int, int], ...]
    observation: str
    answer: str


def flip_digit(d: int) -> int:
    return 9 - d


def encode_observation(class_name: str, keypoints) -> str:
    """Render the scene in the mirrored coordinate frame."""
    pairs = ", ".join(f"({flip_digit(x)}, {flip_digit(y)})" for x, y in keypoints)
    return f"{class_name}: {pairs}"


def decode_observation(observation: str) -> tuple[str, tuple[tuple[int, int], ...]]:
    """Invert encode_observation (used as the inverse-map oracle)."""
    parsed = parse_prediction(observation, "strict")
    if parsed.fatal is not None or len(parsed.instances) != 1:
        raise ContractError(f"not a valid observation: {parsed.fatal}")
    inst = parsed.instances[0]
    points = tuple((flip_digit(x), flip_digit(y)) for x, y in inst.keypoints)
    return inst.class_name, points


def make_toy_task(n_samples: int, seed: int) -> list[ToySample]:
    """Deterministic corpus of observation/answer pairs."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_samples):
        cls = INSTRUMENT_CLASSES[int(rng.integers(0, len(INSTRUMENT_CLASSES)))]
        pts = tuple(
            (int(x), int(y))
            for x, y in rng.integers(0, GRID_MAX + 1, size=(KEYPOINTS_PER_INSTANCE, 2))
        )
        inst = ToolInstance(cls, tuple(Keypoint(float(x), float(y)) for x, y in pts))
        samples.append(
            ToySample(
                sample_id=f"toy-{i:05d}",
                class_name=cls,
                keypoints=pts,
                observation=encode_observation(cls, pts),
                answer=serialize_answer([inst]),
            )
        )
    return samples


def toy_ground_truth(samples) -> list[ImageSample]:
    """The corpus as annotation samples on the 20x20 canvas."""
    return [
        ImageSample(
            image_id=s.sample_id,
            image_path=f"{s.sample_id}.png",
            width=CANVAS_SIZE,
            height=CANVAS_SIZE,
            instances=(
                ToolInstance(
                    s.class_name,
                    tuple(Keypoint(float(x), float(y)) for x, y in s.keypoints),
                ),
            ),
        )
        for s in samples
    ]


def encode_sequences(samples, vocab: Vocab):
    """Token arrays for training: (ids, next-token targets, answer mask).

    Sequences are BOS observation SEP answer EOS, all the same length; the
    loss mask covers predictions of the answer tokens and the closing EOS,
    nothing from the observation.
    """
    seqs = []
    for s in samples:
        seq = (
            [BOS]
            + vocab.tokenize(s.observation)
            + [SEP]
            + vocab.tokenize(s.answer)
            + [EOS]
        )
        seqs.append(seq)
    arr = np.array(seqs, dtype=np.int64)
    sep_pos = 1 + OBSERVATION_SPAN
    if not np.all(arr[:, sep_pos] == SEP):
        raise ContractError("observation span is not constant")
    ids = arr[:, :-1]
    targets = arr[:, 1:]
    mask = np.zeros(targets.shape, dtype=np.float64)
    mask[:, sep_pos:] = 1.0
    return ids, targets, mask


def prompt_ids(samples, vocab: Vocab) -> np.ndarray:
    """BOS observation SEP prefixes, ready for generation."""
    return np.array(
        [[BOS] + vocab.tokenize(s.observation) + [SEP] for s in samples],
        dtype=np.int64,
    )


def write_toy_annotations(samples, path: str | Path) -> None:
    """Emit the corpus ground truth in the annotation JSON schema."""
    doc = {
        "classes": list(INSTRUMENT_CLASSES),
        "images": [
            {
                "image_id": s.sample_id,
                "image_path": f"{s.sample_id}.png",
                "width": CANVAS_SIZE,
                "height": CANVAS_SIZE,
                "instances": [
                    {
                        "class_name": s.class_name,
                        "keypoints": [[x, y] for x, y in s.keypoints],
                    }
                ],
            }
            for s in samples
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2), encoding="utf-8")
