"""Low-rank adaptation of frozen linear maps.

A frozen weight W0 (d x h) is augmented with trainable factors A (d x r)
and B (r x h), scaled by alpha / r:

    y = x @ W0 + (alpha / r) * (dropout(x) @ A) @ B

Only A and B ever receive gradients; W0 stays frozen. B starts at zero so
an adapted layer is exactly the base layer until the first update. Dropout
applies to the adapter-branch input only, with inverted 1/(1-p) scaling,
and only in training mode. All math is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

ADAPTER_TARGETS = ("query", "key", "value", "output", "feed_forward")
DEFAULT_TARGETS = ("query", "key", "value", "output")

CHECKPOINT_FORMAT = "kplora-adapters"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ContractError("rank must be a positive integer")
        if self.alpha <= 0:
            raise ContractError("alpha must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ContractError("dropout must lie in [0, 1)")
        bad = set(self.targets) - set(ADAPTER_TARGETS)
        if bad:
            raise ContractError(f"unknown adapter targets {sorted(bad)}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraLinear:
    """A frozen base matrix with its trainable low-rank update."""

    W0: np.ndarray  # (d, h), never updated
    A: np.ndarray  # (d, r), trainable
    B: np.ndarray  # (r, h), trainable
    alpha: float
    dropout: float = 0.0

    def __post_init__(self):
        d, h = self.W0.shape
        if self.A.shape[0] != d or self.B.shape[1] != h:
            raise ContractError("adapter factor shapes do not match W0")
        if self.A.shape[1] != self.B.shape[0]:
            raise ContractError("A and B disagree on rank")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable_parameters(self) -> int:
        return self.A.size + self.B.size


def init_adapter(
    d: int, h: int, cfg: LoraConfig, seed: int | np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw adapter factors: A ~ N(0, 1/r) i.i.d., B all zeros."""
    if not 1 <= cfg.rank <= min(d, h):
        raise ContractError(
            f"rank {cfg.rank} out of range for a {d}x{h} layer"
        )
    rng = np.random.default_rng(seed) if isinstance(seed, int) else seed
    A = rng.normal(0.0, 1.0 / np.sqrt(cfg.rank), size=(d, cfg.rank))
    B = np.zeros((cfg.rank, h))
    return A, B


def attach_adapter(
    W0: np.ndarray, cfg: LoraConfig, seed: int | np.random.Generator
) -> LoraLinear:
    A, B = init_adapter(W0.shape[0], W0.shape[1], cfg, seed)
    return LoraLinear(W0=W0, A=A, B=B, alpha=cfg.alpha, dropout=cfg.dropout)


def forward_with_cache(
    layer: LoraLinear,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Adapted forward pass; the cache feeds backward_from_cache."""
    if x.shape[-1] != layer.W0.shape[0]:
        raise ContractError(
            f"input width {x.shape[-1]} does not match layer d={layer.W0.shape[0]}"
        )
    if training and layer.dropout > 0.0:
        if rng is None:
            raise ContractError("training-mode dropout needs an rng")
        keep = 1.0 - layer.dropout
        mask = (rng.random(x.shape) < keep) / keep
        xa = x * mask
    else:
        mask = None
        xa = x
    mid = xa @ layer.A
    y = x @ layer.W0 + layer.scale * (mid @ layer.B)
    return y, (x, xa, mid, mask)


def backward_from_cache(layer: LoraLinear, cache, grad_out: np.ndarray):
    """Gradients (dx, dA, dB) for y = x@W0 + s*(dropout(x)@A)@B."""
    x, xa, mid, mask = cache
    s = layer.scale
    gB = grad_out @ layer.B.T  # (.., r)
    flat = lambda a: a.reshape(-1, a.shape[-1])
    dB = s * (flat(mid).T @ flat(grad_out))
    dA = s * (flat(xa).T @ flat(gB))
    dxa = s * (gB @ layer.A.T)
    if mask is not None:
        dxa = dxa * mask
    dx = grad_out @ layer.W0.T + dxa
    return dx, dA, dB


def lora_forward(
    layer: LoraLinear,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """y = x @ W0 + scale * (dropout(x) @ A) @ B."""
    y, _ = forward_with_cache(layer, x, training=training, rng=rng)
    return y


def adapter_grads(
    layer: LoraLinear, x: np.ndarray, upstream_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (dA, dB) with dropout disabled; W0 gets no gradient."""
    if upstream_grad.shape[-1] != layer.W0.shape[1]:
        raise ContractError("upstream gradient width does not match layer h")
    y, cache = forward_with_cache(layer, x, training=False)
    _, dA, dB = backward_from_cache(layer, cache, upstream_grad)
    return dA, dB


def merge(layer: LoraLinear) -> np.ndarray:
    """Fold the adapter into a dense matrix: W0 + scale * A @ B."""
    return layer.W0 + layer.scale * (layer.A @ layer.B)


def unmerge(merged: np.ndarray, layer: LoraLinear) -> np.ndarray:
    """Subtract the adapter update, recovering W0."""
    return merged - layer.scale * (layer.A @ layer.B)


def save_adapters(layers: dict[str, LoraLinear], path: str | Path) -> None:
    """Write adapter factors (not W0) as a versioned JSON checkpoint."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layers": {
            name: {
                "d": layer.W0.shape[0],
                "h": layer.W0.shape[1],
                "rank": layer.rank,
                "alpha": layer.alpha,
                "dropout": layer.dropout,
                "A": layer.A.tolist(),
                "B": layer.B.tolist(),
            }
            for name, layer in layers.items()
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_adapters(path: str | Path) -> dict[str, dict]:
    """Read an adapter checkpoint back into arrays keyed by layer name."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path} is not a version-{CHECKPOINT_VERSION} adapter checkpoint")
    out = {}
    for name, entry in doc["layers"].items():
        out[name] = {
            "d": entry["d"],
            "h": entry["h"],
            "rank": entry["rank"],
            "alpha": entry["alpha"],
            "dropout": entry["dropout"],
            "A": np.array(entry["A"], dtype=np.float64),
            "B": np.array(entry["B"], dtype=np.float64),
        }
    return out
