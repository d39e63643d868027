"""Self-describing binary checkpoints for the toy model.

Layout: magic ``KPLM``, uint32 version, uint32 header length, a UTF-8
JSON header (model config, adapter config, array manifest), then the raw
array payload. Arrays are float64, little-endian, C order, in manifest
order: byte-identical across runs given identical weights, unlike
zip-based containers that embed timestamps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .lora import LoraConfig
from .model import ModelConfig, ToyModel

MAGIC = b"KPLM"
VERSION = 1


def _array_items(model: ToyModel) -> list[tuple[str, np.ndarray]]:
    items = [("tok_emb", model.tok_emb), ("pos_emb", model.pos_emb)]
    for li, layer in enumerate(model.layers):
        for key in (
            "ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
            "ln2_g", "ln2_b", "w_up", "w_down",
        ):
            items.append((f"layers.{li}.{key}", layer[key]))
    items.append(("lnf_g", model.lnf_g))
    items.append(("lnf_b", model.lnf_b))
    for name in sorted(model.adapters):
        items.append((f"adapters.{name}.A", model.adapters[name].A))
        items.append((f"adapters.{name}.B", model.adapters[name].B))
    return items


def save_model(model: ToyModel, path: str | Path) -> None:
    items = _array_items(model)
    header = {
        "config": {
            "d_model": model.config.d_model,
            "n_layers": model.config.n_layers,
            "n_heads": model.config.n_heads,
            "max_seq_len": model.config.max_seq_len,
            "vocab_size": model.config.vocab_size,
        },
        "seed": model.seed,
        "lora": None
        if model.lora_config is None
        else {
            "rank": model.lora_config.rank,
            "alpha": model.lora_config.alpha,
            "dropout": model.lora_config.dropout,
            "targets": list(model.lora_config.targets),
        },
        "arrays": [
            {"name": name, "shape": list(arr.shape)} for name, arr in items
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for _, arr in items:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str | Path) -> ToyModel:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a model checkpoint", offset=0)
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    config = ModelConfig(**header["config"])
    model = ToyModel(config, seed=header["seed"])
    if header["lora"] is not None:
        lcfg = LoraConfig(
            rank=header["lora"]["rank"],
            alpha=header["lora"]["alpha"],
            dropout=header["lora"]["dropout"],
            targets=tuple(header["lora"]["targets"]),
        )
        model.attach_adapters(lcfg, seed=header["seed"])

    offset = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(raw):
            raise FormatError(f"{path}: truncated checkpoint", offset=offset)
        arrays[entry["name"]] = np.frombuffer(
            raw[offset:end], dtype="<f8"
        ).reshape(shape).astype(np.float64)
        offset = end

    def put(name: str, target: np.ndarray):
        if name not in arrays:
            raise FormatError(f"{path}: missing array {name!r}")
        if arrays[name].shape != target.shape:
            raise ContractError(f"{path}: array {name!r} has wrong shape")
        target[...] = arrays[name]

    put("tok_emb", model.tok_emb)
    put("pos_emb", model.pos_emb)
    for li, layer in enumerate(model.layers):
        for key in layer:
            put(f"layers.{li}.{key}", layer[key])
    put("lnf_g", model.lnf_g)
    put("lnf_b", model.lnf_b)
    for name, adapter in model.adapters.items():
        put(f"adapters.{name}.A", adapter.A)
        put(f"adapters.{name}.B", adapter.B)
    return model
