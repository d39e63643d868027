"""kplora: keypoint instruction datasets, coordinate-text parsing,
MPJPE/PCK evaluation, and a LoRA-adapted toy causal language model."""

from .data import (
    FIXED_PROMPT,
    ImageSample,
    InstructionRecord,
    Keypoint,
    ToolInstance,
    build_instruction_record,
    emit_dataset,
    load_annotations,
    serialize_answer,
)
from .grammar import ParseResult, parse_prediction, validate_instances
from .instruments import INSTRUMENT_CLASSES, KEYPOINTS_PER_INSTANCE
from .lora import LoraConfig, LoraLinear, adapter_grads, init_adapter, lora_forward, merge, unmerge
from .metrics import EvalReport, KeypointSet, PckConfig, evaluate_dataset, match_instances, mpjpe, pck
from .model import ModelConfig, ToyModel, build_echo_base, clm_loss, forward_logits, generate
from .task import make_toy_task
from .train import TrainingState, train_step
from .vocab import Vocab

__version__ = "0.1.0"

__all__ = [
    "FIXED_PROMPT",
    "INSTRUMENT_CLASSES",
    "KEYPOINTS_PER_INSTANCE",
    "EvalReport",
    "ImageSample",
    "InstructionRecord",
    "Keypoint",
    "KeypointSet",
    "LoraConfig",
    "LoraLinear",
    "ModelConfig",
    "ParseResult",
    "PckConfig",
    "ToolInstance",
    "ToyModel",
    "TrainingState",
    "Vocab",
    "adapter_grads",
    "build_echo_base",
    "build_instruction_record",
    "clm_loss",
    "emit_dataset",
    "evaluate_dataset",
    "forward_logits",
    "generate",
    "init_adapter",
    "load_annotations",
    "lora_forward",
    "make_toy_task",
    "match_instances",
    "merge",
    "mpjpe",
    "parse_prediction",
    "pck",
    "serialize_answer",
    "train_step",
    "unmerge",
    "validate_instances",
]
