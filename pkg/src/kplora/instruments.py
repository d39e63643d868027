"""Instrument class vocabulary shared by the dataset, parser, and toy task."""

# 14 instrument types. Single-token names keep the toy tokenizer trivial;
# the loader accepts any 14-entry vocabulary supplied by the annotation file.
INSTRUMENT_CLASSES: tuple[str, ...] = (
    "Scissors",
    "Forceps",
    "Scalpel",
    "Hemostat",
    "Retractor",
    "Clamp",
    "Probe",
    "Hook",
    "Cannula",
    "Trocar",
    "Elevator",
    "Curette",
    "Speculum",
    "Tweezers",
)

KEYPOINTS_PER_INSTANCE = 12
