"""Token vocabulary for the toy causal LM.

Tokens: the four specials, the six structural characters of the answer
grammar, the ten digits, and the 14 instrument class names (one token
each). Special ids are fixed: PAD=0, BOS=1, EOS=2, SEP=3.
"""

from __future__ import annotations

from .errors import ContractError
from .instruments import INSTRUMENT_CLASSES

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")
STRUCTURAL_CHARS = ("(", ")", ",", ":", " ", "\n")
DIGITS = tuple(str(d) for d in range(10))


class Vocab:
    """Bijective token<->id map with greedy longest-match tokenization."""

    def __init__(self, class_names: tuple[str, ...] = INSTRUMENT_CLASSES):
        self.tokens: tuple[str, ...] = (
            SPECIAL_TOKENS + STRUCTURAL_CHARS + DIGITS + tuple(class_names)
        )
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("vocabulary tokens must be distinct")
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.class_names = tuple(class_names)
        # longest first so multi-character class names win over prefixes
        self._by_length = sorted(
            (t for t in self.tokens[len(SPECIAL_TOKENS):]), key=len, reverse=True
        )

    @property
    def size(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        i = 0
        while i < len(text):
            for tok in self._by_length:
                if text.startswith(tok, i):
                    ids.append(self.token_to_id[tok])
                    i += len(tok)
                    break
            else:
                raise ContractError(
                    f"out-of-vocabulary text at offset {i}: {text[i:i + 10]!r}"
                )
        return ids

    def detokenize(self, ids) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise ContractError(f"token id {i} out of range")
            if i >= len(SPECIAL_TOKENS):
                parts.append(self.tokens[i])
        return "".join(parts)
