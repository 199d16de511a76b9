"""
Vocabulary for the JointSR Project
Glyph ids 0..G-1, PAD = G, MASK = G + 1. The model's real vocabulary (logit columns) is
the G glyphs plus PAD; MASK only ever appears as an input.
"""

from dataclasses import dataclass
from typing import List, Sequence

from utils.exceptions import DatasetError

DEFAULT_CHARSET = "0123456789ABCDEFHJKLMNPRTU"
MASK_SYMBOL = "_"


@dataclass(frozen=True)
class Vocabulary:
    """Bijection between transcription strings and fixed-length id sequences."""

    charset: str = DEFAULT_CHARSET
    seq_len: int = 24

    def __post_init__(self):
        if len(set(self.charset)) != len(self.charset):
            raise DatasetError(f"Charset has duplicate glyphs: {self.charset!r}")
        if MASK_SYMBOL in self.charset:
            raise DatasetError(f"Charset must not contain the mask display symbol {MASK_SYMBOL!r}")

    @property
    def pad_id(self) -> int:
        return len(self.charset)

    @property
    def size(self) -> int:
        """N: glyphs + PAD, the number of logit columns."""
        return len(self.charset) + 1

    @property
    def mask_id(self) -> int:
        return self.size

    def encode(self, text: str) -> List[int]:
        """
        Map a string to ``seq_len`` ids, right-padded with PAD.

        Raises:
            DatasetError: On unknown glyphs or text longer than seq_len
        """
        if len(text) > self.seq_len:
            raise DatasetError(f"Text {text!r} longer than seq_len {self.seq_len}")
        ids = []
        for char in text:
            index = self.charset.find(char)
            if index < 0:
                raise DatasetError(f"Glyph {char!r} not in charset {self.charset!r}")
            ids.append(index)
        return ids + [self.pad_id] * (self.seq_len - len(ids))

    def decode(self, ids: Sequence[int], show_mask: bool = False) -> str:
        """
        Map ids back to a string with PAD stripped.

        Args:
            ids: Token ids
            show_mask: Render MASK ids as ``_`` instead of raising

        Raises:
            DatasetError: On ids outside the vocabulary, or MASK when show_mask is False
        """
        chars = []
        for token in ids:
            token = int(token)
            if token == self.pad_id:
                continue
            if token == self.mask_id and show_mask:
                chars.append(MASK_SYMBOL)
            elif 0 <= token < self.pad_id:
                chars.append(self.charset[token])
            else:
                raise DatasetError(f"Token id {token} cannot be decoded")
        return "".join(chars)

    def is_canonical(self, ids: Sequence[int]) -> bool:
        """True for glyph ids followed only by PAD (the form ``encode`` produces)."""
        ids = [int(i) for i in ids]
        if len(ids) != self.seq_len or any(i < 0 or i > self.pad_id for i in ids):
            return False
        glyphs = len(ids) - sum(1 for i in ids if i == self.pad_id)
        return all(i != self.pad_id for i in ids[:glyphs])
