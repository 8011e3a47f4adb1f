"""Byte-level tokenizer with two leading special ids."""

from __future__ import annotations

from typing import Protocol

import numpy as np

PAD_ID = 0
MASK_ID = 1
BYTE_OFFSET = 2


class Tokenizer(Protocol):
    vocab_size: int
    pad_id: int
    mask_id: int

    def encode(self, text: str) -> np.ndarray: ...
    def decode(self, ids) -> str: ...


class ByteTokenizer:
    """UTF-8 bytes shifted past ``[PAD]=0`` and ``[MASK]=1``."""

    vocab_size = 256 + BYTE_OFFSET
    pad_id = PAD_ID
    mask_id = MASK_ID

    def encode(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64) + BYTE_OFFSET

    def decode(self, ids) -> str:
        raw = bytes(int(i) - BYTE_OFFSET for i in np.asarray(ids).ravel() if int(i) >= BYTE_OFFSET)
        return raw.decode("utf-8", errors="replace")
