"""Byte-level tokenizer.

Ids 0..255 are raw UTF-8 bytes; four specials follow: BOS=256, EOS=257,
PAD=258, SEP=259. The vocabulary size is therefore 260. Encoding never fails
on any Python string; decoding drops special ids and decodes the remaining
bytes as UTF-8.
"""

from __future__ import annotations

from dataclasses import dataclass

N_BYTES = 256
BOS = 256
EOS = 257
PAD = 258
SEP = 259
VOCAB_SIZE = 260

SPECIALS = (BOS, EOS, PAD, SEP)


@dataclass(frozen=True)
class TokenSeq:
    """Token ids plus a flag recording whether truncation was applied."""

    ids: tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(text: str, max_len: int | None = None) -> TokenSeq:
    """Encode text to byte ids, truncating (flagged, never silent) at max_len."""
    ids = tuple(text.encode("utf-8"))
    if max_len is not None and len(ids) > max_len:
        return TokenSeq(ids[:max_len], truncated=True)
    return TokenSeq(ids)


def detokenize(ids) -> str:
    """Decode ids back to text; special ids are dropped."""
    raw = bytes(i for i in ids if 0 <= i < N_BYTES)
    return raw.decode("utf-8", errors="replace")


def validate_ids(ids, max_seq_len: int | None = None) -> None:
    """Raise ValueError if any id is out of vocabulary or the sequence is too long."""
    for i in ids:
        if not 0 <= i < VOCAB_SIZE:
            raise ValueError(f"token id {i} outside vocabulary [0, {VOCAB_SIZE})")
    if max_seq_len is not None and len(ids) > max_seq_len:
        raise ValueError(f"sequence length {len(ids)} exceeds max_seq_len {max_seq_len}")
