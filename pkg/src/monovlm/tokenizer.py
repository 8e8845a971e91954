"""Byte-level tokenizer: ids 0..255 are raw bytes, 256..263 are specials.

Strings are treated as Latin-1 byte sequences (one character == one byte, ids
0..255), which makes JSONL-stored text round-trip exactly through
tokenize/detokenize. Specials never appear in tokenized text; they are added
by sequence assembly.
"""

from __future__ import annotations

BYTE_VOCAB = 256
PAD = 256
BOS = 257
EOS = 258
IMG_START = 259
IMG_END = 260
# 261..263 reserved
N_SPECIAL = 8
VOCAB_SIZE = BYTE_VOCAB + N_SPECIAL

SPECIAL_NAMES = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", IMG_START: "<img>", IMG_END: "</img>"}


def tokenize(text: str | bytes) -> list[int]:
    """Byte ids of ``text``; str input must be Latin-1 encodable."""
    if isinstance(text, str):
        try:
            text = text.encode("latin-1")
        except UnicodeEncodeError as e:
            raise ValueError("tokenize only accepts characters U+0000..U+00FF in str input") from e
    return list(text)


def detokenize(ids) -> bytes:
    """Bytes for the byte-range ids in ``ids``; special ids are dropped."""
    return bytes(i for i in ids if 0 <= i < BYTE_VOCAB)


def decode_text(ids) -> str:
    return detokenize(ids).decode("latin-1")
