"""Character vocabulary with usage frequencies, and parallel-stream text encoding."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .pinyin import PinyinDict, PinyinMode, PinyinVocab, pinyin_ids, pinyin_pad_ids, to_syllable

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


@dataclass(frozen=True)
class CharVocab:
    """Character-level vocabulary; ids 0-4 are the fixed specials.

    Non-special ids are assigned by corpus frequency (descending), with ties
    broken by codepoint, so the same corpus always yields the same ids.
    """

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]
    freq: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, ch: str) -> int:
        return self.token_to_id.get(ch, UNK)

    def char_ids(self) -> range:
        """Ids of real characters (everything after the specials)."""
        return range(len(SPECIAL_TOKENS), len(self.id_to_token))


def build_char_vocab(lines: Iterable[str], min_freq: int = 1) -> CharVocab:
    """Count characters over a line iterable and keep those with count >= min_freq."""
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(line.rstrip("\n"))
    kept = [(ch, n) for ch, n in counts.items() if n >= min_freq]
    kept.sort(key=lambda item: (-item[1], item[0]))
    id_to_token = list(SPECIAL_TOKENS) + [ch for ch, _ in kept]
    freq = [0] * len(SPECIAL_TOKENS) + [n for _, n in kept]
    return CharVocab(
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        id_to_token=tuple(id_to_token),
        freq=tuple(freq),
    )


def build_char_vocab_from_file(path, min_freq: int = 1) -> CharVocab:
    with open(path, encoding="utf-8") as fh:
        return build_char_vocab(fh, min_freq=min_freq)


def save_char_vocab(cv: CharVocab, path) -> None:
    """Persist as ``<token>\\t<count>`` lines in id order."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok, n in zip(cv.id_to_token, cv.freq):
            fh.write(f"{tok}\t{n}\n")


def load_char_vocab(path) -> CharVocab:
    id_to_token: list[str] = []
    freq: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            tok, _, count = line.partition("\t")
            if not count:
                raise ValueError(f"{path}:{line_no}: expected <token>\\t<count>")
            id_to_token.append(tok)
            freq.append(int(count))
    if tuple(id_to_token[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
        raise ValueError(f"{path}: vocab file must start with the special tokens")
    return CharVocab(
        token_to_id={tok: i for i, tok in enumerate(id_to_token)},
        id_to_token=tuple(id_to_token),
        freq=tuple(freq),
    )


@dataclass(frozen=True)
class TokenSequence:
    """Parallel id streams for one encoded sentence.

    ``char_ids`` has length L including [CLS]/[SEP]; ``pinyin_ids`` is L x C
    where C is the component count of the mode (0 columns for mode NONE).
    Special positions carry [P-PAD] pinyin ids. Segment ids are all zero; the
    two-row segment table exists only to keep the embedding sum four-way.
    """

    char_ids: np.ndarray
    pinyin_ids: np.ndarray
    segment_ids: np.ndarray

    @property
    def length(self) -> int:
        return int(self.char_ids.shape[0])

    @property
    def n_components(self) -> int:
        return int(self.pinyin_ids.shape[1])


def encode(
    text: str,
    cv: CharVocab,
    pdict: PinyinDict,
    mode: PinyinMode,
    max_len: int,
    pv: PinyinVocab | None = None,
) -> TokenSequence:
    """Encode text as [CLS] + chars + [SEP], truncated to ``max_len``.

    Unknown characters map to [UNK] and carry [P-UNK] pinyin ids; characters
    known to the vocabulary get their dictionary syllable's component ids.
    """
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    if mode is not PinyinMode.NONE and pv is None:
        raise ValueError("pinyin vocabulary required for pinyin modes")
    chars = list(text)[: max_len - 2]
    n_comp = mode.n_components
    char_ids = [CLS]
    pin_rows = [pinyin_pad_ids(mode)]
    for ch in chars:
        cid = cv.id_of(ch)
        char_ids.append(cid)
        if cid == UNK:
            pin_rows.append(pinyin_ids(None, mode, pv))
        else:
            pin_rows.append(pinyin_ids(to_syllable(ch, pdict), mode, pv))
    char_ids.append(SEP)
    pin_rows.append(pinyin_pad_ids(mode))
    length = len(char_ids)
    return TokenSequence(
        char_ids=np.asarray(char_ids, dtype=np.int64),
        pinyin_ids=np.asarray(pin_rows, dtype=np.int64).reshape(length, n_comp),
        segment_ids=np.zeros(length, dtype=np.int64),
    )
