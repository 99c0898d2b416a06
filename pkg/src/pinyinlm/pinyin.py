"""Character-to-pinyin dictionary, syllable decomposition, and pinyin vocabularies.

A pinyin syllable splits into an initial (onset), a final (rime), and a tone
(1-4, plus 0 for the neutral tone). Four input representations are supported,
from the coarsest (one id per toneless syllable) to the finest (separate
initial/final/tone ids); ``PinyinMode.NONE`` disables the pinyin stream
entirely for character-only baselines.
"""

from __future__ import annotations

import enum
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable

# The 23 Mandarin initials. Two-letter initials are listed first so that
# longest-prefix matching picks "zh" over "z".
INITIALS = (
    "zh", "ch", "sh",
    "b", "p", "m", "f", "d", "t", "n", "l",
    "g", "k", "h", "j", "q", "x", "r",
    "z", "c", "s", "y", "w",
)

# Sentinel for zero-initial syllables such as "an" or "er".
EMPTY_INITIAL = "∅"  # "∅"

# Reserved ids present at the head of every pinyin id table.
P_PAD, P_MASK, P_UNK = 0, 1, 2
P_RESERVED_TOKENS = ("[P-PAD]", "[P-MASK]", "[P-UNK]")


class PinyinError(ValueError):
    """Base error for dictionary parsing and syllable decomposition."""


class DecompositionError(PinyinError):
    pass


class DictionaryParseError(PinyinError):
    def __init__(self, path: str, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class DuplicateEntryError(DictionaryParseError):
    pass


def decompose(pinyin: str) -> tuple[str, str]:
    """Split a toneless pinyin string into (initial, final).

    The initial is the longest prefix drawn from the 23-initial inventory
    ("zh"/"ch"/"sh" win over their one-letter prefixes); everything after it
    is the final. Syllables with no matching prefix ("an", "er", ...) get the
    ``EMPTY_INITIAL`` sentinel. Raises ``DecompositionError`` when the final
    would be empty, e.g. for the bare string "zh".
    """
    if not pinyin or not pinyin.isascii() or not pinyin.islower():
        raise DecompositionError(f"not a lowercase ASCII pinyin string: {pinyin!r}")
    for initial in INITIALS:
        if pinyin.startswith(initial):
            final = pinyin[len(initial):]
            if not final:
                raise DecompositionError(f"empty final after initial {initial!r}: {pinyin!r}")
            return initial, final
    return EMPTY_INITIAL, pinyin


@dataclass(frozen=True)
class Syllable:
    """One pinyin syllable: toneless text plus its initial/final/tone parts."""

    text: str
    initial: str
    final: str
    tone: int

    @classmethod
    def parse(cls, toned: str) -> "Syllable":
        """Parse a pinyin string with a trailing tone digit, e.g. "zhong1".

        Tone digit 5 (the common convention for the neutral tone) is
        normalized to 0.
        """
        if len(toned) < 2 or toned[-1] not in "12345":
            raise DecompositionError(f"missing or bad tone digit: {toned!r}")
        tone = int(toned[-1]) % 5
        text = toned[:-1]
        initial, final = decompose(text)
        return cls(text=text, initial=initial, final=final, tone=tone)


@dataclass(frozen=True)
class PinyinDict:
    """Immutable map from a Chinese character to its (single) syllable."""

    entries: dict[str, Syllable]

    def get(self, ch: str) -> Syllable | None:
        return self.entries.get(ch)

    def __contains__(self, ch: str) -> bool:
        return ch in self.entries

    def __len__(self) -> int:
        return len(self.entries)


def to_syllable(ch: str, pdict: PinyinDict) -> Syllable | None:
    """Total lookup: the syllable for ``ch``, or None for out-of-dictionary
    characters (callers map None to the [P-UNK] ids)."""
    return pdict.get(ch)


def load_dictionary(path) -> PinyinDict:
    """Load a dictionary file of ``<char>\\t<pinyin><tone-digit>`` lines.

    Lines starting with ``#`` and blank lines are ignored. Each character may
    appear only once; tone digits are required (1-5, with 5 normalized to the
    neutral tone 0).
    """
    path = str(path)
    entries: dict[str, Syllable] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if "\t" not in line:
                raise DictionaryParseError(path, line_no, f"missing tab separator: {line!r}")
            ch, _, toned = line.partition("\t")
            if len(ch) != 1 or unicodedata.category(ch).startswith("Z"):
                raise DictionaryParseError(path, line_no, f"key must be a single character: {ch!r}")
            if ch in entries:
                raise DuplicateEntryError(path, line_no, f"duplicate character {ch!r}")
            try:
                entries[ch] = Syllable.parse(toned)
            except DecompositionError as exc:
                raise DictionaryParseError(path, line_no, str(exc)) from exc
    return PinyinDict(entries=entries)


def default_dictionary_path() -> str:
    """Path of the dictionary data file shipped with the package."""
    return str(resources.files("pinyinlm").joinpath("data/pinyin_dict.tsv"))


def load_default_dictionary() -> PinyinDict:
    return load_dictionary(default_dictionary_path())


class PinyinMode(enum.Enum):
    """Which pinyin representation (if any) accompanies each character."""

    NONE = "none"
    PLAIN = "plain"
    PLAIN_TONE = "plain_tone"
    INIT_FINAL = "init_final"
    INIT_FINAL_TONE = "init_final_tone"

    @property
    def components(self) -> tuple[str, ...]:
        return _MODE_COMPONENTS[self]

    @property
    def n_components(self) -> int:
        return len(_MODE_COMPONENTS[self])


_MODE_COMPONENTS = {
    PinyinMode.NONE: (),
    PinyinMode.PLAIN: ("syllable",),
    PinyinMode.PLAIN_TONE: ("syllable_tone",),
    PinyinMode.INIT_FINAL: ("initial", "final"),
    PinyinMode.INIT_FINAL_TONE: ("initial", "final", "tone"),
}


def _component_key(syll: Syllable, component: str) -> str:
    if component == "syllable":
        return syll.text
    if component == "syllable_tone":
        return f"{syll.text}{syll.tone}"
    if component == "initial":
        return syll.initial
    if component == "final":
        return syll.final
    if component == "tone":
        return str(syll.tone)
    raise ValueError(f"unknown component {component!r}")


@dataclass(frozen=True)
class PinyinVocab:
    """Dense id tables for every component of one ``PinyinMode``.

    Every table starts with the three reserved ids ([P-PAD]=0, [P-MASK]=1,
    [P-UNK]=2) followed by the distinct component values observed in the
    dictionary, sorted lexicographically for determinism.
    """

    mode: PinyinMode
    tables: tuple[dict[str, int], ...]
    tokens: tuple[tuple[str, ...], ...] = field(repr=False)

    @property
    def table_sizes(self) -> tuple[int, ...]:
        return tuple(len(t) for t in self.tables)

    def lookup(self, component_idx: int, key: str) -> int:
        return self.tables[component_idx].get(key, P_UNK)


def build_pinyin_vocab(pdict: PinyinDict, mode: PinyinMode) -> PinyinVocab:
    """Enumerate every component value in the dictionary into dense id tables."""
    if mode is PinyinMode.NONE:
        raise ValueError("mode NONE has no pinyin vocabulary")
    tables = []
    token_lists = []
    for component in mode.components:
        values = sorted({_component_key(s, component) for s in pdict.entries.values()})
        tokens = P_RESERVED_TOKENS + tuple(values)
        tables.append({tok: i for i, tok in enumerate(tokens)})
        token_lists.append(tokens)
    return PinyinVocab(mode=mode, tables=tuple(tables), tokens=tuple(token_lists))


def pinyin_ids(syll: Syllable | None, mode: PinyinMode, pv: PinyinVocab | None) -> list[int]:
    """Component ids for one syllable; [P-UNK] everywhere for absent ones.

    Total: never raises for any input character, including characters outside
    the dictionary (``syll=None``) and syllables with components missing from
    the vocabulary.
    """
    if mode is PinyinMode.NONE:
        return []
    assert pv is not None and pv.mode is mode
    if syll is None:
        return [P_UNK] * mode.n_components
    return [pv.lookup(i, _component_key(syll, c)) for i, c in enumerate(mode.components)]


def pinyin_mask_ids(mode: PinyinMode) -> list[int]:
    return [P_MASK] * mode.n_components


def pinyin_pad_ids(mode: PinyinMode) -> list[int]:
    return [P_PAD] * mode.n_components
