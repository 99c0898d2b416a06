"""Homophone confusion sets: pretraining classes and the leak-free eval set.

The pretraining set groups in-vocabulary characters by toneless pinyin and
weights each class member by its corpus usage frequency. The eval set is
built from aligned clean/noisy sentence pairs instead, so the noise used to
measure robustness never comes from the set the model was pretrained with;
the two are distinguished by a provenance tag that downstream code checks.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .pinyin import PinyinDict
from .vocab import CharVocab

WEIGHT_TOL = 1e-9

PROVENANCE_PRETRAIN = "pretrain"
PROVENANCE_EVAL = "eval"


class ProvenanceError(TypeError):
    """A confusion set with the wrong provenance was passed."""


class NoConfusionClassError(KeyError):
    """The queried character belongs to no confusion class."""


class SamplingStrategy(enum.Enum):
    FREQUENCY = "frequency"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class ConfusionSet:
    """Pinyin-keyed character classes with normalized weights.

    ``classes`` maps a toneless pinyin to ``[(char, weight), ...]`` with the
    weights summing to 1 per class. Eval-provenance sets additionally carry
    ``pairs``: observed clean->noisy substitutions with raw counts, which is
    what noise injection samples from (near-pinyin ASR confusions are kept
    as-is rather than being forced into same-pinyin classes).
    """

    provenance: str
    classes: dict[str, list[tuple[str, float]]]
    char_to_class: dict[str, str] = field(repr=False)
    pairs: dict[str, list[tuple[str, int]]] = field(default_factory=dict, repr=False)
    meta: dict = field(default_factory=dict, repr=False)

    def class_of(self, ch: str) -> list[tuple[str, float]] | None:
        key = self.char_to_class.get(ch)
        return None if key is None else self.classes[key]

    def require(self, provenance: str) -> "ConfusionSet":
        if self.provenance != provenance:
            raise ProvenanceError(
                f"expected a {provenance!r} confusion set, got {self.provenance!r}"
            )
        return self


def build_confusion_set(cv: CharVocab, pdict: PinyinDict) -> ConfusionSet:
    """Group every in-vocabulary dictionary character by toneless pinyin.

    Weights are usage frequencies normalized per class; a class whose total
    frequency is zero falls back to uniform weights (normalization is
    undefined at a zero sum).
    """
    groups: dict[str, list[tuple[str, int]]] = {}
    for cid in cv.char_ids():
        ch = cv.id_to_token[cid]
        syll = pdict.get(ch)
        if syll is None:
            continue
        groups.setdefault(syll.text, []).append((ch, cv.freq[cid]))
    classes: dict[str, list[tuple[str, float]]] = {}
    char_to_class: dict[str, str] = {}
    for key in sorted(groups):
        members = sorted(groups[key])
        total = sum(n for _, n in members)
        if total > 0:
            weighted = [(ch, n / total) for ch, n in members]
        else:
            weighted = [(ch, 1.0 / len(members)) for ch, _ in members]
        classes[key] = weighted
        for ch, _ in weighted:
            char_to_class[ch] = key
    return ConfusionSet(
        provenance=PROVENANCE_PRETRAIN, classes=classes, char_to_class=char_to_class
    )


def sample_confusable(
    cs: ConfusionSet,
    ch: str,
    strategy: SamplingStrategy,
    rng: np.random.Generator,
) -> str:
    """Draw a replacement for ``ch`` from its confusion class.

    The original character is excluded (a "replacement" should perturb) and
    the remaining weights renormalized; a singleton class necessarily returns
    ``ch`` itself. Raises ``NoConfusionClassError`` when ``ch`` has no class.
    """
    members = cs.class_of(ch)
    if members is None:
        raise NoConfusionClassError(ch)
    candidates = [(c, w) for c, w in members if c != ch]
    if not candidates:
        return ch
    chars = [c for c, _ in candidates]
    if strategy is SamplingStrategy.UNIFORM:
        return chars[rng.integers(len(chars))]
    weights = np.array([w for _, w in candidates], dtype=np.float64)
    weights /= weights.sum()
    return chars[rng.choice(len(chars), p=weights)]


def build_eval_confusion_set(
    pairs_path,
    pdict: PinyinDict,
    base: ConfusionSet | None = None,
) -> ConfusionSet:
    """Extract confusion pairs from aligned ``<clean>\\t<noisy>`` sentence pairs.

    Every position where the two sides differ contributes one
    (clean char -> noisy char) observation. Counts aggregate into classes
    keyed by the clean character's toneless pinyin; clean characters outside
    the dictionary aggregate under ``"?"``. Pairs of unequal length are
    skipped and counted in ``meta["skipped_pairs"]``. An optional ``base``
    eval set's pair counts are merged in first.
    """
    pair_counts: dict[str, dict[str, int]] = {}
    if base is not None:
        base.require(PROVENANCE_EVAL)
        for clean, noisy_list in base.pairs.items():
            pair_counts[clean] = {noisy: n for noisy, n in noisy_list}
    skipped = 0
    with open(pairs_path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            clean, _, noisy = line.partition("\t")
            if len(clean) != len(noisy) or not noisy:
                skipped += 1
                continue
            for c, n in zip(clean, noisy):
                if c != n:
                    bucket = pair_counts.setdefault(c, {})
                    bucket[n] = bucket.get(n, 0) + 1
    pairs = {
        clean: sorted(bucket.items()) for clean, bucket in sorted(pair_counts.items())
    }
    classes: dict[str, list[tuple[str, float]]] = {}
    char_to_class: dict[str, str] = {}
    groups: dict[str, dict[str, int]] = {}
    for clean, bucket in pairs.items():
        syll = pdict.get(clean)
        key = syll.text if syll is not None else "?"
        agg = groups.setdefault(key, {})
        for noisy, n in bucket:
            agg[noisy] = agg.get(noisy, 0) + n
        char_to_class[clean] = key
    for key in sorted(groups):
        total = sum(groups[key].values())
        classes[key] = [(ch, n / total) for ch, n in sorted(groups[key].items())]
    return ConfusionSet(
        provenance=PROVENANCE_EVAL,
        classes=classes,
        char_to_class=char_to_class,
        pairs=pairs,
        meta={"skipped_pairs": skipped},
    )


def save_confusion_set(cs: ConfusionSet, path) -> None:
    payload: dict = {
        "provenance": cs.provenance,
        "classes": {k: [[c, w] for c, w in v] for k, v in cs.classes.items()},
    }
    if cs.provenance == PROVENANCE_EVAL:
        payload["pairs"] = {k: [[c, n] for c, n in v] for k, v in cs.pairs.items()}
        payload["char_class"] = dict(cs.char_to_class)
        payload["meta"] = cs.meta
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=1, sort_keys=True)
        fh.write("\n")


def load_confusion_set(path) -> ConfusionSet:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    provenance = payload["provenance"]
    if provenance not in (PROVENANCE_PRETRAIN, PROVENANCE_EVAL):
        raise ValueError(f"unknown provenance {provenance!r}")
    classes = {k: [(c, float(w)) for c, w in v] for k, v in payload["classes"].items()}
    for key, members in classes.items():
        total = sum(w for _, w in members)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"class {key!r} weights sum to {total}, expected 1")
    pairs = {
        k: [(c, int(n)) for c, n in v] for k, v in payload.get("pairs", {}).items()
    }
    if provenance == PROVENANCE_EVAL:
        char_to_class = dict(payload["char_class"])
    else:
        char_to_class = {}
        for key, members in classes.items():
            for ch, _ in members:
                char_to_class[ch] = key
    return ConfusionSet(
        provenance=provenance,
        classes=classes,
        char_to_class=char_to_class,
        pairs=pairs,
        meta=payload.get("meta", {}),
    )
