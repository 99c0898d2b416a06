"""Dynamic dual-stream masking: corrupt characters and pinyin, keep recovery labels.

Candidate positions are drawn uniformly at ``select_rate`` over the
non-special tokens, then each candidate takes one branch:

* with probability ``mask_prob``, a mask treatment, split by
  ``task_proportions`` into masking character+pinyin together, character
  only, or pinyin only;
* with probability ``confusion_frac``, the character is swapped for a
  same-pronunciation character from the confusion set (its pinyin ids follow
  the replacement);
* otherwise the position is left unchanged but still labeled.

Character labels cover every branch that corrupts or keeps the character;
pinyin labels exist exactly where the pinyin stream was masked. Re-masking
per epoch is a pure function of (seed, epoch, instance index).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np

from .confusion import (
    ConfusionSet,
    NoConfusionClassError,
    PROVENANCE_PRETRAIN,
    SamplingStrategy,
    sample_confusable,
)
from .pinyin import P_MASK, PinyinDict, PinyinVocab, pinyin_ids, to_syllable
from .vocab import CLS, MASK, PAD, SEP, CharVocab, TokenSequence

IGNORE_INDEX = -100

# Sub-stream tags for deriving independent RNG streams from one seed.
_MASKING_STREAM = 0

REPLACEMENT_POOL_CONFUSION = "confusion"
REPLACEMENT_POOL_VOCAB = "vocab"


class MaskingScheme(enum.Enum):
    """How the pinyin stream participates in pretraining.

    CONFUSION_ONLY is the character-only recipe (no pinyin stream; the
    replace branch is the only phonetic signal). PARALLEL feeds pinyin in
    parallel on the input side; PARALLEL_OUT additionally trains a
    pinyin-recovery output head.
    """

    CONFUSION_ONLY = "confusion_only"
    PARALLEL = "parallel"
    PARALLEL_OUT = "parallel_out"


class CorruptionTag(enum.IntEnum):
    NOT_CANDIDATE = 0
    TOGETHER_MASK = 1
    TOKEN_MASK = 2
    PINYIN_MASK = 3
    CONFUSION_REPLACE = 4
    UNCHANGED = 5


@dataclass(frozen=True)
class MaskingConfig:
    select_rate: float = 0.45
    mask_prob: float = 0.8
    confusion_frac: float = 0.1
    unchanged_frac: float = 0.1
    task_proportions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    strategy: SamplingStrategy = SamplingStrategy.FREQUENCY
    scheme: MaskingScheme = MaskingScheme.PARALLEL_OUT
    # "vocab" swaps the confusion-set replacement branch for BERT-style
    # random-vocabulary replacement; used by the character-only baseline.
    replacement_pool: str = REPLACEMENT_POOL_CONFUSION

    def violations(self) -> list[str]:
        problems = []
        if not 0.0 <= self.select_rate <= 1.0:
            problems.append(f"select_rate must be in [0, 1], got {self.select_rate}")
        branch_sum = self.mask_prob + self.confusion_frac + self.unchanged_frac
        if abs(branch_sum - 1.0) > 1e-9:
            problems.append(
                "mask_prob + confusion_frac + unchanged_frac must sum to 1, "
                f"got {branch_sum}"
            )
        if min(self.mask_prob, self.confusion_frac, self.unchanged_frac) < 0:
            problems.append("branch fractions must be non-negative")
        if len(self.task_proportions) != 3 or min(self.task_proportions) < 0:
            problems.append("task_proportions must be three non-negative numbers")
        elif abs(sum(self.task_proportions) - 1.0) > 1e-9:
            problems.append(
                f"task_proportions must sum to 1, got {sum(self.task_proportions)}"
            )
        if self.replacement_pool not in (REPLACEMENT_POOL_CONFUSION, REPLACEMENT_POOL_VOCAB):
            problems.append(f"unknown replacement_pool {self.replacement_pool!r}")
        return problems

    def validated(self) -> "MaskingConfig":
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))
        return self


@dataclass(frozen=True)
class MaskedInstance:
    """One corrupted training instance with dual recovery labels.

    ``token_labels``/``pinyin_labels`` hold original ids at supervised
    positions and ``IGNORE_INDEX`` elsewhere. ``corruption_log`` records the
    branch taken at every position (``CorruptionTag`` values).
    """

    input_char_ids: np.ndarray
    input_pinyin_ids: np.ndarray
    token_labels: np.ndarray
    pinyin_labels: np.ndarray
    segment_ids: np.ndarray
    corruption_log: np.ndarray
    downgraded: int = 0

    @property
    def length(self) -> int:
        return int(self.input_char_ids.shape[0])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_candidates(seq: TokenSequence, rate: float, rng: np.random.Generator) -> list[int]:
    """Sample round(rate * N) of the N non-special positions, without replacement."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    eligible = [
        i for i, cid in enumerate(seq.char_ids.tolist()) if cid not in (PAD, CLS, SEP, MASK)
    ]
    k = round_half_up(rate * len(eligible))
    if k == 0:
        return []
    picked = rng.choice(len(eligible), size=k, replace=False)
    return sorted(eligible[i] for i in picked)


def apply_masking(
    seq: TokenSequence,
    cfg: MaskingConfig,
    cs: ConfusionSet | None,
    rng: np.random.Generator,
    *,
    cv: CharVocab,
    pdict: PinyinDict | None = None,
    pv: PinyinVocab | None = None,
) -> MaskedInstance:
    """Corrupt one sequence according to the masking configuration.

    Requires a pretrain-provenance confusion set unless the replacement pool
    is "vocab". A candidate drawn for confusion replacement whose character
    has no confusion class is downgraded to the unchanged branch (and counted
    on the returned instance).
    """
    cfg.validated()
    if cfg.replacement_pool == REPLACEMENT_POOL_CONFUSION:
        if cs is None:
            raise ValueError("confusion-pool masking requires a confusion set")
        cs.require(PROVENANCE_PRETRAIN)
    if cfg.scheme is MaskingScheme.CONFUSION_ONLY and seq.n_components != 0:
        raise ValueError("scheme CONFUSION_ONLY requires pinyin mode NONE")

    char_ids = seq.char_ids.copy()
    pin_ids = seq.pinyin_ids.copy()
    length = seq.length
    n_comp = seq.n_components
    token_labels = np.full(length, IGNORE_INDEX, dtype=np.int64)
    pinyin_labels = np.full((length, n_comp), IGNORE_INDEX, dtype=np.int64)
    log = np.full(length, int(CorruptionTag.NOT_CANDIDATE), dtype=np.int8)
    mask_row = np.full(n_comp, P_MASK, dtype=np.int64)
    downgraded = 0

    t_together, t_token, _ = cfg.task_proportions
    for pos in select_candidates(seq, cfg.select_rate, rng):
        orig_char = int(seq.char_ids[pos])
        u = rng.random()
        if u < cfg.mask_prob:
            if cfg.scheme is MaskingScheme.CONFUSION_ONLY:
                tag = CorruptionTag.TOKEN_MASK
            elif u < cfg.mask_prob * t_together:
                tag = CorruptionTag.TOGETHER_MASK
            elif u < cfg.mask_prob * (t_together + t_token):
                tag = CorruptionTag.TOKEN_MASK
            else:
                tag = CorruptionTag.PINYIN_MASK
        elif u < cfg.mask_prob + cfg.confusion_frac:
            tag = CorruptionTag.CONFUSION_REPLACE
        else:
            tag = CorruptionTag.UNCHANGED

        if tag is CorruptionTag.CONFUSION_REPLACE:
            replacement = _draw_replacement(cfg, cs, cv, orig_char, rng)
            if replacement is None:
                tag = CorruptionTag.UNCHANGED
                downgraded += 1
            else:
                char_ids[pos] = replacement
                if n_comp:
                    repl_ch = cv.id_to_token[replacement]
                    syll = to_syllable(repl_ch, pdict) if pdict is not None else None
                    pin_ids[pos] = np.asarray(pinyin_ids(syll, pv.mode, pv), dtype=np.int64)
                token_labels[pos] = orig_char

        if tag is CorruptionTag.TOGETHER_MASK:
            char_ids[pos] = MASK
            pin_ids[pos] = mask_row
            token_labels[pos] = orig_char
            pinyin_labels[pos] = seq.pinyin_ids[pos]
        elif tag is CorruptionTag.TOKEN_MASK:
            char_ids[pos] = MASK
            token_labels[pos] = orig_char
        elif tag is CorruptionTag.PINYIN_MASK:
            pin_ids[pos] = mask_row
            pinyin_labels[pos] = seq.pinyin_ids[pos]
        elif tag is CorruptionTag.UNCHANGED:
            token_labels[pos] = orig_char
        log[pos] = int(tag)

    return MaskedInstance(
        input_char_ids=char_ids,
        input_pinyin_ids=pin_ids,
        token_labels=token_labels,
        pinyin_labels=pinyin_labels,
        segment_ids=seq.segment_ids.copy(),
        corruption_log=log,
        downgraded=downgraded,
    )


def _draw_replacement(
    cfg: MaskingConfig,
    cs: ConfusionSet | None,
    cv: CharVocab,
    orig_char: int,
    rng: np.random.Generator,
) -> int | None:
    if cfg.replacement_pool == REPLACEMENT_POOL_VOCAB:
        first = cv.char_ids().start
        n = len(cv) - first
        if orig_char < first:
            # Original is [UNK] or another special: any real character works.
            return first + int(rng.integers(n)) if n >= 1 else None
        if n <= 1:
            return None
        # Uniform over real characters, excluding the original.
        draw = first + int(rng.integers(n - 1))
        if draw >= orig_char:
            draw += 1
        return draw
    ch = cv.id_to_token[orig_char]
    try:
        replacement = sample_confusable(cs, ch, cfg.strategy, rng)
    except NoConfusionClassError:
        return None
    return cv.token_to_id[replacement]


def masking_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent, reproducible RNG stream for one (seed, epoch, instance)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_MASKING_STREAM, epoch, index))
    return np.random.default_rng(ss)


def remask_epoch(
    seqs: list[TokenSequence],
    cfg: MaskingConfig,
    cs: ConfusionSet | None,
    seed: int,
    epoch: int,
    *,
    cv: CharVocab,
    pdict: PinyinDict | None = None,
    pv: PinyinVocab | None = None,
) -> list[MaskedInstance]:
    """Re-corrupt a batch for one epoch; bit-identical given (seed, epoch)."""
    return [
        apply_masking(seq, cfg, cs, masking_rng(seed, epoch, i), cv=cv, pdict=pdict, pv=pv)
        for i, seq in enumerate(seqs)
    ]


def write_corruption_log(instances: list[MaskedInstance], path) -> None:
    """Audit export: one JSON line per instance with positions and branch tags."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, inst in enumerate(instances):
            positions = np.nonzero(inst.corruption_log != int(CorruptionTag.NOT_CANDIDATE))[0]
            record = {
                "index": i,
                "positions": [int(p) for p in positions],
                "tags": [CorruptionTag(int(inst.corruption_log[p])).name for p in positions],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
