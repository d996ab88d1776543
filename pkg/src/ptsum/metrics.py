"""Automatic evaluation: BLEU-n, ROUGE F1 variants, brand retention.

All functions work on token lists produced by the corpus tokenizer and
return fractions in [0, 1]; reports multiply by 100. BLEU is corpus-level
(clipped modified precisions with a brevity penalty, no smoothing); ROUGE
is per example with multi-reference max, averaged over the corpus.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Triplet, display_units, join_tokens

TokenSeq = Sequence[str]


def ngram_counts(tokens: TokenSeq, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(cand_len: int, references: Sequence[TokenSeq]) -> int:
    # ties go to the shorter reference
    return min((len(r) for r in references), key=lambda rl: (abs(rl - cand_len), rl))


def bleu(
    candidates: Sequence[TokenSeq],
    references: Sequence[Sequence[TokenSeq]],
    n: int = 4,
) -> float:
    """Corpus BLEU-n: geometric mean of modified k-gram precisions for
    k = 1..n times the brevity penalty. Counts are clipped against the
    per-reference maximum; a hard zero at any order gives 0 (no smoothing).
    """
    if not candidates:
        raise ValueError("bleu: empty candidate set")
    if len(candidates) != len(references):
        raise ValueError("bleu: candidates and references are not aligned")
    clipped = np.zeros(n, dtype=np.int64)
    total = np.zeros(n, dtype=np.int64)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("bleu: example without references")
        cand_len += len(cand)
        ref_len += _closest_ref_length(len(cand), refs)
        for k in range(1, n + 1):
            counts = ngram_counts(cand, k)
            max_ref: Counter = Counter()
            for ref in refs:
                for gram, c in ngram_counts(ref, k).items():
                    max_ref[gram] = max(max_ref[gram], c)
            total[k - 1] += sum(counts.values())
            clipped[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
    if np.any(total == 0) or np.any(clipped == 0):
        return 0.0
    log_precision = float(np.mean(np.log(clipped / total)))
    brevity = 1.0 if cand_len > ref_len else float(np.exp(1.0 - ref_len / max(cand_len, 1)))
    return brevity * float(np.exp(log_precision))


def sentence_bleu(candidate: TokenSeq, references: Sequence[TokenSeq], n: int = 4) -> float:
    return bleu([candidate], [references], n=n)


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _rouge_n_single(candidate: TokenSeq, reference: TokenSeq, n: int) -> float:
    if not reference:
        raise ValueError("rouge: empty reference")
    cand = ngram_counts(candidate, n)
    ref = ngram_counts(reference, n)
    overlap = sum(min(c, ref[g]) for g, c in cand.items())
    cand_total = sum(cand.values())
    ref_total = sum(ref.values())
    precision = overlap / cand_total if cand_total else 0.0
    recall = overlap / ref_total if ref_total else 0.0
    return _f1(precision, recall)


def _lcs_length(a: TokenSeq, b: TokenSeq) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def _rouge_l_single(candidate: TokenSeq, reference: TokenSeq) -> float:
    if not reference:
        raise ValueError("rouge: empty reference")
    lcs = _lcs_length(candidate, reference)
    precision = lcs / len(candidate) if candidate else 0.0
    recall = lcs / len(reference)
    return _f1(precision, recall)


def rouge(candidate: TokenSeq, references: Sequence[TokenSeq], variant) -> float:
    """ROUGE F1 for variant 1, 2, or "L"; multi-reference takes the max."""
    if not references:
        raise ValueError("rouge: empty reference list")
    if variant == "L":
        return max(_rouge_l_single(candidate, r) for r in references)
    if variant in (1, 2):
        return max(_rouge_n_single(candidate, r, variant) for r in references)
    raise ValueError(f"unknown rouge variant {variant!r}")


def corpus_rouge(
    candidates: Sequence[TokenSeq],
    references: Sequence[Sequence[TokenSeq]],
    variant,
) -> float:
    if len(candidates) != len(references):
        raise ValueError("rouge: candidates and references are not aligned")
    scores = [rouge(c, r, variant) for c, r in zip(candidates, references)]
    return float(np.mean(scores)) if scores else 0.0


# ---------------------------------------------------------------------------
# brand retention
# ---------------------------------------------------------------------------


def brand_variants(brand: str) -> list[str]:
    """The "/"-separated alternative writings of a brand field, with
    whitespace normalized to single spaces."""
    out = []
    for part in brand.split("/"):
        cleaned = " ".join(part.split())
        if cleaned:
            out.append(cleaned)
    return out


def retains_brand(output_text: str, brand: str) -> bool:
    """An output is correct iff at least one complete brand variant occurs
    contiguously and intact in it (exact substring, no fuzz)."""
    normalized = " ".join(output_text.split())
    return any(v in normalized for v in brand_variants(brand))


def brand_retention_error(outputs: Sequence[str], triplets: Sequence[Triplet]) -> float:
    """Fraction of outputs that fail to retain their record's brand.
    Records with an empty brand field are excluded."""
    if len(outputs) != len(triplets):
        raise ValueError("outputs and records are not aligned")
    total = 0
    wrong = 0
    for text, trip in zip(outputs, triplets):
        if not brand_variants(trip.brand):
            continue
        total += 1
        if not retains_brand(text, trip.brand):
            wrong += 1
    return wrong / total if total else 0.0


def truncation_baseline(title_tokens: TokenSeq, limit: int = 10) -> str:
    """Deployed status-quo baseline: the longest token prefix whose display
    length stays within ``limit``."""
    kept: list[str] = []
    units = 0
    for tok in title_tokens:
        width = display_units([tok])
        if units + width > limit:
            break
        kept.append(tok)
        units += width
    return join_tokens(kept)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

_METRIC_KEYS = ("bleu1", "bleu2", "bleu4", "rouge1", "rouge2", "rougeL")


@dataclass
class EvalReport:
    corpus: dict[str, float]  # x100 scores
    per_example: list[dict[str, float]]
    counts: dict[str, int]
    brand_error_rate: float | None = None

    def to_json(self) -> str:
        payload = {"corpus": self.corpus, "counts": self.counts}
        if self.brand_error_rate is not None:
            payload["brand_error_rate"] = self.brand_error_rate
        return json.dumps(payload, indent=2, ensure_ascii=False)


def evaluate_corpus(
    candidates: Sequence[TokenSeq],
    references: Sequence[Sequence[TokenSeq]],
) -> EvalReport:
    corpus_scores = {
        "bleu1": 100.0 * bleu(candidates, references, n=1),
        "bleu2": 100.0 * bleu(candidates, references, n=2),
        "bleu4": 100.0 * bleu(candidates, references, n=4),
        "rouge1": 100.0 * corpus_rouge(candidates, references, 1),
        "rouge2": 100.0 * corpus_rouge(candidates, references, 2),
        "rougeL": 100.0 * corpus_rouge(candidates, references, "L"),
    }
    per_example = []
    for cand, refs in zip(candidates, references):
        per_example.append(
            {
                "bleu1": 100.0 * sentence_bleu(cand, refs, n=1),
                "bleu2": 100.0 * sentence_bleu(cand, refs, n=2),
                "bleu4": 100.0 * sentence_bleu(cand, refs, n=4),
                "rouge1": 100.0 * rouge(cand, refs, 1),
                "rouge2": 100.0 * rouge(cand, refs, 2),
                "rougeL": 100.0 * rouge(cand, refs, "L"),
            }
        )
    return EvalReport(
        corpus=corpus_scores,
        per_example=per_example,
        counts={"examples": len(candidates)},
    )


def write_per_example_csv(path: str | Path, report: EvalReport) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("index",) + _METRIC_KEYS)
        for i, row in enumerate(report.per_example):
            writer.writerow([i] + [f"{row[k]:.4f}" for k in _METRIC_KEYS])
