"""Corpus handling: tokenization, vocabulary, indexing, splits, batching.

Input records are <title, knowledge, short title> triplets. Tokenization is
character-level for CJK text while Latin/digit runs (including in-word
hyphen, period, apostrophe, as found in brand names) stay whole. Out-of-
vocabulary surface forms get per-example slots from a fixed pool of unknown
ids so they remain copyable and distinguishable.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = 0
EOS_ID = 1
SEP_ID = 2
BOS_ID = 3
UNK_BASE = 4

PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
SEP_TOKEN = "/"
BOS_TOKEN = "<s>"

DEFAULT_UNK_POOL = 32
SHORT_TITLE_LIMIT = 10

# Latin/digit run with optional in-word punctuation; otherwise one symbol per
# token (which makes CJK character-level automatically).
_RUN_RE = re.compile(r"[A-Za-z0-9]+(?:['’.\-][A-Za-z0-9]+)*|\S")
_SPACEY_RE = re.compile(r"[A-Za-z0-9]+(?:['’.\-][A-Za-z0-9]+)*\Z")
_NUMERIC_RE = re.compile(r"[0-9]+(?:['’.\-][0-9]+)*\Z")


def tokenize(text: str) -> list[str]:
    """Split text into copyable units; whitespace separates and is dropped."""
    return _RUN_RE.findall(text)


def filter_numbers(tokens: Iterable[str], brand: str) -> list[str]:
    """Drop purely numeric tokens unless they occur inside the brand text."""
    return [t for t in tokens if not _NUMERIC_RE.fullmatch(t) or t in brand]


def display_units(tokens: Sequence[str]) -> int:
    """Display length: one unit per CJK character and one per Latin run.

    Tokens are single CJK characters or whole runs, so this is the token
    count.
    """
    return len(tokens)


def join_tokens(tokens: Sequence[str]) -> str:
    """Render tokens as text: CJK concatenates bare, adjacent Latin runs get
    a single separating space."""
    parts: list[str] = []
    prev_spacey = False
    for t in tokens:
        spacey = bool(_SPACEY_RE.fullmatch(t))
        if spacey and prev_spacey:
            parts.append(" ")
        parts.append(t)
        prev_spacey = spacey
    return "".join(parts)


@dataclass(frozen=True)
class Triplet:
    """One product record: full title, knowledge (brand + commodity), the
    reference short title, and a category label for stratification."""

    title: str
    brand: str
    commodity: str
    short_title: str
    category: str

    def has_knowledge(self) -> bool:
        return bool(self.brand.strip()) or bool(self.commodity.strip())


@dataclass(frozen=True)
class TokenizedTriplet:
    title: tuple[str, ...]
    brand: tuple[str, ...]
    commodity: tuple[str, ...]
    short_title: tuple[str, ...]


def triplet_tokens(t: Triplet) -> TokenizedTriplet:
    """Tokenize all fields with the numeric filter applied uniformly."""
    return TokenizedTriplet(
        title=tuple(filter_numbers(tokenize(t.title), t.brand)),
        brand=tuple(filter_numbers(tokenize(t.brand), t.brand)),
        commodity=tuple(filter_numbers(tokenize(t.commodity), t.brand)),
        short_title=tuple(filter_numbers(tokenize(t.short_title), t.brand)),
    )


class Vocabulary:
    """Token/id bijection with a fixed special prefix.

    Ids 0..3 are padding, end-of-sequence, the knowledge separator "/", and
    the decoder start symbol; the next ``unk_pool_size`` ids are the shared
    pool for per-example out-of-vocabulary forms. Regular tokens follow in
    descending-count order (ties broken lexicographically).
    """

    def __init__(self, tokens: Sequence[str], unk_pool_size: int = DEFAULT_UNK_POOL):
        self.unk_pool_size = unk_pool_size
        specials = [PAD_TOKEN, EOS_TOKEN, SEP_TOKEN, BOS_TOKEN]
        specials += [f"<unk_{i}>" for i in range(unk_pool_size)]
        self.itos: list[str] = specials + list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def num_specials(self) -> int:
        return UNK_BASE + self.unk_pool_size

    def id_of(self, token: str) -> int | None:
        return self.stoi.get(token)

    def token_of(self, idx: int) -> str:
        return self.itos[idx]

    def unk_id(self, slot: int) -> int:
        return UNK_BASE + slot

    def unk_slot(self, idx: int) -> int | None:
        if UNK_BASE <= idx < self.num_specials:
            return idx - UNK_BASE
        return None

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        pool = sum(1 for t in lines if re.fullmatch(r"<unk_\d+>", t))
        vocab = cls.__new__(cls)
        vocab.unk_pool_size = pool
        vocab.itos = lines
        vocab.stoi = {t: i for i, t in enumerate(lines)}
        return vocab


def build_vocabulary(
    token_streams: Iterable[Iterable[str]],
    min_count: int = 2,
    unk_pool_size: int = DEFAULT_UNK_POOL,
) -> Vocabulary:
    """Count tokens over training-split streams and keep those with count
    strictly greater than ``min_count``."""
    counts: Counter[str] = Counter()
    for stream in token_streams:
        counts.update(stream)
    counts.pop(SEP_TOKEN, None)  # "/" is always the separator special
    kept = [t for t, c in counts.items() if c > min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept, unk_pool_size=unk_pool_size)


def vocabulary_from_triplets(
    triplets: Iterable[Triplet],
    min_count: int = 2,
    unk_pool_size: int = DEFAULT_UNK_POOL,
) -> Vocabulary:
    def streams():
        for t in triplets:
            tok = triplet_tokens(t)
            yield tok.title
            yield tok.brand
            yield tok.commodity
            yield tok.short_title

    return build_vocabulary(streams(), min_count=min_count, unk_pool_size=unk_pool_size)


@dataclass
class IndexedExample:
    """A triplet mapped to id space.

    ``title_ids`` ends with the end-of-sequence id; ``knowledge_ids`` is
    brand ids, the separator, then commodity ids; ``target_ids`` ends with
    the end-of-sequence id. ``oov_tokens`` records, per pool slot, the
    surface form captured for this example.
    """

    title_ids: np.ndarray
    knowledge_ids: np.ndarray
    target_ids: np.ndarray
    oov_tokens: list[str]
    triplet: Triplet | None = None

    @property
    def title_tokens_no_eos(self) -> np.ndarray:
        return self.title_ids[:-1]


class _OovTable:
    def __init__(self, pool_size: int):
        self.pool_size = pool_size
        self.slots: dict[str, int] = {}
        self.overflowed = False

    def assign(self, token: str) -> int:
        slot = self.slots.get(token)
        if slot is not None:
            return slot
        if len(self.slots) < self.pool_size:
            slot = len(self.slots)
            self.slots[token] = slot
            return slot
        self.overflowed = True
        return self.pool_size - 1

    def surfaces(self) -> list[str]:
        out = [""] * min(len(self.slots), self.pool_size)
        for token, slot in self.slots.items():
            if out[slot] == "":
                out[slot] = token
        return out


def encode_example(triplet: Triplet, vocab: Vocabulary) -> IndexedExample:
    """Index one triplet, assigning pool slots to unseen surface forms in
    first-occurrence order (title first, then knowledge, then target)."""
    if not triplet.has_knowledge():
        raise ValueError(
            f"record has neither brand nor commodity knowledge: {triplet.title!r}"
        )
    tok = triplet_tokens(triplet)
    oov = _OovTable(vocab.unk_pool_size)

    def to_ids(tokens: Sequence[str]) -> list[int]:
        ids = []
        for t in tokens:
            idx = vocab.stoi.get(t)
            ids.append(vocab.unk_id(oov.assign(t)) if idx is None else idx)
        return ids

    title_ids = to_ids(tok.title) + [EOS_ID]
    knowledge_ids = to_ids(tok.brand) + [SEP_ID] + to_ids(tok.commodity)
    target_ids = to_ids(tok.short_title) + [EOS_ID]
    if oov.overflowed:
        log.warning(
            "out-of-vocabulary pool exhausted for %r; extra forms share the last slot",
            triplet.title[:40],
        )
    return IndexedExample(
        title_ids=np.asarray(title_ids, dtype=np.int64),
        knowledge_ids=np.asarray(knowledge_ids, dtype=np.int64),
        target_ids=np.asarray(target_ids, dtype=np.int64),
        oov_tokens=oov.surfaces(),
        triplet=triplet,
    )


def decode_ids(ids: Iterable[int], vocab: Vocabulary, example: IndexedExample) -> list[str]:
    """Map ids back to surface tokens using the example's pool table."""
    out = []
    for idx in ids:
        slot = vocab.unk_slot(int(idx))
        if slot is not None:
            if slot >= len(example.oov_tokens):
                raise ValueError(f"unknown-pool slot {slot} has no recorded surface")
            out.append(example.oov_tokens[slot])
        else:
            out.append(vocab.token_of(int(idx)))
    return out


# ---------------------------------------------------------------------------
# splitting and batching
# ---------------------------------------------------------------------------


def stratified_split(
    dataset: Sequence[Triplet],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[list[Triplet], list[Triplet], list[Triplet]]:
    """Split per category so each split's category proportions match
    ``ratios`` within one record; deterministic for a fixed seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    by_cat: dict[str, list[Triplet]] = {}
    for t in dataset:
        by_cat.setdefault(t.category, []).append(t)

    rng = np.random.default_rng(seed)
    splits: tuple[list[Triplet], ...] = ([], [], [])
    for cat in sorted(by_cat):
        records = by_cat[cat]
        n = len(records)
        if n < 3:
            log.warning("category %r has %d records; keeping all in train", cat, n)
            splits[0].extend(records)
            continue
        order = rng.permutation(n)
        base = [int(np.floor(r * n)) for r in ratios]
        frac = [r * n - b for r, b in zip(ratios, base)]
        for _ in range(n - sum(base)):
            i = int(np.argmax(frac))
            base[i] += 1
            frac[i] = -1.0
        start = 0
        for part, count in zip(splits, base):
            part.extend(records[i] for i in order[start : start + count])
            start += count
    return splits


@dataclass
class Batch:
    """Right-padded id matrices with boolean masks over real positions."""

    examples: list[IndexedExample]
    title_ids: np.ndarray
    title_mask: np.ndarray
    knowledge_ids: np.ndarray
    knowledge_mask: np.ndarray
    target_ids: np.ndarray
    target_mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.examples)

    @property
    def title_lengths(self) -> np.ndarray:
        return self.title_mask.sum(axis=1)

    @property
    def knowledge_lengths(self) -> np.ndarray:
        return self.knowledge_mask.sum(axis=1)

    @property
    def target_lengths(self) -> np.ndarray:
        return self.target_mask.sum(axis=1)


def pad_rows(rows: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer rows into a matrix plus a mask of real positions."""
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = True
    return ids, mask


def make_batch(examples: Sequence[IndexedExample]) -> Batch:
    title_ids, title_mask = pad_rows([e.title_ids for e in examples])
    know_ids, know_mask = pad_rows([e.knowledge_ids for e in examples])
    target_ids, target_mask = pad_rows([e.target_ids for e in examples])
    return Batch(
        examples=list(examples),
        title_ids=title_ids,
        title_mask=title_mask,
        knowledge_ids=know_ids,
        knowledge_mask=know_mask,
        target_ids=target_ids,
        target_mask=target_mask,
    )


def make_batches(examples: Sequence[IndexedExample], size: int = 128) -> list[Batch]:
    return [make_batch(examples[i : i + size]) for i in range(0, len(examples), size)]


# ---------------------------------------------------------------------------
# file input
# ---------------------------------------------------------------------------

_FIELDS = ("title", "brand", "commodity", "short_title", "category")


@dataclass
class LoadReport:
    kept: int = 0
    skipped_no_knowledge: int = 0
    skipped_long_short_title: int = 0
    skipped_empty: int = 0


def load_triplets(
    path: str | Path,
    enforce_short_limit: bool = True,
    report: LoadReport | None = None,
) -> list[Triplet]:
    """Read triplets from a JSON-lines file (or 5-column TSV for ``.tsv``).

    Records without any knowledge, with an empty title or short title, or
    (when enforced) with a short title longer than the display limit are
    skipped with a warning count.
    """
    path = Path(path)
    if report is None:
        report = LoadReport()
    out: list[Triplet] = []
    is_tsv = path.suffix.lower() == ".tsv"
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if is_tsv:
                cols = line.split("\t")
                if len(cols) != len(_FIELDS):
                    raise ValueError(f"{path}:{lineno}: expected 5 tab-separated columns")
                rec = dict(zip(_FIELDS, cols))
            else:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
                missing = [f for f in _FIELDS if f not in rec]
                if missing:
                    raise ValueError(f"{path}:{lineno}: missing fields {missing}")
            triplet = Triplet(*(str(rec[f]) for f in _FIELDS))
            if not triplet.has_knowledge():
                report.skipped_no_knowledge += 1
                continue
            tok = triplet_tokens(triplet)
            if not tok.title or not tok.short_title:
                report.skipped_empty += 1
                continue
            if enforce_short_limit and display_units(tok.short_title) > SHORT_TITLE_LIMIT:
                report.skipped_long_short_title += 1
                continue
            out.append(triplet)
            report.kept += 1
    skipped = report.skipped_no_knowledge + report.skipped_long_short_title + report.skipped_empty
    if skipped:
        log.warning(
            "%s: kept %d records, skipped %d (no knowledge %d, over-length %d, empty %d)",
            path,
            report.kept,
            skipped,
            report.skipped_no_knowledge,
            report.skipped_long_short_title,
            report.skipped_empty,
        )
    return out


def write_triplets(path: str | Path, triplets: Iterable[Triplet]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in triplets:
            rec = {f: getattr(t, f) for f in _FIELDS}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
