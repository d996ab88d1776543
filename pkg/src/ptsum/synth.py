"""Synthetic corpus generator for mechanism-level evaluation.

Builds product-style triplets from procedurally generated brand, modifier,
commodity, and filler pools. Two knobs drive the interesting structure:

* ``reorder_prob`` — chance the short title moves the salient modifier in
  front of the brand (real short titles reorder about two thirds of the
  time);
* ``brand_corruption_prob`` — chance the title's brand mention is replaced
  by a distractor brand, so the brand is only recoverable from the
  knowledge side. This isolates what the knowledge encoder buys.

Character pools for brands, modifiers, commodities, and filler are
disjoint, and brand names are pairwise substring-free, so "brand appears in
title" is an exact, unambiguous check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Triplet, join_tokens, tokenize

_LATIN_SYLLABLES = (
    "ka", "zo", "vex", "mi", "lor", "ran", "tup", "bel",
    "nok", "dis", "fa", "gul", "pre", "sim", "ox", "qua",
)
_BRAND_CJK = "维克洛朗诺迪图腾辰铂曼圣"
_MODIFIER_CJK = "高新轻薄防复百纯宽修加速透舒耐水古搭棉松身绒干气适磨"
_COMMODITY_CJK = "包机鞋衣裤帽杯壶灯椅箱袋巾伞扇篮毯盒瓶罐"
_FILLER_CJK = "的款式用品专正货原装优质精选特惠热卖限量现"
_JUNK_ALPHABET = "ABCDEFGHJKLMNPQRSTUVWXYZ0123456789"


@dataclass
class SyntheticSpec:
    num_brands: int = 24
    num_commodities: int = 12
    num_modifiers: int = 30
    size: int = 5000
    reorder_prob: float = 0.65
    brand_corruption_prob: float = 0.2
    junk_prob: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for p in (self.reorder_prob, self.brand_corruption_prob, self.junk_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probabilities must lie in [0, 1]: {self}")
        if min(self.num_brands, self.num_commodities, self.num_modifiers, self.size) <= 0:
            raise ValueError(f"counts must be positive: {self}")


@dataclass(frozen=True)
class Brand:
    variants: tuple[str, ...]  # first entry is the form used in titles

    @property
    def primary(self) -> str:
        return self.variants[0]

    @property
    def field(self) -> str:
        return "/".join(self.variants)


def _latin_names(count: int) -> list[str]:
    """Capitalized two-syllable names, pairwise substring-free."""
    names: list[str] = []
    for i in range(len(_LATIN_SYLLABLES) ** 2):
        a, b = divmod(i * 7 + 3, len(_LATIN_SYLLABLES))  # fixed stride walk
        a %= len(_LATIN_SYLLABLES)
        raw = (_LATIN_SYLLABLES[a] + _LATIN_SYLLABLES[b]).capitalize()
        if any(raw in n or n in raw for n in names):
            continue
        names.append(raw)
        if len(names) == count:
            break
    if len(names) < count:
        raise ValueError(f"cannot build {count} distinct brand names")
    return names


def _cjk_words(pool: str, count: int, length: int = 2) -> list[str]:
    words = []
    n = len(pool)
    for i in range(n * n):
        a, b = divmod(i * 3 + 1, n)
        a %= n
        word = pool[a] + pool[b]
        if length == 3:
            word += pool[(a + b) % n]
        if word not in words and len(set(word)) == len(word):
            words.append(word)
        if len(words) == count:
            return words
    raise ValueError(f"cannot build {count} distinct words from pool of {n}")


def build_pools(spec: SyntheticSpec) -> tuple[list[Brand], list[str], list[str]]:
    """Deterministic pools shared by any corpus with the same counts."""
    latin = _latin_names(spec.num_brands)
    cjk_names = _cjk_words(_BRAND_CJK, spec.num_brands, length=3)
    brands = []
    for i in range(spec.num_brands):
        if i % 3 == 2:
            # CJK-primary brand with a Latin alternative
            brands.append(Brand(variants=(cjk_names[i], latin[i])))
        elif i % 3 == 1:
            brands.append(Brand(variants=(latin[i], cjk_names[i])))
        else:
            brands.append(Brand(variants=(latin[i],)))
    commodities = _cjk_words(_COMMODITY_CJK, spec.num_commodities)
    modifiers = _cjk_words(_MODIFIER_CJK, spec.num_modifiers)
    return brands, commodities, modifiers


def generate(spec: SyntheticSpec) -> list[Triplet]:
    """Sample a corpus; identical spec (including seed) gives identical
    records. Every short-title token occurs in title or knowledge."""
    brands, commodities, modifiers = build_pools(spec)
    rng = np.random.default_rng(spec.seed)
    records: list[Triplet] = []
    for _ in range(spec.size):
        brand = brands[rng.integers(len(brands))]
        commodity = commodities[rng.integers(len(commodities))]
        mod_count = int(rng.integers(2, 4))
        mod_idx = rng.choice(len(modifiers), size=mod_count, replace=False)
        salient = modifiers[int(mod_idx.min())]  # lower index = more salient

        corrupted = rng.random() < spec.brand_corruption_prob
        if corrupted and len(brands) > 1:
            others = [b for b in brands if b is not brand]
            title_brand = others[rng.integers(len(others))]
        else:
            title_brand = brand

        synonym = commodity if rng.random() < 0.5 else commodity[::-1]
        chunks: list[list[str]] = [tokenize(title_brand.primary)]
        chunks += [tokenize(modifiers[int(i)]) for i in mod_idx]
        chunks.append(tokenize(synonym))
        filler = rng.choice(list(_FILLER_CJK), size=int(rng.integers(1, 4)), replace=False)
        chunks += [[f] for f in filler]
        if rng.random() < spec.junk_prob:
            junk = "".join(rng.choice(list(_JUNK_ALPHABET), size=4))
            chunks.append([junk])
        order = rng.permutation(len(chunks))
        title_tokens = [tok for i in order for tok in chunks[int(i)]]

        brand_tokens = tokenize(brand.primary)
        commodity_tokens = tokenize(commodity)
        if rng.random() < spec.reorder_prob:
            short = tokenize(salient) + brand_tokens + commodity_tokens
        else:
            short = brand_tokens + tokenize(salient) + commodity_tokens

        records.append(
            Triplet(
                title=join_tokens(title_tokens),
                brand=brand.field,
                commodity=commodity,
                short_title=join_tokens(short),
                category=commodity,
            )
        )
    return records
