"""Greedy and beam-search decoding over the copy distribution.

Hypotheses are ranked by summed log-probability (no length normalization by
default). Emitted ids stay within the example's input union by construction;
the separator and padding are unreachable because they carry exactly zero
attention mass at decode time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID, IndexedExample, Vocabulary, decode_ids, join_tokens
from .model import DecodeSession, DecoderState, ModelConfig, ModelParams

_UNFINISHED = math.inf


@dataclass
class Hypothesis:
    """One partial decode: emitted content tokens, score, decoder state."""

    tokens: tuple[int, ...]
    logprob: float
    state: DecoderState
    lambdas: tuple[float, ...]
    finished: bool = False
    finish_step: float = _UNFINISHED

    def sort_key(self):
        # higher score first; ties: earlier finish, then smaller first
        # differing token id
        return (-self.logprob, self.finish_step, self.tokens)


@dataclass
class DecodeResult:
    token_ids: list[int]
    logprob: float
    lambdas: list[float]
    finished: bool


def beam_search(
    params: ModelParams,
    example: IndexedExample,
    config: ModelConfig,
    beam: int = 4,
    max_steps: int = 11,
) -> DecodeResult:
    """Breadth-limited best-first search; returns the best finished
    hypothesis, or the best unfinished one if nothing emitted the end
    marker within ``max_steps``."""
    if beam < 1:
        raise ValueError("beam must be at least 1")
    session = DecodeSession(params, example, config)
    cand_ids = session.cand_ids
    eos_slots = set(np.flatnonzero(cand_ids == EOS_ID).tolist())

    live = [Hypothesis(tokens=(), logprob=0.0, state=session.initial_state(), lambdas=())]
    pool: list[Hypothesis] = []
    for _ in range(max_steps):
        if not live:
            break
        expansions: list[Hypothesis] = []
        for hyp in live:
            prev = hyp.tokens[-1] if hyp.tokens else BOS_ID
            probs, state, lam = session.step(hyp.state, prev)
            slots = [s for s in range(len(probs)) if probs[s] > 0.0 and session.emittable[s]]
            # probability ties resolve toward the smaller token id
            slots.sort(key=lambda s: (-probs[s], cand_ids[s]))
            for s in slots[:beam]:
                score = hyp.logprob + math.log(probs[s])
                if s in eos_slots:
                    expansions.append(
                        Hypothesis(
                            tokens=hyp.tokens,
                            logprob=score,
                            state=state,
                            lambdas=hyp.lambdas,
                            finished=True,
                            finish_step=len(hyp.tokens) + 1,
                        )
                    )
                else:
                    expansions.append(
                        Hypothesis(
                            tokens=hyp.tokens + (int(cand_ids[s]),),
                            logprob=score,
                            state=state,
                            lambdas=hyp.lambdas + (lam,),
                        )
                    )
        expansions.sort(key=Hypothesis.sort_key)
        kept = expansions[:beam]
        pool.extend(h for h in kept if h.finished)
        pool.sort(key=Hypothesis.sort_key)
        del pool[beam:]
        live = [h for h in kept if not h.finished]

    candidates = pool if pool else live
    best = min(candidates, key=Hypothesis.sort_key)
    _assert_copy_only(best.tokens, session)
    return DecodeResult(
        token_ids=list(best.tokens),
        logprob=best.logprob,
        lambdas=list(best.lambdas),
        finished=best.finished,
    )


def greedy_decode(
    params: ModelParams,
    example: IndexedExample,
    config: ModelConfig,
    max_steps: int = 11,
) -> DecodeResult:
    """Stepwise argmax; identical to beam search with beam 1."""
    return beam_search(params, example, config, beam=1, max_steps=max_steps)


def _assert_copy_only(tokens: Sequence[int], session: DecodeSession) -> None:
    allowed = set(session.cand_ids[session.emittable].tolist())
    bad = [t for t in tokens if t not in allowed]
    if bad:
        raise RuntimeError(f"decode emitted ids outside the input union: {bad}")


def resolve_surface(token_ids: Sequence[int], example: IndexedExample, vocab: Vocabulary) -> str:
    """Render decoded ids as text; pool slots resolve through the example's
    recorded surface forms."""
    allowed = set(example.title_ids.tolist()) | set(example.knowledge_ids.tolist())
    bad = [int(t) for t in token_ids if int(t) not in allowed]
    if bad:
        raise ValueError(f"ids {bad} do not occur in this example's inputs")
    return join_tokens(decode_ids(token_ids, vocab, example))


def lambda_trace(
    params: ModelParams,
    example: IndexedExample,
    config: ModelConfig,
    tokens: Sequence[int],
) -> list[float]:
    """Gate values aligned to an already-decoded token sequence (one value
    per emitted token; single-encoder modes give exactly 1)."""
    session = DecodeSession(params, example, config)
    state = session.initial_state()
    trace: list[float] = []
    prev = BOS_ID
    for tok in tokens:
        _, state, lam = session.step(state, prev)
        trace.append(lam)
        prev = int(tok)
    return trace


# ---------------------------------------------------------------------------
# output records
# ---------------------------------------------------------------------------


def decode_record(
    index: int,
    result: DecodeResult,
    example: IndexedExample,
    vocab: Vocabulary,
) -> dict:
    surfaces = decode_ids(result.token_ids, vocab, example)
    return {
        "id": index,
        "short_title": join_tokens(surfaces),
        "tokens": surfaces,
        "logprob": result.logprob,
        "lambdas": result.lambdas,
    }


def write_decodes(path: str | Path, records: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_decodes(path: str | Path) -> list[dict]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out
