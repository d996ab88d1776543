"""Shared test helpers: random instances, parameter tying, and an
exhaustive decode-search oracle independent of the beam implementation."""

import math

import numpy as np

from ptsum import model as md
from ptsum.corpus import BOS_ID, EOS_ID, SEP_ID, IndexedExample
from ptsum.model import ModelConfig, ModelParams


def rand_params(config, vocab_size, seed=0, scale=0.5, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(
        config, vocab_size, init_fn=lambda kind, shape: rng.uniform(-scale, scale, shape), dtype=dtype
    )


def make_example(title, knowledge, target) -> IndexedExample:
    return IndexedExample(
        title_ids=np.asarray(title, dtype=np.int64),
        knowledge_ids=np.asarray(knowledge, dtype=np.int64),
        target_ids=np.asarray(target, dtype=np.int64),
        oov_tokens=[],
    )


def random_example(rng, vocab_size, title_len=5, know_len=3, target_len=3) -> IndexedExample:
    lo = 4  # skip the special ids
    title = list(rng.integers(lo, vocab_size, size=title_len)) + [EOS_ID]
    know = list(rng.integers(lo, vocab_size, size=know_len))
    know.insert(int(rng.integers(0, len(know) + 1)), SEP_ID)
    # targets drawn from the title so the example is copyable in every mode
    pool = sorted(set(title[:-1]))
    target = [int(rng.choice(pool)) for _ in range(target_len)] + [EOS_ID]
    return make_example(title, know, target)


def tie_title_paths(ms: ModelParams, pn: ModelParams) -> None:
    """Copy the title-side weights of a single-encoder model into a
    dual-encoder one and zero every knowledge pathway, making the two
    models equal when the gate is pinned to 1."""
    e = pn.config.embed_dim
    h = pn.config.hidden_dim
    ms.embedding.data = pn.embedding.data.copy()
    for gate_name in ("forget", "input", "cell", "output"):
        for suffix in ("_w", "_b"):
            src = getattr(pn.title_encoder.fwd, gate_name + suffix).data
            getattr(ms.title_encoder.fwd, gate_name + suffix).data = src.copy()
        # decoder input is [embedding, title ctx, knowledge ctx]; zero the
        # trailing knowledge block
        src_w = getattr(pn.decoder, gate_name + "_w").data
        dst_w = np.zeros((h, h + e + 2 * h), dtype=src_w.dtype)
        dst_w[:, : h + e + h] = src_w
        getattr(ms.decoder, gate_name + "_w").data = dst_w
        getattr(ms.decoder, gate_name + "_b").data = getattr(pn.decoder, gate_name + "_b").data.copy()
    init = np.zeros((h, 2 * h), dtype=pn.init_w.data.dtype)
    init[:, :h] = pn.init_w.data
    ms.init_w.data = init
    for name in ("enc_w", "dec_w", "bias", "score"):
        getattr(ms.title_attention, name).data = getattr(pn.title_attention, name).data.copy()


def exhaustive_search(params, example, config: ModelConfig, max_steps: int):
    """Brute-force enumeration of every decodable sequence up to
    ``max_steps``; returns (tokens, logprob, finished) under the same
    preference order the beam uses (finished first, then score, earlier
    finish, smaller first-differing id)."""
    session = md.DecodeSession(params, example, config)
    cand = session.cand_ids
    results: list[tuple[tuple[int, ...], float, bool, float]] = []

    def recurse(state, prev, tokens, logp, step):
        if step == max_steps:
            results.append((tokens, logp, False, math.inf))
            return
        probs, new_state, _ = session.step(state, prev)
        for s in range(len(cand)):
            if probs[s] <= 0.0 or not session.emittable[s]:
                continue
            lp = logp + math.log(probs[s])
            if cand[s] == EOS_ID:
                results.append((tokens, lp, True, step + 1))
            else:
                recurse(new_state, int(cand[s]), tokens + (int(cand[s]),), lp, step + 1)

    recurse(session.initial_state(), BOS_ID, (), 0.0, 0)
    finished = [r for r in results if r[2]]
    pool = finished if finished else results
    best = min(pool, key=lambda r: (-r[1], r[3], r[0]))
    return best[0], best[1], best[2]
