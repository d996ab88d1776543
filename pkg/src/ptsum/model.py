"""The copy network: encoders, dual attention, gating, merged distribution.

Three modes share one code path:

* ``ms_pointer`` — a title encoder plus a knowledge encoder (brand "/"
  commodity); at every decoder step a learned sigmoid gate mixes the two
  attention distributions into one copy distribution over the union of
  input tokens.
* ``ptr_net``    — single encoder over the title; the gate is pinned to 1.
* ``ptr_concat`` — single encoder over knowledge ++ "/" ++ title; gate
  pinned to 1.

The output support is always exactly the set of input tokens (plus the
title's end marker), never the full vocabulary.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numerics as nm
from .corpus import BOS_ID, EOS_ID, PAD_ID, SEP_ID, Batch, IndexedExample, pad_rows
from .numerics import Tensor

MODES = ("ms_pointer", "ptr_net", "ptr_concat")

PROB_FLOOR = 1e-12


@dataclass
class ModelConfig:
    embed_dim: int = 128
    hidden_dim: int = 256
    bidirectional: bool = False
    mode: str = "ms_pointer"
    unk_pool_size: int = 32
    # fixes the gate to a constant (e.g. the failed constant-0.5 mix); None
    # means the learned gate is used
    lambda_override: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.embed_dim <= 0 or self.hidden_dim <= 0 or self.unk_pool_size <= 0:
            raise ValueError("dimensions must be positive")

    @property
    def dual_encoder(self) -> bool:
        return self.mode == "ms_pointer"


InitFn = Callable[[str, tuple[int, ...]], np.ndarray]


def _zeros_init(kind: str, shape: tuple[int, ...]) -> np.ndarray:
    return np.zeros(shape)


class _ParamGroup:
    """Namespace of named tensors registered on a shared ordered list."""

    def __init__(self, params: "ModelParams", prefix: str):
        self._params = params
        self._prefix = prefix

    def make(self, name: str, shape: tuple[int, ...], kind: str = "weight") -> Tensor:
        t = self._params._new(f"{self._prefix}.{name}", shape, kind)
        setattr(self, name, t)
        return t


class LstmParams(_ParamGroup):
    """Gate weights for one LSTM cell; each weight is (hidden, hidden+input)."""

    def __init__(self, params: "ModelParams", prefix: str, input_size: int, hidden_size: int):
        super().__init__(params, prefix)
        self.input_size = input_size
        self.hidden_size = hidden_size
        for gate in ("forget", "input", "cell", "output"):
            self.make(f"{gate}_w", (hidden_size, hidden_size + input_size))
            self.make(f"{gate}_b", (hidden_size,))


class EncoderParams(_ParamGroup):
    def __init__(self, params: "ModelParams", prefix: str, input_size: int, hidden_size: int, bidirectional: bool):
        super().__init__(params, prefix)
        self.bidirectional = bidirectional
        self.fwd = LstmParams(params, f"{prefix}.fwd", input_size, hidden_size)
        if bidirectional:
            self.bwd = LstmParams(params, f"{prefix}.bwd", input_size, hidden_size)
            self.make("proj_w", (hidden_size, 2 * hidden_size))
            self.make("proj_b", (hidden_size,))
        else:
            self.bwd = None


class AttentionParams(_ParamGroup):
    def __init__(self, params: "ModelParams", prefix: str, hidden_size: int):
        super().__init__(params, prefix)
        self.make("enc_w", (hidden_size, hidden_size))
        self.make("dec_w", (hidden_size, hidden_size))
        self.make("bias", (hidden_size,))
        self.make("score", (hidden_size,))


class GateParams(_ParamGroup):
    def __init__(self, params: "ModelParams", prefix: str, embed_dim: int, hidden_size: int):
        super().__init__(params, prefix)
        self.make("state_w", (hidden_size,))
        self.make("prev_embed_w", (embed_dim,))
        self.make("title_ctx_w", (hidden_size,))
        self.make("know_ctx_w", (hidden_size,))


class ModelParams:
    """All learned tensors, registered in a fixed order for checkpointing.

    The embedding table is shared by both encoders and the decoder input;
    row ``BOS_ID`` doubles as the learned decoder start symbol.
    """

    def __init__(
        self,
        config: ModelConfig,
        vocab_size: int,
        init_fn: InitFn = _zeros_init,
        dtype=np.float32,
    ):
        self.config = config
        self.vocab_size = vocab_size
        self.dtype = dtype
        self._init_fn = init_fn
        self._entries: list[tuple[str, Tensor]] = []

        e, h = config.embed_dim, config.hidden_dim
        self.embedding = self._new("embedding", (vocab_size, e), kind="embedding")
        self.title_encoder = EncoderParams(self, "title_encoder", e, h, config.bidirectional)
        if config.dual_encoder:
            self.knowledge_encoder = EncoderParams(self, "knowledge_encoder", e, h, config.bidirectional)
            decoder_input = e + 2 * h
            init_in = 2 * h
        else:
            self.knowledge_encoder = None
            decoder_input = e + h
            init_in = h
        self.decoder = LstmParams(self, "decoder", decoder_input, h)
        self.init_w = self._new("decoder_init_w", (h, init_in))
        self.title_attention = AttentionParams(self, "title_attention", h)
        if config.dual_encoder:
            self.knowledge_attention = AttentionParams(self, "knowledge_attention", h)
            self.gate = GateParams(self, "gate", e, h)
        else:
            self.knowledge_attention = None
            self.gate = None

    def _new(self, name: str, shape: tuple[int, ...], kind: str = "weight") -> Tensor:
        data = np.ascontiguousarray(self._init_fn(kind, shape), dtype=self.dtype)
        if data.shape != shape:
            raise ValueError(f"init_fn returned shape {data.shape} for {name}, wanted {shape}")
        t = Tensor(data, requires_grad=True)
        self._entries.append((name, t))
        return t

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self._entries]

    def copy_values_from(self, other: "ModelParams") -> None:
        for (name, mine), (other_name, theirs) in zip(self._entries, other._entries):
            if name != other_name or mine.data.shape != theirs.data.shape:
                raise ValueError(f"parameter layout mismatch at {name}/{other_name}")
            mine.data = theirs.data.astype(self.dtype).copy()

    def clone(self) -> "ModelParams":
        out = ModelParams(self.config, self.vocab_size, dtype=self.dtype)
        out.copy_values_from(self)
        return out


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def lstm_step(x: Tensor, h_prev: Tensor, z_prev: Tensor, p: LstmParams) -> tuple[Tensor, Tensor]:
    """One cell update: gates over [h_prev, x], memory z, output h."""
    cat = nm.concat([h_prev, x], axis=1)
    f = nm.sigmoid(nm.linear_map(cat, p.forget_w, p.forget_b))
    i = nm.sigmoid(nm.linear_map(cat, p.input_w, p.input_b))
    z = f * z_prev + i * nm.tanh(nm.linear_map(cat, p.cell_w, p.cell_b))
    o = nm.sigmoid(nm.linear_map(cat, p.output_w, p.output_b))
    return o * nm.tanh(z), z


@dataclass
class EncoderOutput:
    states: Tensor  # (B, N, H), one state per input position
    final: Tensor  # (B, H)
    mask: np.ndarray  # (B, N) real positions


def _run_direction(ids: np.ndarray, lstm: LstmParams, embedding: Tensor, dtype) -> Tensor:
    batch, n = ids.shape
    h = Tensor(np.zeros((batch, lstm.hidden_size), dtype=dtype))
    z = Tensor(np.zeros((batch, lstm.hidden_size), dtype=dtype))
    states = []
    for t in range(n):
        x = nm.embedding_lookup(embedding, ids[:, t])
        h, z = lstm_step(x, h, z, lstm)
        states.append(h)
    return nm.stack_time(states)


def encode(
    params: ModelParams,
    ids: np.ndarray,
    mask: np.ndarray,
    which: str = "title",
) -> EncoderOutput:
    """Run one encoder over padded id rows; ``which`` picks the weight set."""
    if which == "title":
        enc = params.title_encoder
    elif which == "knowledge":
        enc = params.knowledge_encoder
        if enc is None:
            raise ValueError(f"mode {params.config.mode!r} has no knowledge encoder")
    else:
        raise ValueError(f"unknown encoder {which!r}")
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("encoder input contains an empty sequence")

    fwd = _run_direction(ids, enc.fwd, params.embedding, params.dtype)
    fwd_final = nm.gather_time(fwd, lengths - 1)
    if not enc.bidirectional:
        return EncoderOutput(states=fwd, final=fwd_final, mask=mask)

    rev = nm.reverse_ids(ids, lengths)
    bwd = nm.time_reverse(_run_direction(rev, enc.bwd, params.embedding, params.dtype), lengths)
    states = nm.linear_map(nm.concat([fwd, bwd], axis=2), enc.proj_w, enc.proj_b)
    bwd_first = nm.gather_time(bwd, np.zeros(ids.shape[0], dtype=np.int64))
    final = nm.linear_map(nm.concat([fwd_final, bwd_first], axis=1), enc.proj_w, enc.proj_b)
    return EncoderOutput(states=states, final=final, mask=mask)


def init_decoder(params: ModelParams, finals: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
    """Rectified projection of the encoder final states; zero cell memory."""
    joined = finals[0] if len(finals) == 1 else nm.concat(list(finals), axis=1)
    d0 = nm.relu(nm.linear_map(joined, params.init_w))
    cell0 = Tensor(np.zeros(d0.shape, dtype=params.dtype))
    return d0, cell0


@dataclass
class AttentionPrecompute:
    """Per-sequence reusable half of the attention score (bias folded in)."""

    proj_states: Tensor  # (B, N, H) states through enc_w, plus bias
    states: Tensor


def precompute_attention(enc_out: EncoderOutput, attn: AttentionParams) -> AttentionPrecompute:
    return AttentionPrecompute(
        proj_states=nm.linear_map(enc_out.states, attn.enc_w, attn.bias),
        states=enc_out.states,
    )


def attend(
    d: Tensor,
    enc: EncoderOutput | AttentionPrecompute,
    attn: AttentionParams,
    mask: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Additive attention scores, masked softmax, and the context vector."""
    if isinstance(enc, EncoderOutput):
        enc = precompute_attention(enc, attn)
    batch = d.shape[0]
    query = nm.reshape(nm.linear_map(d, attn.dec_w), (batch, 1, attn.dec_w.shape[0]))
    pre = nm.tanh(enc.proj_states + query)
    scores = nm.dot_last(pre, attn.score)
    weights = nm.softmax(scores, mask=mask)
    context = nm.weighted_sum_time(weights, enc.states)
    return weights, context


def gate(
    params: GateParams,
    d: Tensor,
    y_prev: Tensor,
    ctx_title: Tensor,
    ctx_know: Tensor,
) -> Tensor:
    """Soft mixing weight in (0, 1); 0.5 exactly when all weights are zero."""
    pre = (
        nm.dot_last(d, params.state_w)
        + nm.dot_last(y_prev, params.prev_embed_w)
        + nm.dot_last(ctx_title, params.title_ctx_w)
        + nm.dot_last(ctx_know, params.know_ctx_w)
    )
    return nm.sigmoid(pre)


def output_distribution(
    title_attention: np.ndarray,
    knowledge_attention: np.ndarray | None,
    lam: float,
    title_tokens: Sequence[int],
    knowledge_tokens: Sequence[int] | None,
) -> dict[int, float]:
    """Merge per-position attention into per-word probabilities.

    A word occurring in both inputs receives mass from both sides; the
    domain is exactly the union of input tokens.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"gate weight must lie in [0, 1], got {lam}")
    probs: dict[int, float] = {}
    for w, a in zip(title_tokens, title_attention):
        probs[int(w)] = probs.get(int(w), 0.0) + lam * float(a)
    if knowledge_tokens is not None:
        for w, a in zip(knowledge_tokens, knowledge_attention):
            probs[int(w)] = probs.get(int(w), 0.0) + (1.0 - lam) * float(a)
    return probs


# ---------------------------------------------------------------------------
# candidate indexing (copy support)
# ---------------------------------------------------------------------------


class TargetNotCopyable(ValueError):
    """A reference token does not occur in any encoder input."""


@dataclass
class CandidateIndex:
    """Maps encoder positions and targets onto the example's candidate words
    (first-occurrence order over title then knowledge)."""

    ids: np.ndarray  # candidate vocab ids
    slot_of: dict[int, int]
    title_slots: np.ndarray
    knowledge_slots: np.ndarray | None


def build_candidates(title_ids: np.ndarray, knowledge_ids: np.ndarray | None) -> CandidateIndex:
    slot_of: dict[int, int] = {}
    ids: list[int] = []

    def slots_for(seq: np.ndarray) -> np.ndarray:
        out = np.empty(len(seq), dtype=np.int64)
        for i, tid in enumerate(seq):
            tid = int(tid)
            slot = slot_of.get(tid)
            if slot is None:
                slot = len(ids)
                slot_of[tid] = slot
                ids.append(tid)
            out[i] = slot
        return out

    title_slots = slots_for(title_ids)
    know_slots = slots_for(knowledge_ids) if knowledge_ids is not None else None
    return CandidateIndex(
        ids=np.asarray(ids, dtype=np.int64),
        slot_of=slot_of,
        title_slots=title_slots,
        knowledge_slots=know_slots,
    )


def example_candidates(example: IndexedExample, mode: str) -> CandidateIndex:
    if mode == "ms_pointer":
        return build_candidates(example.title_ids, example.knowledge_ids)
    if mode == "ptr_net":
        return build_candidates(example.title_ids, None)
    if mode == "ptr_concat":
        combined = np.concatenate([example.knowledge_ids, [SEP_ID], example.title_ids])
        return build_candidates(combined, None)
    raise ValueError(f"unknown mode {mode!r}")


def target_copyable(example: IndexedExample, mode: str) -> bool:
    cand = example_candidates(example, mode)
    return all(int(t) in cand.slot_of for t in example.target_ids)


# ---------------------------------------------------------------------------
# batched teacher-forced forward
# ---------------------------------------------------------------------------


@dataclass
class ModelBatch:
    """Mode-specific view of a corpus batch, ready for the forward pass."""

    examples: list[IndexedExample]
    title_ids: np.ndarray
    title_mask: np.ndarray
    knowledge_ids: np.ndarray | None
    knowledge_mask: np.ndarray | None
    title_slots: np.ndarray
    knowledge_slots: np.ndarray | None
    num_slots: int
    candidates: list[CandidateIndex]
    teacher_ids: np.ndarray  # (B, T); starts with the start symbol
    target_slots: np.ndarray  # (B, T)
    target_mask: np.ndarray  # (B, T)


def build_model_batch(batch: Batch, config: ModelConfig) -> ModelBatch:
    examples = batch.examples
    candidates = [example_candidates(e, config.mode) for e in examples]

    if config.mode == "ptr_concat":
        rows = [
            np.concatenate([e.knowledge_ids, [SEP_ID], e.title_ids]) for e in examples
        ]
        title_ids, title_mask = pad_rows(rows)
        know_ids = know_mask = None
    else:
        title_ids, title_mask = batch.title_ids, batch.title_mask
        if config.dual_encoder:
            know_ids, know_mask = batch.knowledge_ids, batch.knowledge_mask
        else:
            know_ids = know_mask = None

    num_slots = max(len(c.ids) for c in candidates)
    title_slots = np.zeros(title_ids.shape, dtype=np.int64)
    for b, cand in enumerate(candidates):
        title_slots[b, : len(cand.title_slots)] = cand.title_slots
    if know_ids is not None:
        know_slots = np.zeros(know_ids.shape, dtype=np.int64)
        for b, cand in enumerate(candidates):
            know_slots[b, : len(cand.knowledge_slots)] = cand.knowledge_slots
    else:
        know_slots = None

    n, t = batch.target_ids.shape
    teacher_ids = np.full((n, t), BOS_ID, dtype=np.int64)
    teacher_ids[:, 1:] = batch.target_ids[:, :-1]
    target_slots = np.zeros((n, t), dtype=np.int64)
    for b, cand in enumerate(candidates):
        example = examples[b]
        for step, tid in enumerate(example.target_ids):
            slot = cand.slot_of.get(int(tid))
            if slot is None:
                raise TargetNotCopyable(
                    f"target token id {int(tid)} at step {step} does not occur in the "
                    f"inputs of example {b} (mode {config.mode})"
                )
            target_slots[b, step] = slot
    return ModelBatch(
        examples=list(examples),
        title_ids=title_ids,
        title_mask=title_mask,
        knowledge_ids=know_ids,
        knowledge_mask=know_mask,
        title_slots=title_slots,
        knowledge_slots=know_slots,
        num_slots=num_slots,
        candidates=candidates,
        teacher_ids=teacher_ids,
        target_slots=target_slots,
        target_mask=batch.target_mask,
    )


@dataclass
class DecoderStep:
    """Observables for one decoder step (detached numpy copies)."""

    state: np.ndarray
    cell: np.ndarray
    title_attention: np.ndarray
    knowledge_attention: np.ndarray | None
    title_context: np.ndarray
    knowledge_context: np.ndarray | None
    gate: np.ndarray  # (B,), pinned to 1 in single-encoder modes
    output: np.ndarray  # (B, num_slots)


@dataclass
class ForwardResult:
    loss: Tensor
    per_example_nll: np.ndarray
    steps: list[DecoderStep] | None
    num_slots: int


def _gate_values(
    params: ModelParams,
    config: ModelConfig,
    d: Tensor,
    y_prev: Tensor,
    ctx_t: Tensor,
    ctx_k: Tensor | None,
    batch_size: int,
) -> Tensor:
    if not config.dual_encoder:
        return Tensor(np.ones(batch_size, dtype=params.dtype))
    if config.lambda_override is not None:
        if not 0.0 <= config.lambda_override <= 1.0:
            raise ValueError("lambda_override must lie in [0, 1]")
        return Tensor(np.full(batch_size, config.lambda_override, dtype=params.dtype))
    return gate(params.gate, d, y_prev, ctx_t, ctx_k)


def forward_teacher(
    params: ModelParams,
    mbatch: ModelBatch,
    config: ModelConfig,
    collect_steps: bool = False,
) -> ForwardResult:
    """Teacher-forced forward pass.

    ``loss`` is the sum over the batch of per-example mean negative log
    likelihood (terminal end-marker step included). Summing rather than
    averaging keeps gradient magnitudes usable near the near-zero init,
    where desk-scale step budgets would otherwise never leave the cold
    start; per-example values are reported separately for logging.
    """
    batch_size = len(mbatch.examples)
    enc_t = encode(params, mbatch.title_ids, mbatch.title_mask, "title")
    pre_t = precompute_attention(enc_t, params.title_attention)
    if config.dual_encoder:
        enc_k = encode(params, mbatch.knowledge_ids, mbatch.knowledge_mask, "knowledge")
        pre_k = precompute_attention(enc_k, params.knowledge_attention)
        d, cell = init_decoder(params, [enc_t.final, enc_k.final])
        _, ctx_k = attend(d, pre_k, params.knowledge_attention, mbatch.knowledge_mask)
    else:
        enc_k = pre_k = ctx_k = None
        d, cell = init_decoder(params, [enc_t.final])
    _, ctx_t = attend(d, pre_t, params.title_attention, mbatch.title_mask)

    t_steps = mbatch.teacher_ids.shape[1]
    lengths = mbatch.target_mask.sum(axis=1)
    step_weight = mbatch.target_mask / np.maximum(lengths, 1)[:, None]

    total = Tensor(np.zeros((), dtype=params.dtype))
    per_example = np.zeros(batch_size, dtype=np.float64)
    steps: list[DecoderStep] | None = [] if collect_steps else None
    for t in range(t_steps):
        y_prev = nm.embedding_lookup(params.embedding, mbatch.teacher_ids[:, t])
        parts = [y_prev, ctx_t] + ([ctx_k] if config.dual_encoder else [])
        d, cell = lstm_step(nm.concat(parts, axis=1), d, cell, params.decoder)
        a_t, ctx_t = attend(d, pre_t, params.title_attention, mbatch.title_mask)
        if config.dual_encoder:
            a_k, ctx_k = attend(d, pre_k, params.knowledge_attention, mbatch.knowledge_mask)
        else:
            a_k = None
        lam = _gate_values(params, config, d, y_prev, ctx_t, ctx_k, batch_size)
        lam_col = nm.reshape(lam, (batch_size, 1))
        probs = nm.scatter_sum(a_t, mbatch.title_slots, mbatch.num_slots)
        if config.dual_encoder:
            probs = lam_col * probs + (1.0 - lam_col) * nm.scatter_sum(
                a_k, mbatch.knowledge_slots, mbatch.num_slots
            )
        picked = nm.gather_index(probs, mbatch.target_slots[:, t])
        nll = -nm.log(nm.clamp_min(picked, PROB_FLOOR))
        total = total + nm.sum_all(nll * step_weight[:, t].astype(params.dtype))
        per_example += np.asarray(nll.data, dtype=np.float64) * step_weight[:, t]
        if collect_steps:
            steps.append(
                DecoderStep(
                    state=d.data.copy(),
                    cell=cell.data.copy(),
                    title_attention=a_t.data.copy(),
                    knowledge_attention=None if a_k is None else a_k.data.copy(),
                    title_context=ctx_t.data.copy(),
                    knowledge_context=None if ctx_k is None else ctx_k.data.copy(),
                    gate=lam.data.copy(),
                    output=probs.data.copy(),
                )
            )
    return ForwardResult(loss=total, per_example_nll=per_example, steps=steps, num_slots=mbatch.num_slots)


def sequence_loss(
    params: ModelParams,
    batch: Batch,
    config: ModelConfig,
) -> Tensor:
    """Scalar training loss (teacher forcing): for one example, its mean
    per-step NLL; for a batch, the sum of per-example means."""
    return forward_teacher(params, build_model_batch(batch, config), config).loss


def run_steps(params: ModelParams, batch: Batch, config: ModelConfig) -> ForwardResult:
    """Teacher-forced forward keeping per-step observables."""
    return forward_teacher(params, build_model_batch(batch, config), config, collect_steps=True)


# ---------------------------------------------------------------------------
# single-example inference session
# ---------------------------------------------------------------------------


@dataclass
class DecoderState:
    hidden: Tensor
    cell: Tensor
    ctx_title: Tensor
    ctx_know: Tensor | None


class DecodeSession:
    """Read-only per-example stepper used by greedy/beam decoding.

    Encoder work happens once at construction; ``step`` advances one token.
    At decode time the separator and padding are masked out of both
    attentions, so they can never be emitted.
    """

    def __init__(self, params: ModelParams, example: IndexedExample, config: ModelConfig):
        self.params = params
        self.config = config
        self.example = example
        cand = example_candidates(example, config.mode)
        self.candidates = cand
        self.cand_ids = cand.ids
        emittable = (cand.ids != SEP_ID) & (cand.ids != PAD_ID)
        self.emittable = emittable

        with nm.no_grad():
            if config.mode == "ptr_concat":
                ids = np.concatenate([example.knowledge_ids, [SEP_ID], example.title_ids])
            else:
                ids = example.title_ids
            self._title_ids = ids[None, :]
            self._title_mask = (np.ones((1, len(ids)), dtype=bool)) & (ids != SEP_ID)[None, :]
            self._title_slots = cand.title_slots[None, :]
            enc_t = encode(params, self._title_ids, np.ones((1, len(ids)), dtype=bool), "title")
            self._pre_t = precompute_attention(enc_t, params.title_attention)
            if config.dual_encoder:
                kids = example.knowledge_ids
                self._know_ids = kids[None, :]
                self._know_mask = (kids != SEP_ID)[None, :]
                self._know_slots = cand.knowledge_slots[None, :]
                enc_k = encode(params, self._know_ids, np.ones((1, len(kids)), dtype=bool), "knowledge")
                self._pre_k = precompute_attention(enc_k, params.knowledge_attention)
                d, cell = init_decoder(params, [enc_t.final, enc_k.final])
                _, ctx_k = attend(d, self._pre_k, params.knowledge_attention, self._know_mask)
            else:
                self._pre_k = None
                d, cell = init_decoder(params, [enc_t.final])
                ctx_k = None
            _, ctx_t = attend(d, self._pre_t, params.title_attention, self._title_mask)
        self._initial = DecoderState(hidden=d, cell=cell, ctx_title=ctx_t, ctx_know=ctx_k)

    def initial_state(self) -> DecoderState:
        return self._initial

    def step(self, state: DecoderState, prev_token: int) -> tuple[np.ndarray, DecoderState, float]:
        """Advance one step; returns (word probabilities over candidates,
        next state, gate value). ``prev_token`` is a vocab id (start symbol
        for the first step)."""
        params, config = self.params, self.config
        with nm.no_grad():
            y_prev = nm.embedding_lookup(params.embedding, np.array([prev_token]))
            parts = [y_prev, state.ctx_title] + (
                [state.ctx_know] if config.dual_encoder else []
            )
            d, cell = lstm_step(nm.concat(parts, axis=1), state.hidden, state.cell, params.decoder)
            a_t, ctx_t = attend(d, self._pre_t, params.title_attention, self._title_mask)
            probs = nm.scatter_sum(a_t, self._title_slots, len(self.cand_ids))
            if config.dual_encoder:
                a_k, ctx_k = attend(d, self._pre_k, params.knowledge_attention, self._know_mask)
                lam = _gate_values(params, config, d, y_prev, ctx_t, ctx_k, 1)
                lam_col = nm.reshape(lam, (1, 1))
                probs = lam_col * probs + (1.0 - lam_col) * nm.scatter_sum(
                    a_k, self._know_slots, len(self.cand_ids)
                )
            else:
                ctx_k = None
                lam = Tensor(np.ones(1, dtype=params.dtype))
        new_state = DecoderState(hidden=d, cell=cell, ctx_title=ctx_t, ctx_know=ctx_k)
        return probs.data[0].astype(np.float64), new_state, float(lam.data[0])


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PTSUMCK1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    """Binary checkpoint: header (magic, version, config text block), then
    tensors in registration order as name, rank, extents, little-endian
    float32 values. Save/load/save is byte-identical."""
    config = params.config
    lines = [
        f"mode={config.mode}",
        f"embed_dim={config.embed_dim}",
        f"hidden_dim={config.hidden_dim}",
        f"bidirectional={int(config.bidirectional)}",
        f"unk_pool_size={config.unk_pool_size}",
        f"vocab_size={params.vocab_size}",
    ]
    block = ("\n".join(lines) + "\n").encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(block)))
        fh.write(block)
        entries = params.named_tensors()
        fh.write(struct.pack("<I", len(entries)))
        for name, tensor in entries:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    with Path(path).open("rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        version, block_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        fields = dict(
            line.split("=", 1)
            for line in fh.read(block_len).decode("utf-8").splitlines()
            if line
        )
        config = ModelConfig(
            embed_dim=int(fields["embed_dim"]),
            hidden_dim=int(fields["hidden_dim"]),
            bidirectional=bool(int(fields["bidirectional"])),
            mode=fields["mode"],
            unk_pool_size=int(fields["unk_pool_size"]),
        )
        params = ModelParams(config, vocab_size=int(fields["vocab_size"]))
        (count,) = struct.unpack("<I", fh.read(4))
        entries = params.named_tensors()
        if count != len(entries):
            raise ValueError(f"{path}: expected {len(entries)} tensors, found {count}")
        for name, tensor in entries:
            (name_len,) = struct.unpack("<H", fh.read(2))
            stored = fh.read(name_len).decode("utf-8")
            if stored != name:
                raise ValueError(f"{path}: tensor order mismatch ({stored!r} != {name!r})")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            if shape != tensor.data.shape:
                raise ValueError(f"{path}: {name} has shape {shape}, wanted {tensor.data.shape}")
            raw = fh.read(4 * int(np.prod(shape)))
            tensor.data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return params
