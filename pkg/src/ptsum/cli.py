"""Command-line entry point.

Subcommands: gen-synth, train, decode, evaluate, brandtest, gradcheck.
Values come from flags first, then an optional ``--config`` key=value file,
then built-in defaults. All randomness flows from one ``--seed``: the data
split uses it directly, parameter init and epoch shuffling use seed + 1,
and the gradient-check sampler uses seed + 2.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import corpus, decoding, metrics, synth, training
from . import model as md
from . import numerics as nm
from .corpus import EOS_ID, SEP_ID, Triplet, Vocabulary

log = logging.getLogger("ptsum")

DESK_EMBED = 32
DESK_HIDDEN = 64
PAPER_EMBED = 128
PAPER_HIDDEN = 256
GRADCHECK_TOLERANCE = 1e-4


def _read_config_file(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _cast_like(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


class Options:
    """Flag > config-file > default resolution."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = _read_config_file(getattr(args, "config", None))

    def get(self, key: str, default):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.config:
            return _cast_like(self.config[key], default)
        return default


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags win")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=md.MODES, default=None)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ptsum",
        description="Extractive product-title summarization with a dual-encoder copy network",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic triplet corpus (JSONL)")
    _add_shared(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--brands", type=int, default=None)
    p.add_argument("--commodities", type=int, default=None)
    p.add_argument("--modifiers", type=int, default=None)
    p.add_argument("--reorder-prob", type=float, default=None)
    p.add_argument("--corruption-prob", type=float, default=None)
    p.add_argument("--junk-prob", type=float, default=None)

    p = sub.add_parser("train", help="train a model; writes checkpoint, vocab, and log")
    _add_shared(p)
    p.add_argument("--data", help="single corpus to split 80/10/10 by category")
    p.add_argument("--train-data", help="explicit training split (with --valid-data)")
    p.add_argument("--valid-data")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--paper-dims", action="store_true", help="use 128/256 dimensions")
    p.add_argument("--bidirectional", action="store_true", default=None)
    p.add_argument("--unk-pool", type=int, default=None)
    p.add_argument("--min-count", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--accumulator-init", type=float, default=None)
    p.add_argument("--clip-norm", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--lambda-override", type=float, default=None)
    p.add_argument(
        "--warm-init",
        action="store_true",
        default=None,
        help="larger-scale init for very small corpora (see training.warm_parameters)",
    )
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("decode", help="decode a dataset with a trained checkpoint")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--greedy", action="store_true")

    p = sub.add_parser("evaluate", help="BLEU/ROUGE report for decoded outputs")
    _add_shared(p)
    p.add_argument("--candidates", required=True, help="decode JSONL")
    p.add_argument("--data", required=True, help="reference triplets")
    p.add_argument("--out", help="report JSON path (default: stdout)")
    p.add_argument("--per-example", help="optional per-example CSV path")

    p = sub.add_parser("brandtest", help="brand retention error rate")
    _add_shared(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="JSON output path")

    p = sub.add_parser("gradcheck", help="compare gradients against central differences")
    _add_shared(p)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--bidirectional", action="store_true", default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--entries-per-tensor", type=int, default=None)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_synth(opts: Options) -> int:
    spec = synth.SyntheticSpec(
        num_brands=opts.get("brands", 24),
        num_commodities=opts.get("commodities", 12),
        num_modifiers=opts.get("modifiers", 30),
        size=opts.get("count", 5000),
        reorder_prob=opts.get("reorder_prob", 0.65),
        brand_corruption_prob=opts.get("corruption_prob", 0.2),
        junk_prob=opts.get("junk_prob", 0.3),
        seed=opts.get("seed", 0),
    )
    records = synth.generate(spec)
    corpus.write_triplets(opts.args.out, records)
    print(f"wrote {len(records)} records to {opts.args.out}")
    return 0


def _prepare_examples(
    triplets: list[Triplet], vocab: Vocabulary, mode: str
) -> tuple[list[corpus.IndexedExample], int]:
    """Index triplets, dropping the ones whose reference cannot be produced
    by copying in this mode."""
    kept = []
    skipped = 0
    for t in triplets:
        ex = corpus.encode_example(t, vocab)
        if md.target_copyable(ex, mode):
            kept.append(ex)
        else:
            skipped += 1
    return kept, skipped


def cmd_train(opts: Options) -> int:
    args = opts.args
    seed = opts.get("seed", 0)
    if args.train_data:
        if not args.valid_data:
            raise ValueError("--train-data requires --valid-data")
        train_trips = corpus.load_triplets(args.train_data)
        valid_trips = corpus.load_triplets(args.valid_data)
    elif args.data:
        data = corpus.load_triplets(args.data)
        train_trips, valid_trips, _ = corpus.stratified_split(data, seed=seed)
    else:
        raise ValueError("provide --data or --train-data/--valid-data")

    mode = opts.get("mode", "ms_pointer")
    unk_pool = opts.get("unk_pool", corpus.DEFAULT_UNK_POOL)
    vocab = corpus.vocabulary_from_triplets(
        train_trips, min_count=opts.get("min_count", 2), unk_pool_size=unk_pool
    )
    if args.paper_dims:
        embed, hidden = PAPER_EMBED, PAPER_HIDDEN
    else:
        embed, hidden = DESK_EMBED, DESK_HIDDEN
    model_config = md.ModelConfig(
        embed_dim=opts.get("embed_dim", embed),
        hidden_dim=opts.get("hidden_dim", hidden),
        bidirectional=bool(opts.get("bidirectional", False)),
        mode=mode,
        unk_pool_size=unk_pool,
        lambda_override=getattr(args, "lambda_override", None),
    )
    train_config = training.TrainConfig(
        batch_size=opts.get("batch_size", 128),
        lr=opts.get("lr", 0.15),
        accumulator_init=opts.get("accumulator_init", 0.1),
        clip_norm=opts.get("clip_norm", 2.0),
        seed=seed + 1,
        patience=opts.get("patience", 3),
        max_epochs=opts.get("max_epochs", 30),
    )

    train_ex, skipped_train = _prepare_examples(train_trips, vocab, mode)
    valid_ex, skipped_valid = _prepare_examples(valid_trips, vocab, mode)
    if skipped_train or skipped_valid:
        log.warning(
            "skipped %d train / %d valid records whose references are not "
            "copyable in mode %s",
            skipped_train,
            skipped_valid,
            mode,
        )
    if not train_ex or not valid_ex:
        raise ValueError("no trainable examples after filtering")

    quiet = getattr(args, "quiet", False)

    def on_epoch(stats: training.EpochStats) -> None:
        if not quiet:
            print(
                f"epoch {stats.epoch}: train {stats.train_loss:.4f} "
                f"valid {stats.valid_loss:.4f} ({stats.seconds:.1f}s)"
            )

    initial = None
    if opts.get("warm_init", False):
        initial = training.warm_parameters(model_config, len(vocab), seed=seed + 1)
    result = training.train(
        train_ex,
        valid_ex,
        model_config,
        train_config,
        vocab_size=len(vocab),
        params=initial,
        epoch_callback=on_epoch,
    )
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    md.save_checkpoint(prefix.with_suffix(".ckpt"), result.params)
    vocab.save(prefix.with_suffix(".vocab"))
    training.write_training_log(prefix.with_suffix(".log.csv"), result.history)
    print(
        f"best epoch {result.best_epoch} (valid {result.best_valid_loss:.4f}); "
        f"wrote {prefix.with_suffix('.ckpt')}"
    )
    return 0


def cmd_decode(opts: Options) -> int:
    args = opts.args
    params = md.load_checkpoint(args.checkpoint)
    config = params.config
    if args.mode is not None and args.mode != config.mode:
        raise ValueError(
            f"checkpoint was trained in mode {config.mode!r}; cannot decode as {args.mode!r}"
        )
    vocab = Vocabulary.load(args.vocab)
    triplets = corpus.load_triplets(args.data, enforce_short_limit=False)
    examples = [corpus.encode_example(t, vocab) for t in triplets]
    beam = 1 if args.greedy else opts.get("beam", 4)
    max_steps = opts.get("max_steps", 11)
    workers = opts.get("workers", 1)

    def decode_one(indexed):
        i, ex = indexed
        result = decoding.beam_search(params, ex, config, beam=beam, max_steps=max_steps)
        return decoding.decode_record(i, result, ex, vocab)

    items = list(enumerate(examples))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(decode_one, items))
    else:
        records = [decode_one(item) for item in items]
    decoding.write_decodes(args.out, records)
    print(f"decoded {len(records)} examples to {args.out}")
    return 0


def _aligned_outputs(candidate_path: str, data_path: str) -> tuple[list[dict], list[Triplet]]:
    records = decoding.read_decodes(candidate_path)
    triplets = corpus.load_triplets(data_path, enforce_short_limit=False)
    if len(records) != len(triplets):
        raise ValueError(
            f"{candidate_path} has {len(records)} outputs but {data_path} "
            f"has {len(triplets)} records"
        )
    return records, triplets


def cmd_evaluate(opts: Options) -> int:
    args = opts.args
    records, triplets = _aligned_outputs(args.candidates, args.data)
    candidates = [r["tokens"] for r in records]
    references = [[list(corpus.triplet_tokens(t).short_title)] for t in triplets]
    report = metrics.evaluate_corpus(candidates, references)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if args.per_example:
        metrics.write_per_example_csv(args.per_example, report)
    return 0


def cmd_brandtest(opts: Options) -> int:
    import json

    args = opts.args
    records, triplets = _aligned_outputs(args.candidates, args.data)
    outputs = [r["short_title"] for r in records]
    rate = metrics.brand_retention_error(outputs, triplets)
    payload = {"brand_error_rate": rate, "examples": len(outputs)}
    print(json.dumps(payload))
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


def _random_indexed_example(rng, vocab_size: int) -> corpus.IndexedExample:
    lo = corpus.UNK_BASE
    title = list(rng.integers(lo, vocab_size, size=int(rng.integers(3, 6)))) + [EOS_ID]
    know = list(rng.integers(lo, vocab_size, size=int(rng.integers(2, 4))))
    know.insert(int(rng.integers(0, len(know) + 1)), SEP_ID)
    pool = sorted(set(title[:-1]))
    target = [int(rng.choice(pool)) for _ in range(int(rng.integers(2, 4)))] + [EOS_ID]
    return corpus.IndexedExample(
        title_ids=np.asarray(title, dtype=np.int64),
        knowledge_ids=np.asarray(know, dtype=np.int64),
        target_ids=np.asarray(target, dtype=np.int64),
        oov_tokens=[],
    )


def cmd_gradcheck(opts: Options) -> int:
    seed = opts.get("seed", 0)
    config = md.ModelConfig(
        embed_dim=opts.get("embed_dim", 4),
        hidden_dim=opts.get("hidden_dim", 6),
        bidirectional=bool(opts.get("bidirectional", False)),
        mode=opts.get("mode", "ms_pointer"),
        unk_pool_size=2,
    )
    vocab_size = 12
    rng = np.random.default_rng(seed + 2)
    # moderate random weights exercise curvature better than near-zero init
    params = md.ModelParams(
        config,
        vocab_size,
        init_fn=lambda kind, shape: rng.uniform(-0.3, 0.3, shape),
        dtype=np.float64,
    )
    batch = corpus.make_batch([_random_indexed_example(rng, vocab_size) for _ in range(2)])
    err = nm.grad_check(
        lambda: md.sequence_loss(params, batch, config),
        params.tensors(),
        eps=opts.get("eps", 1e-3),
        max_entries_per_tensor=opts.get("entries_per_tensor", 16),
        rng=np.random.default_rng(seed + 3),
    )
    print(f"max relative gradient error: {err:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if err < GRADCHECK_TOLERANCE else 1


_COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "brandtest": cmd_brandtest,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](Options(args))
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
