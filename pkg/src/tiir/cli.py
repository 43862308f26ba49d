"""Command-line interface for the retrieval engine.

Every subcommand is a thin wrapper over the library. When --out is given,
the run writes a config snapshot (config.json) plus its reports under that
directory; --config points at a JSON file whose keys provide defaults for
any flag not set explicitly, and --seed drives every random choice.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import adapters, core, encoder, harness, pipeline, retrieval, training
from .vision import VALID_GRID_WIDTHS


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _write_snapshot(out_dir: Path, args: argparse.Namespace, argv: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "argv": argv,
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _require_out(args: argparse.Namespace) -> Path:
    if not args.out:
        raise SystemExit("this subcommand requires --out <dir>")
    return Path(args.out)


def _encoder_config(args: argparse.Namespace) -> encoder.EncoderConfig:
    return encoder.EncoderConfig(
        model_dim=args.dim,
        vocab_buckets=args.vocab,
        max_len=args.max_len,
        channels=args.channels,
        layers=args.layers,
        seed=args.seed,
        compute_dtype=args.dtype,
    )


def _load_examples_and_qrels(path: str) -> tuple[list[core.RetrievalExample], dict[str, str]]:
    examples = core.load_examples(path)
    return examples, {ex.query.seq_id: ex.positive_doc_id for ex in examples}


# --- subcommand handlers -------------------------------------------------------


def _cmd_build_corpus(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    if args.synthetic:
        articles = pipeline.synthetic_articles(
            args.synthetic,
            methods_per_article=args.methods,
            steps_per_method=args.steps,
            seed=args.seed,
        )
        pipeline.save_articles(articles, out / "articles.jsonl")
    elif args.articles:
        articles = pipeline.load_articles(args.articles)
    else:
        raise SystemExit("build-corpus needs --articles or --synthetic N")
    corpus = pipeline.build_corpus(articles)
    bad = [
        report
        for doc in corpus.documents.values()
        if not (report := core.validate_sequence(doc, core.ROLE_DOCUMENT)).valid
    ]
    core.save_corpus(corpus, out / "corpus.jsonl")
    print(f"wrote {len(corpus)} documents ({len(bad)} with violations) to {out/'corpus.jsonl'}")
    return 0 if not bad else 1


def _cmd_gen_queries(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    corpus = core.load_corpus(args.corpus)
    clients = (
        pipeline.HttpGenClients(args.clients_url)
        if args.clients_url
        else pipeline.MockGenClients()
    )
    examples, provenances = pipeline.make_examples(corpus, clients, args.k)
    core.save_sequences([ex.query for ex in examples], out / "queries.jsonl")
    core.save_examples(examples, out / "examples.jsonl")
    with open(out / "provenance.jsonl", "w", encoding="utf-8") as f:
        for prov in provenances:
            f.write(json.dumps(prov.to_json_obj(), sort_keys=True) + "\n")
    print(f"wrote {len(examples)} queries to {out}")
    return 0


def _cmd_stats(args: argparse.Namespace, argv: list[str]) -> int:
    corpus = core.load_corpus(args.corpus)
    trainset = core.load_examples(args.train) if args.train else []
    testset = core.load_examples(args.test) if args.test else []
    cfg = _encoder_config(args)
    stats = pipeline.dataset_stats(corpus, trainset, testset, cfg)
    obj = {split: s.to_json_obj() for split, s in stats.items()}
    print(json.dumps(obj, indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        _write_snapshot(out, args, argv)
        with open(out / "stats.json", "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def _cmd_train(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    corpus = core.load_corpus(args.corpus)
    trainset, _ = _load_examples_and_qrels(args.train)
    if args.ckpt:
        cfg, params = encoder.load_checkpoint(args.ckpt)
    else:
        cfg = _encoder_config(args)
        params = encoder.init_params(cfg)
    train_cfg = training.TrainConfig(
        temperature=args.temperature,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        warmup_fraction=args.warmup,
        epochs=args.epochs,
        strategy=args.strategy,
        fixed_width=args.width,
        widths=tuple(args.widths),
        momentum=args.momentum,
        seed=args.seed,
    )
    started = time.perf_counter()
    result = training.train(train_cfg, trainset, corpus, params, cfg)
    elapsed = time.perf_counter() - started
    encoder.save_checkpoint(result.params, cfg, out / "checkpoint.tiir")
    training.write_loss_log(result.log, out / "loss_log.csv")
    first, last = result.log[0].loss, result.log[-1].loss
    print(
        f"trained {len(result.log)} steps in {elapsed:.1f}s; "
        f"loss {first:.4f} -> {last:.4f}; checkpoint at {out/'checkpoint.tiir'}"
    )
    return 0


def _cmd_encode(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    cfg, params = encoder.load_checkpoint(args.ckpt)
    seqs = core.load_sequences(args.input)
    embs = harness.encode_sequences(
        [(s.seq_id, s) for s in seqs], args.width, params, cfg
    )
    core.save_embeddings(embs, out / "embeddings.tiir")
    print(f"encoded {len(embs)} sequences at width {args.width}")
    return 0


def _cmd_index(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    embs = core.load_embeddings(args.emb)
    index = retrieval.build_index(embs)
    core.save_embeddings(
        [
            (doc_id, core.Embedding(values=index.matrix[i], grid_width=index.grid_width))
            for i, doc_id in enumerate(index.doc_ids)
        ],
        out / "index.tiir",
    )
    print(f"indexed {len(index)} documents (dim {index.dim}, width {index.grid_width})")
    return 0


def _cmd_search(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    index = retrieval.build_index(core.load_embeddings(args.index))
    queries = core.load_embeddings(args.queries)
    runs = []
    for qid, emb in queries:
        ranked = retrieval.search(index, emb, args.k)
        runs.append(retrieval.RankedList(query_id=qid, entries=ranked.entries))
    retrieval.save_run(runs, out / "run.trec")
    print(f"wrote {len(runs)} rankings to {out/'run.trec'}")
    return 0


def _cmd_eval(args: argparse.Namespace, argv: list[str]) -> int:
    runs = retrieval.load_run(args.run)
    qrels = retrieval.load_qrels(args.qrels)
    report = retrieval.evaluate(runs, qrels, args.k)
    print(json.dumps(report.to_json_obj(), indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        _write_snapshot(out, args, argv)
        retrieval.save_metrics(report, out / "metrics.json")
    return 0


def _cmd_adapt(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    report: dict = {"kind": args.mode}
    if args.mode == "visual-doc":
        report["status"] = "unimplemented"
        print("adapter kind 'visual-doc' is recorded as unimplemented", file=sys.stderr)
    elif args.mode == "caption":
        client = (
            adapters.HttpCaptionClient(args.caption_url)
            if args.caption_url
            else adapters.MockCaptionClient()
        )
        seqs = core.load_sequences(args.input)
        core.save_sequences(
            [adapters.captionize(s, client) for s in seqs], out / "captioned.jsonl"
        )
        report["status"] = "ok"
        report["sequences"] = len(seqs)
    elif args.mode == "merged":
        cfg, _ = encoder.load_checkpoint(args.ckpt)
        seqs = core.load_sequences(args.input)
        grid_dir = out / "merged_grids"
        grid_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for seq in seqs:
            grid, text = adapters.prepare_merged(seq, cfg.channels)
            grid_path = grid_dir / f"{seq.seq_id}.grid"
            core.save_grid(grid, grid_path)
            rows.append({"seq_id": seq.seq_id, "grid": str(grid_path), "text": text})
        with open(out / "merged.jsonl", "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        report["status"] = "ok"
        report["sequences"] = len(rows)
    elif args.mode == "fusion":
        cfg, params = encoder.load_checkpoint(args.ckpt)
        fusion_cfg = adapters.FusionConfig(combine=args.combine, image_agg=args.image_agg)
        seqs = core.load_sequences(args.input)
        fused = []
        for seq in seqs:
            t_emb, image_embs = adapters.fusion_inputs(seq, params, cfg, args.width)
            fused.append((seq.seq_id, adapters.vector_fuse(t_emb, image_embs, fusion_cfg)))
        core.save_embeddings(fused, out / "fused.tiir")
        report["status"] = "ok"
        report["sequences"] = len(fused)
    with open(out / "adapt_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return 0


def _cmd_ablate_shuffle(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    cfg, params = encoder.load_checkpoint(args.ckpt)
    corpus = core.load_corpus(args.corpus)
    testset, _ = _load_examples_and_qrels(args.test)
    index = harness.index_corpus(corpus, args.width, params, cfg)
    reports = harness.run_shuffle_experiment(
        params, cfg, index, testset, args.modes.split(","), args.seed, ks=args.k
    )
    for mode, report in reports.items():
        report.save(out / f"shuffle_{mode}.json")
        retrieval.save_run(report.rankings, out / f"shuffle_{mode}.trec")
        mrr = report.metrics.mrr[max(args.k)]
        print(f"{mode:10s} MRR@{max(args.k)} = {mrr:.4f}")
    return 0


def _cmd_sweep_n(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    cfg, params = encoder.load_checkpoint(args.ckpt)
    corpus = core.load_corpus(args.corpus)
    testset, _ = _load_examples_and_qrels(args.test)
    rows = harness.sweep_granularity(params, cfg, corpus, testset, args.widths, ks=args.k)
    harness.write_sweep_csv(rows, out / "sweep.csv")
    with open(out / "sweep.json", "w", encoding="utf-8") as f:
        json.dump(
            {
                str(w): {
                    "metrics": row.metrics.to_json_obj(),
                    "avg_seq_len_q": row.avg_seq_len_q,
                    "avg_seq_len_d": row.avg_seq_len_d,
                }
                for w, row in rows.items()
            },
            f, indent=2, sort_keys=True,
        )
        f.write("\n")
    for w in sorted(rows):
        row = rows[w]
        print(
            f"N={w:<3d} mrr@{max(args.k)}={row.metrics.mrr[max(args.k)]:.4f} "
            f"len_q={row.avg_seq_len_q:.1f} len_d={row.avg_seq_len_d:.1f}"
        )
    return 0


def _cmd_dominance(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    cfg, params = encoder.load_checkpoint(args.ckpt)
    seqs = core.load_sequences(args.input)
    reports = harness.dominance_distribution(params, cfg, seqs, args.widths)
    obj = {
        str(w): {
            "counts": list(r.counts),
            "bin_edges": list(r.bin_edges),
            "undefined_count": r.undefined_count,
        }
        for w, r in reports.items()
    }
    with open(out / "dominance.json", "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    for w in sorted(reports):
        r = reports[w]
        defined = len(r.scores)
        mean = float(np.mean(r.scores)) if defined else float("nan")
        print(f"N={w:<3d} defined={defined} undefined={r.undefined_count} mean={mean:.4f}")
    return 0


def _cmd_bench(args: argparse.Namespace, argv: list[str]) -> int:
    out = _require_out(args)
    _write_snapshot(out, args, argv)
    cfg, params = encoder.load_checkpoint(args.ckpt)
    pairs_data = harness.make_bench_pairs(
        args.pairs, images_per_side=args.images, seed=args.seed
    )
    rows = harness.bench_efficiency(
        params, cfg, pairs_data, args.pairs, args.widths,
        seed=args.seed,
        repetitions=args.repetitions,
        mem_budget_bytes=args.budget_mb * 1024 * 1024,
    )
    harness.write_bench_csv(rows, out / "bench.csv")
    for row in rows:
        print(
            f"N={row.width:<3d} len_q={row.avg_seq_len_q:8.2f} len_d={row.avg_seq_len_d:8.2f} "
            f"time={row.encode_time_s:7.3f}s max_batch={row.max_batch}"
        )
    return 0


def _cmd_grad_check(args: argparse.Namespace, argv: list[str]) -> int:
    rng = np.random.default_rng(args.seed)
    dim = args.dim
    q = rng.normal(size=dim)
    pos = rng.normal(size=dim)
    negs = [rng.normal(size=dim) for _ in range(3)]

    def nce_fn(theta: np.ndarray) -> tuple[float, np.ndarray]:
        parts = np.split(theta, 2 + len(negs))
        loss, d_q, d_pos, d_negs = training.info_nce_with_grad(
            parts[0], parts[1], parts[2:], 0.05
        )
        return loss, np.concatenate([d_q, d_pos] + list(d_negs))

    theta = np.concatenate([q, pos] + negs)
    nce_report = training.grad_check(
        nce_fn, theta, args.tolerance, rng=np.random.default_rng(args.seed + 1),
        fraction=1.0,
    )

    cfg = encoder.EncoderConfig(
        model_dim=dim, vocab_buckets=64, max_len=128, channels=4,
        layers=args.layers, seed=args.seed,
    )
    params = encoder.init_params(cfg)
    docs = [
        core.InterleavedSequence(
            items=(
                core.text_item(f"probe doc {i} with parts"),
                core.image_item(f"synth:{40 + i}"),
                core.text_item("and a tail"),
                core.image_item(f"synth:{80 + i}"),
            ),
            seq_id=f"d{i}",
            article_id=f"a{i}",
        )
        for i in range(4)
    ]
    examples = [
        core.RetrievalExample(
            query=core.InterleavedSequence(
                items=(
                    core.text_item(f"find probe {i}"),
                    core.image_item(f"synth:{40 + i}"),
                    core.image_item(f"synth:{120 + i}"),
                ),
                seq_id=f"q{i}",
            ),
            positive_doc_id=f"d{i}",
        )
        for i in range(2)
    ]
    batch = training.Batch(
        examples=examples,
        positives=[docs[0], docs[1]],
        hard_negatives=[docs[2], docs[3]],
    )
    train_cfg = training.TrainConfig(strategy="fixed", fixed_width=3)

    def full_fn(p: encoder.EncoderParams) -> tuple[float, encoder.EncoderParams]:
        loss, grads, _ = training.batch_loss_and_grad(batch, p, cfg, train_cfg)
        return loss, grads

    full_report = training.grad_check(
        training.params_loss_fn(params, full_fn),
        params.to_vector(),
        args.tolerance,
        rng=np.random.default_rng(args.seed + 2),
        labels=params.named_slices(),
    )
    ok = nce_report.passed and full_report.passed
    print(f"info_nce: max_rel_err={nce_report.max_rel_err:.3e} ({'pass' if nce_report.passed else 'FAIL'})")
    print(
        f"encode+batch_loss: max_rel_err={full_report.max_rel_err:.3e} "
        f"worst={full_report.worst_param} ({'pass' if full_report.passed else 'FAIL'})"
    )
    if args.out:
        out = Path(args.out)
        _write_snapshot(out, args, argv)
        with open(out / "grad_check.json", "w", encoding="utf-8") as f:
            json.dump(
                {
                    "info_nce": nce_report.__dict__,
                    "encode_batch_loss": full_report.__dict__,
                },
                f, indent=2, sort_keys=True,
            )
            f.write("\n")
    return 0 if ok else 1


# --- parser --------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiir", description="Text-image interleaved retrieval engine."
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=str, default=None, help="JSON flag defaults")
    common.add_argument("--out", type=str, default=None, help="output directory")

    enc = argparse.ArgumentParser(add_help=False)
    enc.add_argument("--dim", type=int, default=32)
    enc.add_argument("--vocab", type=int, default=4096)
    enc.add_argument("--max-len", type=int, default=4096, dest="max_len")
    enc.add_argument("--channels", type=int, default=16)
    enc.add_argument("--layers", type=int, default=1)
    enc.add_argument("--dtype", choices=("float32", "float64"), default="float64")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-corpus", parents=[common], help="build a corpus from articles")
    p.add_argument("--articles", type=str)
    p.add_argument("--synthetic", type=int, default=0, metavar="N_ARTICLES")
    p.add_argument("--methods", type=int, default=3)
    p.add_argument("--steps", type=int, default=4)
    p.set_defaults(func=_cmd_build_corpus)

    p = sub.add_parser("gen-queries", parents=[common], help="generate interleaved queries")
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--k", type=_int_list, default=[3])
    p.add_argument("--clients-url", type=str, default=None)
    p.set_defaults(func=_cmd_gen_queries)

    p = sub.add_parser("stats", parents=[common, enc], help="dataset statistics")
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--train", type=str)
    p.add_argument("--test", type=str)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("train", parents=[common, enc], help="train the encoder")
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--train", type=str, required=True)
    p.add_argument("--ckpt", type=str, default=None, help="continue from checkpoint")
    p.add_argument("--strategy", choices=training.STRATEGIES, default="fixed")
    p.add_argument("--width", type=int, default=24)
    p.add_argument("--widths", type=_int_list, default=list(VALID_GRID_WIDTHS))
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--warmup", type=float, default=0.1)
    p.add_argument("--temperature", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("encode", parents=[common], help="encode sequences to embeddings")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--input", type=str, required=True)
    p.add_argument("--width", type=int, required=True)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("index", parents=[common], help="build a dense index file")
    p.add_argument("--emb", type=str, required=True)
    p.set_defaults(func=_cmd_index)

    p = sub.add_parser("search", parents=[common], help="top-k search")
    p.add_argument("--index", type=str, required=True)
    p.add_argument("--queries", type=str, required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("eval", parents=[common], help="ranking metrics from a run file")
    p.add_argument("--run", type=str, required=True)
    p.add_argument("--qrels", type=str, required=True)
    p.add_argument("--k", type=_int_list, default=[5, 10])
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("adapt", parents=[common], help="non-interleaved baselines")
    p.add_argument("--mode", choices=("fusion", "caption", "merged", "visual-doc"), required=True)
    p.add_argument("--input", type=str)
    p.add_argument("--ckpt", type=str)
    p.add_argument("--width", type=int, default=3)
    p.add_argument("--combine", choices=("sum", "concatenate", "dot_product"), default="sum")
    p.add_argument("--image-agg", choices=("mean", "concat"), default="mean", dest="image_agg")
    p.add_argument("--caption-url", type=str, default=None)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("ablate-shuffle", parents=[common], help="shuffle ablation")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--test", type=str, required=True)
    p.add_argument("--modes", type=str, default="none,ordering,position,both")
    p.add_argument("--width", type=int, default=3)
    p.add_argument("--k", type=_int_list, default=[5, 10])
    p.set_defaults(func=_cmd_ablate_shuffle)

    p = sub.add_parser("sweep-n", parents=[common], help="granularity sweep")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--corpus", type=str, required=True)
    p.add_argument("--test", type=str, required=True)
    p.add_argument("--widths", type=_int_list, default=list(VALID_GRID_WIDTHS))
    p.add_argument("--k", type=_int_list, default=[5, 10])
    p.set_defaults(func=_cmd_sweep_n)

    p = sub.add_parser("dominance", parents=[common], help="dominance-score distribution")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--input", type=str, required=True)
    p.add_argument("--widths", type=_int_list, default=list(VALID_GRID_WIDTHS))
    p.set_defaults(func=_cmd_dominance)

    p = sub.add_parser("bench", parents=[common], help="encoding efficiency benchmark")
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--pairs", type=int, default=1000)
    p.add_argument("--widths", type=_int_list, default=list(VALID_GRID_WIDTHS))
    p.add_argument("--images", type=int, default=2)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--budget-mb", type=int, default=256, dest="budget_mb")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # pre-scan --config so its values become flag defaults
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=str, default=None)
    known, _ = pre.parse_known_args(argv)
    parser = _build_parser()
    if known.config:
        with open(known.config, "r", encoding="utf-8") as f:
            defaults = json.load(f)
        for action in parser._subparsers._group_actions:  # noqa: SLF001
            for sub in action.choices.values():
                sub.set_defaults(**{k: v for k, v in defaults.items()})
    args = parser.parse_args(argv)
    return args.func(args, argv)


if __name__ == "__main__":
    sys.exit(main())
