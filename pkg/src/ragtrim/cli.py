"""Command-line entry points: make-corpus, annotate, train-predictor, eval-predictor, run, sweep, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .annotate import AnnotationAborted, AnnotationOptions, annotate_dataset
from .data import (
    join_dataset,
    load_examples,
    load_retrievals,
    load_triplets,
    save_triplets,
)
from .features import FeatureSpec
from .generation import HttpGeneratorClient, HttpGeneratorConfig, JudgeMode, MockOracleClient, MockOracleConfig
from .pipeline import (
    confusion_csv,
    load_pipeline_config,
    render_confusion,
    report_confusion,
    run_pipeline,
    sweep_document_count,
)
from .predictor import (
    PredictorReport,
    TrainConfig,
    evaluate_predictor,
    load_model,
    save_model,
    train,
)
from .synth import CorpusSpec, load_plan, make_synthetic_corpus

logger = logging.getLogger(__name__)


def _cmd_make_corpus(args: argparse.Namespace) -> int:
    if args.spec:
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        spec = CorpusSpec(
            size=int(raw.get("size", args.size)),
            n_docs=int(raw.get("n_docs", 5)),
            depth_weights=raw.get("depth_weights") or CorpusSpec(size=1).depth_weights,
        )
    else:
        spec = CorpusSpec(size=args.size)
    corpus = make_synthetic_corpus(spec, seed=args.seed)
    paths = corpus.write(args.out_dir)
    histogram: dict[str, int] = {}
    for entry in corpus.plan:
        key = str(entry.intended_label.to_json())
        histogram[key] = histogram.get(key, 0) + 1
    print(f"wrote {len(corpus.examples)} examples under {args.out_dir}")
    print(f"intended label histogram: {json.dumps(histogram, sort_keys=True)}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


def _build_annotation_client(args: argparse.Namespace, dataset) -> object:
    if args.generator == "mock":
        closed_book: list[str] = []
        if args.mock_plan:
            closed_book = [e.example_id for e in load_plan(args.mock_plan) if e.closed_book]
        config = MockOracleConfig(
            confusion_threshold=args.confusion_threshold,
            noise_rate=args.noise_rate,
            seed=args.mock_seed,
        )
        golds = {ex.id: ex.gold_answers for ex, _ in dataset}
        return MockOracleClient(config, golds_by_id=golds, closed_book_ids=closed_book)
    config = HttpGeneratorConfig(
        endpoint_url=args.endpoint_url,
        model_name=args.model_name,
        cache_dir=args.cache_dir,
        timeout_ms=args.timeout_ms,
        max_retries=args.max_retries,
        api_key_env_var=args.api_key_env_var,
    )
    return HttpGeneratorClient(config)


def _cmd_annotate(args: argparse.Namespace) -> int:
    examples = load_examples(args.examples, args.format)
    retrievals = load_retrievals(args.retrievals)
    dataset = join_dataset(examples, retrievals)
    client = _build_annotation_client(args, dataset)
    options = AnnotationOptions(
        judge_mode=JudgeMode.parse(args.judge),
        include_k0=args.k0 == "on",
        template_id=args.template,
        failure_limit=args.failure_limit,
        workers=args.workers,
    )
    try:
        triplets, stats = annotate_dataset(dataset, client, options)
    except AnnotationAborted as exc:
        partial_path = Path(str(args.out) + ".partial")
        save_triplets(partial_path, exc.triplets)
        if args.stats:
            Path(args.stats).write_text(
                json.dumps(exc.stats.to_dict(), indent=2), encoding="utf-8"
            )
        print(f"ERROR: {exc}", file=sys.stderr)
        print(f"partial results retained at {partial_path}", file=sys.stderr)
        return 1
    save_triplets(args.out, triplets)
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats.to_dict(), indent=2), encoding="utf-8")
    print(f"annotated {stats.annotated}/{stats.total_examples} examples -> {args.out}")
    print(f"label histogram: {json.dumps(stats.to_dict()['label_histogram'])}")
    print(f"generator calls: {stats.generator_calls}, cache hit rate: {stats.cache_hit_rate:.2%}")
    return 0


def _cmd_train_predictor(args: argparse.Namespace) -> int:
    examples = load_examples(args.examples, args.format)
    retrievals = load_retrievals(args.retrievals)
    dataset = join_dataset(examples, retrievals)
    triplets = load_triplets(args.triplets, retrievals)
    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    feature_spec = FeatureSpec(max_docs=int(raw.pop("max_docs", 5)))
    policy = raw.pop("unanswerable_policy", "drop")
    config = TrainConfig(**raw)
    model, report = train(
        triplets, dataset, config, feature_spec=feature_spec, unanswerable_policy=policy
    )
    save_model(args.out, model)
    print(f"trained on {report.n_rows} rows ({report.dropped_unanswerable} unanswerable dropped)")
    print(f"final train accuracy: {report.final_train_accuracy:.4f}")
    print(f"model -> {args.out}")
    return 0


def _cmd_eval_predictor(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    examples = load_examples(args.examples, args.format)
    retrievals = load_retrievals(args.retrievals)
    dataset = join_dataset(examples, retrievals)
    triplets = load_triplets(args.triplets, retrievals)
    report = evaluate_predictor(model, triplets, dataset)
    Path(args.report).write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    print(render_confusion(report))
    print(f"report -> {args.report}")
    return 0


def _cmd_run(args: argparse.Namespace) -> int:
    config = load_pipeline_config(args.config)
    run = run_pipeline(config)
    for m in run.methods:
        r = m.report
        print(
            f"{m.name:14s} n={r.n:4d} avg_docs={r.avg_docs:5.2f} "
            f"tokens={r.mean_tokens:8.2f} em={r.em:.4f} f1={r.f1:.4f}"
        )
    if config.output_dir:
        print(f"outputs -> {config.output_dir}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = load_pipeline_config(args.config)
    points = sweep_document_count(config)
    for p in points:
        print(f"k={p.k} em={p.em:.4f} f1={p.f1:.4f} tokens={p.mean_tokens:.2f}")
    if config.output_dir:
        print(f"outputs -> {config.output_dir}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    raw = json.loads(Path(args.report).read_text(encoding="utf-8"))
    report = PredictorReport(
        class_list=tuple(raw["class_list"]),
        confusion=raw["confusion"],
        accuracy=raw["accuracy"],
        per_class=raw.get("per_class", {}),
        margin_fractions={int(m): f for m, f in raw["margin_fractions"].items()},
        n=raw["n"],
        n_skipped=raw.get("n_skipped", 0),
    )
    print(render_confusion(report))
    if args.out:
        report_confusion(report, args.out)
        print(f"confusion -> {args.out}")
    if args.csv:
        Path(args.csv).write_text(confusion_csv(report), encoding="utf-8")
        print(f"confusion csv -> {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragtrim",
        description="Adaptive top-k context truncation for RAG: annotate, train, compress, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="generate a seeded synthetic corpus with a label plan")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--size", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON file with {size, n_docs, depth_weights}")
    p.set_defaults(func=_cmd_make_corpus)

    p = sub.add_parser("annotate", help="label each example with its minimal document count")
    p.add_argument("--examples", required=True)
    p.add_argument("--retrievals", required=True)
    p.add_argument("--generator", choices=["mock", "http"], default="mock")
    p.add_argument("--judge", default="em", help="em, f1, or f1:<threshold>")
    p.add_argument("--k0", choices=["on", "off"], default="on")
    p.add_argument("--out", required=True)
    p.add_argument("--stats")
    p.add_argument("--format", choices=["qa", "conversational"], default="qa")
    p.add_argument("--template", default="qa_default")
    p.add_argument("--failure-limit", type=float, default=0.10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mock-plan", help="corpus plan JSONL supplying closed-book example ids")
    p.add_argument("--confusion-threshold", type=int, default=None)
    p.add_argument("--noise-rate", type=float, default=0.0)
    p.add_argument("--mock-seed", type=int, default=0)
    p.add_argument("--endpoint-url")
    p.add_argument("--model-name", default="default")
    p.add_argument("--cache-dir")
    p.add_argument("--timeout-ms", type=int, default=30000)
    p.add_argument("--max-retries", type=int, default=3)
    p.add_argument("--api-key-env-var")
    p.set_defaults(func=_cmd_annotate)

    p = sub.add_parser("train-predictor", help="fit the compression-rate classifier")
    p.add_argument("--triplets", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--retrievals", required=True)
    p.add_argument("--config", help="JSON TrainConfig overrides (plus max_docs, unanswerable_policy)")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["qa", "conversational"], default="qa")
    p.set_defaults(func=_cmd_train_predictor)

    p = sub.add_parser("eval-predictor", help="held-out accuracy, confusion matrix, margins")
    p.add_argument("--model", required=True)
    p.add_argument("--triplets", required=True)
    p.add_argument("--examples", required=True)
    p.add_argument("--retrievals", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=["qa", "conversational"], default="qa")
    p.set_defaults(func=_cmd_eval_predictor)

    p = sub.add_parser("run", help="compare compression methods end to end")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="metric-vs-document-count curve for fixed k = 0..N")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="render a predictor report as a confusion matrix")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
