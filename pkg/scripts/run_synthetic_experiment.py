#!/usr/bin/env python3
"""End-to-end desk-scale study on a seeded synthetic corpus.

Builds the corpus, annotates minimal document counts with the mock
generator, trains the compression-rate predictor, compares every method
(fixed top-k, random, single-document, adaptive, oracle), and sweeps EM
over fixed document counts with a confusion-prone generator. All outputs
land under --out-dir; reruns with the same seed reproduce them byte for
byte.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from ragtrim.annotate import annotate_dataset
from ragtrim.data import join_dataset, save_triplets
from ragtrim.pipeline import (
    PipelineConfig,
    format_table_csv,
    report_confusion,
    render_confusion,
    run_pipeline,
    sweep_document_count,
)
from ragtrim.predictor import TrainConfig, evaluate_predictor, save_model, train
from ragtrim.synth import CorpusSpec, make_synthetic_corpus, mock_client_for

DEPTH_WEIGHTS = {"0": 0.10, "1": 0.30, "2": 0.20, "3": 0.15, "4": 0.10, "5": 0.05, "none": 0.10}
METHODS = ["no_retrieval", "top_1", "top_2", "top_3", "top_4", "top_5",
            "top_random", "only_doc", "adaptive", "oracle"]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="experiment_out")
    parser.add_argument("--size", type=int, default=400)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--epochs", type=int, default=150)
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    print(f"== corpus: {args.size} examples, seed {args.seed}")
    corpus = make_synthetic_corpus(
        CorpusSpec(size=args.size, depth_weights=DEPTH_WEIGHTS), seed=args.seed
    )
    paths = corpus.write(out / "corpus")
    dataset = join_dataset(corpus.examples, corpus.retrievals)

    print("== annotating minimal document counts")
    client = mock_client_for(corpus)
    triplets, stats = annotate_dataset(dataset, client)
    triplets_path = out / "triplets.jsonl"
    save_triplets(triplets_path, triplets)
    print(f"   histogram: {json.dumps(stats.to_dict()['label_histogram'])}")
    print(f"   generator calls: {stats.generator_calls}")

    print("== training the compression-rate predictor")
    split = int(0.8 * len(triplets))
    model, report = train(
        triplets[:split], dataset, TrainConfig(epochs=args.epochs, seed=args.seed)
    )
    model_path = out / "model.json"
    save_model(model_path, model)
    heldout = evaluate_predictor(model, triplets[split:], dataset)
    print(f"   train accuracy {report.final_train_accuracy:.3f}, "
          f"held-out accuracy {heldout.accuracy:.3f}")
    report_confusion(heldout, out / "confusion.json")
    print(render_confusion(heldout))

    print("== method comparison")
    config = PipelineConfig(
        examples_path=str(paths["examples"]),
        retrievals_path=str(paths["retrievals"]),
        triplets_path=str(triplets_path),
        generator={"type": "mock", "closed_book_plan": str(paths["plan"])},
        predictors=[{"name": "adaptive", "type": "model", "path": str(model_path)}],
        methods=METHODS,
        seed=args.seed,
        output_dir=str(out),
    )
    run = run_pipeline(config)
    print(format_table_csv(run.methods))

    print("== document-count sweep with a confusion-prone generator")
    sweep_config = PipelineConfig(
        examples_path=str(paths["examples"]),
        retrievals_path=str(paths["retrievals"]),
        methods=["top_1"],
        generator={
            "type": "mock",
            "confusion_threshold": 3,
            "closed_book_plan": str(paths["plan"]),
        },
        seed=args.seed,
        output_dir=str(out),
    )
    for point in sweep_document_count(sweep_config):
        print(f"   k={point.k}: em={point.em:.4f} tokens={point.mean_tokens:.1f}")

    print(f"== outputs under {out}/")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
