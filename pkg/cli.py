"""
Scene Graph Reasoner command line

    python cli.py gen-synthetic --paragraphs 30 --seed 7 --out data/synthetic.jsonl
    python cli.py split --data data/synthetic.jsonl --seed 7 --out data/
    python cli.py preprocess --data data/train.jsonl --split train --out data/train.prep.jsonl
    python cli.py train --data data/train.prep.jsonl --dev data/dev.jsonl --checkpoint checkpoints/sgr.ckpt
    python cli.py predict --data data/test.jsonl --checkpoint checkpoints/sgr.ckpt --out pred.tsv
    python cli.py evaluate --pred pred.tsv --gold data/test.jsonl --out metrics.json
    python cli.py roundtrip-check --data data/train.jsonl
    python cli.py gradcheck --seed 0

Exit codes: 0 success, 1 contract error, 2 I/O error.
"""

import argparse
import os
import random
import sys

import pandas as pd

import numerics as nx
from app_logger import log_gradcheck_failure
from context_encoder import Vocab
from corpus import SPLITS, load_instances, load_predictions, prepare_instance, save_instances, save_predictions
from error_handler import EXIT_OK, ErrorCategory, SGRError, handle_cli_error
from evaluator import TASKS, evaluate, format_reports, reports_to_dict, save_report
from predictor import SceneGraphReasoner, predict_records
from scene_graph import construct_gold_graphs, graph_for_instance, load_triples
from sgr_config import TrainConfig, get_checkpoint_dir, get_log_dir, load_config
from state_reasoner import gold_records, roundtrip_mismatches
from structure_encoder import build_relation_vocab
from synthetic import generate_corpus
from trainer import instance_loss, prepare_examples, train


def _triples(args):
    return load_triples(args.triples) if getattr(args, "triples", None) else None


def cmd_preprocess(args):
    instances = [prepare_instance(inst, args.split) for inst in load_instances(args.data)]
    save_instances(instances, args.out)
    total = sum(len(inst.location_candidates) for inst in instances)
    print(f"[Preprocess] {len(instances)} paragraph(s), {total} location candidate(s) -> {args.out}")


def cmd_train(args):
    config = load_config(args.config, seed=args.seed, hidden_size=args.hidden_size, epochs=args.epochs)
    train_instances = load_instances(args.data)
    dev_instances = load_instances(args.dev) if args.dev else []
    log_path = args.log or os.path.join(get_log_dir(), "train_log.csv")
    result = train(train_instances, dev_instances, config, _triples(args), log_path, args.plot)
    checkpoint = args.checkpoint or os.path.join(get_checkpoint_dir(), "sgr.ckpt")
    result.model.save(checkpoint)
    vocab_path = args.vocab or os.path.splitext(checkpoint)[0] + ".vocab"
    result.model.vocab.save(vocab_path)
    print(f"[Train] Vocabulary written to {vocab_path}")
    print(f"[Train] Log written to {log_path}")


def _print_invocations(results, instances):
    rows = []
    for result, instance in zip(results, instances):
        counts = result.invocations
        rows.append({
            "para_id": result.para_id,
            "T": instance.num_steps,
            "N": instance.num_entities,
            "context": counts["context"],
            "structure": counts["structure"],
            "concept": counts["concept"],
            "entity_wise_context": counts["entity_wise_context"],
            "entity_wise_structure": counts["entity_wise_structure"],
        })
    frame = pd.DataFrame(rows)
    print(frame.to_string(index=False))
    scene_wise = int(frame["context"].sum()) if rows else 0
    entity_wise = int(frame["entity_wise_context"].sum()) if rows else 0
    print(f"[Predict] context encoder calls: scene-wise {scene_wise}, entity-wise reference {entity_wise}")
    for row in rows:
        if row["context"] != row["T"] + 1:
            raise SGRError("context encoder invocation count differs from T + 1", ErrorCategory.CONTRACT,
                           para_id=row["para_id"], count=row["context"], expected=row["T"] + 1)


def cmd_predict(args):
    model = SceneGraphReasoner.load(args.checkpoint)
    if args.vocab and Vocab.load(args.vocab).itos != model.vocab.itos:
        raise SGRError("vocab file does not match the checkpoint", ErrorCategory.CONTRACT,
                       vocab=args.vocab, checkpoint=args.checkpoint)
    instances = load_instances(args.data)
    if args.dump_graphs and os.path.exists(args.dump_graphs):
        os.remove(args.dump_graphs)
    results = predict_records(model, instances, _triples(args), workers=args.workers, split=args.split,
                              dump_path=args.dump_graphs, entity_wise=args.count_invocations)
    records = [row for result in results for row in result.records]
    save_predictions(records, args.out)
    print(f"[Predict] {len(records)} row(s) for {len(instances)} paragraph(s) -> {args.out}")
    if args.count_invocations:
        _print_invocations(results, instances)


def _gold_rows(path):
    if path.endswith(".jsonl"):
        return [row for instance in load_instances(path) for row in gold_records(instance)]
    return load_predictions(path)


def cmd_evaluate(args):
    predicted = load_predictions(args.pred)
    gold = _gold_rows(args.gold)
    reports = evaluate(predicted, gold, args.task)
    print(format_reports(reports))
    if args.out:
        save_report(reports_to_dict(reports), args.out)
        print(f"[Evaluator] Report written to {args.out}")


def cmd_roundtrip_check(args):
    instances = load_instances(args.data)
    failed = 0
    for instance in instances:
        graph = graph_for_instance(instance, args.split, use_knowledge=False)
        try:
            scenes = construct_gold_graphs(instance, graph)
        except SGRError as e:
            failed += 1
            print(f"[Roundtrip] {instance.para_id} rejected: {e}")
            continue
        mismatches = roundtrip_mismatches(instance, graph, scenes)
        if mismatches:
            failed += 1
            for entity, step, kind, expected, got in mismatches[:5]:
                print(f"[Roundtrip] {instance.para_id} {entity} step {step} {kind}: {expected} != {got}")
    print(f"[Roundtrip] {len(instances) - failed}/{len(instances)} paragraph(s) reproduced exactly")
    if failed:
        raise SGRError("round trip failed", ErrorCategory.CONTRACT, paragraphs=failed)


def cmd_gradcheck(args):
    config = TrainConfig(hidden_size=args.hidden_size, num_layers=1, num_heads=2, max_len=64,
                         seed=args.seed, learning_rate=1e-3)
    candidates = prepare_examples(generate_corpus(20, seed=args.seed, min_steps=3, max_steps=3), "train")
    example = min(candidates, key=lambda ex: ex.graph.num_nodes)
    instance = example.instance
    model = SceneGraphReasoner.initialize(Vocab.from_instances([instance]),
                                          build_relation_vocab([example.graph]), config)
    print(f"[Gradcheck] {len(model.params)} tensor(s), {model.params.num_values()} value(s), "
          f"{example.graph.num_nodes} node(s), T={instance.num_steps}")
    report = nx.grad_check(lambda params: instance_loss(model, example), model.params,
                           tolerance=args.tolerance, max_entries=args.max_entries, seed=args.seed)
    frame = pd.DataFrame({"entries": report.checked_entries, "max_rel_error": report.errors})
    print(frame.to_string(float_format="{:.3e}".format))
    print(f"[Gradcheck] max relative error {report.max_error:.3e} (tolerance {args.tolerance:g})")
    if not report.passed:
        log_gradcheck_failure(report.failures())
        raise SGRError("gradient check failed", ErrorCategory.GRADIENT, parameters=len(report.failures()))


def cmd_gen_synthetic(args):
    instances = generate_corpus(args.paragraphs, seed=args.seed)
    save_instances(instances, args.out)
    print(f"[Synthetic] {len(instances)} paragraph(s) -> {args.out}")


def cmd_split(args):
    instances = load_instances(args.data)
    order = list(range(len(instances)))
    random.Random(args.seed).shuffle(order)
    n_train = int(round(0.8 * len(order)))
    n_dev = int(round(0.1 * len(order)))
    parts = {
        "train": order[:n_train],
        "dev": order[n_train:n_train + n_dev],
        "test": order[n_train + n_dev:],
    }
    for name, indices in parts.items():
        path = os.path.join(args.out, f"{name}.jsonl")
        save_instances([instances[i] for i in sorted(indices)], path)
        print(f"[Split] {name}: {len(indices)} paragraph(s) -> {path}")


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "roundtrip-check": cmd_roundtrip_check,
    "gradcheck": cmd_gradcheck,
    "gen-synthetic": cmd_gen_synthetic,
    "split": cmd_split,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="sgr", description="Scene Graph Reasoner for procedural text")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="attach location candidates and entity mentions")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=SPLITS, default="train")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--dev")
    p.add_argument("--config")
    p.add_argument("--checkpoint")
    p.add_argument("--vocab", help="vocabulary file (default: next to the checkpoint)")
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--triples")
    p.add_argument("--log")
    p.add_argument("--plot")

    p = sub.add_parser("predict", help="write the prediction TSV")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="check the checkpoint against this vocabulary file")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--triples")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dump-graphs")
    p.add_argument("--count-invocations", action="store_true")

    p = sub.add_parser("evaluate", help="score a prediction TSV against gold")
    p.add_argument("--pred", "--data", dest="pred", required=True)
    p.add_argument("--gold", required=True, help="gold TSV, or annotated JSONL")
    p.add_argument("--task", choices=TASKS, default="propara")
    p.add_argument("--out")

    p = sub.add_parser("roundtrip-check", help="gold annotation -> scene graphs -> states identity")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="train")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden-size", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--max-entries", type=int, help="entries sampled per tensor (default: all)")

    p = sub.add_parser("gen-synthetic", help="generate a synthetic annotated corpus")
    p.add_argument("--paragraphs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="seeded 80/10/10 train/dev/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def run(argv=None):
    """
    Run one command

    Returns:
        int: Exit code
    """
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except Exception as e:
        code, message = handle_cli_error(e, args.command)
        print(message, file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(run())
