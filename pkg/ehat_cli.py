#!/usr/bin/env python3
"""
Command-line entry point: corpus generation, training, evaluation, decoding,
gradient checks, the experiment tables and the toy-scale acceptance runs.

Exit codes: 0 success, 1 contract/configuration/data error or a failed check,
2 numerical divergence.
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

from ehatcap.config import Config, get_config, reset_config
from ehatcap.corpus import CaptionCorpus, generate_corpus, load_corpus, save_corpus
from ehatcap.decoder import EhatDecoder, greedy_decode, load_model
from ehatcap.errors import ContractError, EhatError, NumericalError
from ehatcap.experiments import (
    OverfitSettings,
    ScstSanitySettings,
    ToyModel,
    format_experiment_table,
    format_gradcheck_report,
    format_overfit_report,
    format_scst_sanity_report,
    run_ablation,
    run_gradcheck,
    run_lambda_sweep,
    run_overfit,
    run_scst_sanity,
    run_variants,
)
from ehatcap.persistence import best_checkpoint, prepare_run_dir, write_matrix_blocks
from ehatcap.training import Trainer, evaluate, split_records
from ehatcap.utils import log, set_quiet

Handler = Callable[[argparse.Namespace, Config], int]


def _load_corpus(args: argparse.Namespace, config: Config) -> CaptionCorpus:
    corpus_dir = args.corpus or config.corpus_dir
    log(f"[CLI] Loading corpus from {corpus_dir}")
    return load_corpus(corpus_dir)


def _resolve_checkpoint(args: argparse.Namespace, config: Config) -> str:
    """--checkpoint, or the best RL (then CE) checkpoint of the run directory."""
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise ContractError(f"checkpoint {args.checkpoint} does not exist")
        return str(args.checkpoint)
    run_dir = args.run_dir or config.run_dir
    for stage in ("rl", "ce"):
        entry = best_checkpoint(run_dir, stage)
        if entry is not None:
            return entry.path
    raise ContractError(f"no checkpoint given and none recorded in {run_dir}")


# ===== Commands =====


def cmd_gen_corpus(args: argparse.Namespace, config: Config) -> int:
    out_dir = args.out or config.corpus_dir
    corpus = generate_corpus(config.corpus_config)
    save_corpus(corpus, out_dir, force=args.force)
    config.write_effective(out_dir)
    return 0


def cmd_train(args: argparse.Namespace, config: Config) -> int:
    if args.stage:
        config.set("train", "stage", args.stage)
    if args.init_from:
        config.set("train", "init_from", args.init_from)
    run_dir = args.run_dir or config.run_dir
    corpus = _load_corpus(args, config)
    decoder = config.decoder_config(len(corpus.vocab.a), len(corpus.vocab.b))
    train = config.train_config
    prepare_run_dir(run_dir, force=args.force)
    config.write_effective(run_dir, {"decoder": decoder.to_dict()})
    result = Trainer(EhatDecoder(decoder), corpus, train, run_dir).train()
    if result.best is not None:
        best = result.best
        log(f"[CLI] Best {result.stage} checkpoint: {best.path} (CIDEr-D {best.val_cider:.3f})")
    return 0


def cmd_eval(args: argparse.Namespace, config: Config) -> int:
    corpus = _load_corpus(args, config)
    path = _resolve_checkpoint(args, config)
    model, _ = load_model(path)
    split = args.split or config.eval_split
    table = evaluate(model, corpus, split, args.limit)
    print(table.format_text(), end="")
    if args.out:
        prepare_run_dir(args.out, force=args.force)
        config.write_effective(
            args.out, {"run": {"eval_split": split}, "decoder": model.config.to_dict()}
        )
        with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as f:
            f.write(table.format_text())
        with open(os.path.join(args.out, "metrics.jsonl"), "w", encoding="utf-8") as f:
            f.write(table.to_jsonl())
    return 0


def cmd_decode(args: argparse.Namespace, config: Config) -> int:
    corpus = _load_corpus(args, config)
    model, _ = load_model(_resolve_checkpoint(args, config))
    records = split_records(corpus, args.split or config.eval_split, args.limit)
    if args.export_attention:
        prepare_run_dir(args.export_attention, force=args.force)
        config.write_effective(args.export_attention, {"decoder": model.config.to_dict()})
    for record in records:
        trace: Optional[list] = [] if args.export_attention else None
        result = greedy_decode(model, corpus.region_features(record.image_id), args.max_len, trace)
        caption_a = " ".join(corpus.vocab.a.decode(result.tokens_a))
        caption_b = " ".join(corpus.vocab.b.decode(result.tokens_b))
        print(f"{record.image_id}\t{caption_a}\t{caption_b}")
        if trace is not None:
            path = os.path.join(args.export_attention, f"attention_{record.image_id}.txt")
            count = write_matrix_blocks(path, trace)
            log(f"[CLI] Exported {count} attention matrices to {path}")
    return 0


def cmd_gradcheck(args: argparse.Namespace, config: Config) -> int:
    blocks = run_gradcheck(
        args.blocks or None, d_k=args.d_k, m=args.m, n=args.n, tolerance=args.tolerance
    )
    print(format_gradcheck_report(blocks), end="")
    return 0 if all(b.passed for b in blocks) else 1


def _experiment_dir(args: argparse.Namespace, config: Config, name: str) -> str:
    out_dir = args.out or os.path.join(config.experiment_dir, name)
    prepare_run_dir(out_dir, force=args.force)
    return out_dir


def _experiment(args: argparse.Namespace, config: Config, name: str) -> int:
    corpus = _load_corpus(args, config)
    decoder = config.decoder_config(len(corpus.vocab.a), len(corpus.vocab.b))
    train = config.train_config
    if train.stage != "ce":
        raise ContractError("experiment tables are trained with the CE stage")
    out_dir = _experiment_dir(args, config, name)
    config.write_effective(out_dir, {"decoder": decoder.to_dict()})
    split = args.split or config.eval_split
    if name == "ablation":
        rows = run_ablation(corpus, decoder, train, out_dir, split, args.force)
        print(format_experiment_table(rows), end="")
    elif name == "sweep_lambda":
        lambdas = config.sweep_lambdas
        rows = run_lambda_sweep(corpus, decoder, train, out_dir, lambdas, split, args.force)
        print(format_experiment_table(rows, "lambda"), end="")
    else:
        run_variants(corpus, decoder, train, out_dir, split, args.force)
        with open(os.path.join(out_dir, "variants.txt"), "r", encoding="utf-8") as f:
            print(f.read(), end="")
    return 0


def cmd_ablate(args: argparse.Namespace, config: Config) -> int:
    return _experiment(args, config, "ablation")


def cmd_sweep_lambda(args: argparse.Namespace, config: Config) -> int:
    return _experiment(args, config, "sweep_lambda")


def cmd_variants(args: argparse.Namespace, config: Config) -> int:
    return _experiment(args, config, "variants")


def _toy_model(args: argparse.Namespace) -> ToyModel:
    return ToyModel(d_model=args.d_model, layers=args.layers, heads=args.heads, seed=args.seed)


def cmd_overfit(args: argparse.Namespace, config: Config) -> int:
    settings = OverfitSettings(scenes=args.scenes, max_steps=args.max_steps, model=_toy_model(args))
    result = run_overfit(settings, _experiment_dir(args, config, "overfit"), args.force)
    print(format_overfit_report(result), end="")
    return 0 if result.passed else 1


def cmd_scst_sanity(args: argparse.Namespace, config: Config) -> int:
    settings = ScstSanitySettings(
        scenes=args.scenes,
        ce_steps=args.ce_steps,
        steps=args.steps,
        seeds=tuple(args.seeds),
        model=_toy_model(args),
    )
    out_dir = _experiment_dir(args, config, "scst_sanity")
    result = run_scst_sanity(settings, out_dir, args.init_from, args.force)
    print(format_scst_sanity_report(result), end="")
    return 0 if result.passed else 1


COMMANDS: Dict[str, Handler] = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep-lambda": cmd_sweep_lambda,
    "variants": cmd_variants,
    "overfit": cmd_overfit,
    "scst-sanity": cmd_scst_sanity,
}


# ===== Argument parsing =====


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a YAML config (default: the project config.yaml)")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    common.add_argument("--quiet", action="store_true", help="suppress log output")
    common.add_argument(
        "--force", action="store_true", help="write into a non-empty output directory"
    )

    parser = argparse.ArgumentParser(
        prog="ehatcap", description="Bilingual EHAT captioning toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic corpus")
    p.add_argument("--out", help="corpus directory (default: run.corpus_dir)")

    p = sub.add_parser("train", parents=[common], help="run the CE or RL training stage")
    p.add_argument("--stage", choices=("ce", "rl"))
    p.add_argument("--run-dir")
    p.add_argument("--corpus")
    p.add_argument("--init-from", help="CE checkpoint or CE run directory (RL stage)")

    for name, help_text in (("eval", "score a checkpoint"), ("decode", "print caption pairs")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--checkpoint")
        p.add_argument("--run-dir", help="pick the best checkpoint recorded here")
        p.add_argument("--corpus")
        p.add_argument("--split", choices=("train", "val", "test"))
        p.add_argument("--limit", type=int)
        if name == "eval":
            p.add_argument("--out", help="write metrics.txt/metrics.jsonl here")
        else:
            p.add_argument("--max-len", type=int, default=None)
            p.add_argument("--export-attention", metavar="DIR", help="write ω and HCA matrices")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--blocks", nargs="*")
    p.add_argument("--d-k", type=int, default=8)
    p.add_argument("--m", type=int, default=6)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    for name, help_text in (
        ("ablate", "MHCA/HARN/HCA ablation table"),
        ("sweep-lambda", "HCA λ sweep table"),
        ("variants", "HARN variant comparison"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--corpus")
        p.add_argument("--out")
        p.add_argument("--split", choices=("train", "val", "test"))

    toy = argparse.ArgumentParser(add_help=False)
    toy.add_argument("--out")
    toy.add_argument("--d-model", type=int, default=64)
    toy.add_argument("--layers", type=int, default=2)
    toy.add_argument("--heads", type=int, default=4)
    toy.add_argument("--seed", type=int, default=0, help="model initialisation seed")

    p = sub.add_parser(
        "overfit", parents=[common, toy], help="CE overfit of a small corpus (accuracy check)"
    )
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--max-steps", type=int, default=2000)

    p = sub.add_parser(
        "scst-sanity", parents=[common, toy], help="SCST reward improvement across seeds"
    )
    p.add_argument("--scenes", type=int, default=500)
    p.add_argument("--ce-steps", type=int, default=1000)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--init-from", help="CE checkpoint to start from instead of training one")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    set_quiet(args.quiet)
    try:
        reset_config()
        config = get_config(args.config, args.overrides)
        return COMMANDS[args.command](args, config)
    except NumericalError as e:
        print(f"ehatcap {args.command}: numerical error: {e}", file=sys.stderr)
        return 2
    except EhatError as e:
        print(f"ehatcap {args.command}: {e}", file=sys.stderr)
        return 1


def run_gen_corpus(argv: Optional[List[str]] = None) -> int:
    """Shortcut used by the gen_corpus entry script."""
    return main(["gen-corpus"] + list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
