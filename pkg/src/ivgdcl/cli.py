"""Command-line entry point: ``ivgdcl <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import default_spec_path
from .ablation import ABLATIONS, run_variants, sensitivity_variants, write_table
from .datamodel import load_dataset, save_dataset
from .synthgen import BiasSpec, bias_report, format_bias_report, generate_dataset
from .trainer import TrainConfig, TrainingAborted, evaluate_checkpoint, train
from .vocab import ConfounderVocab, build_vocab, load_svo_jsonl, vocab_from_tuples

log = logging.getLogger("ivgdcl")


class UsageError(Exception):
    pass


def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    return path


def _load_manifest(path):
    manifest = load_dataset(_require_file(path))
    if not len(manifest):
        raise UsageError(f"manifest {path} has no examples")
    return manifest


def _train_config(args) -> TrainConfig:
    cfg = {}
    if getattr(args, "config", None):
        cfg = json.loads(_require_file(args.config).read_text())
    try:
        config = TrainConfig.from_dict(cfg)
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}")
    overrides = {}
    for name in ("alpha", "beta", "seed", "epochs", "lr", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "no_ivg", False):
        overrides["use_ivg"] = False
    if getattr(args, "no_qv_cl", False):
        overrides["use_qv_cl"] = False
    if getattr(args, "no_vv_cl", False):
        overrides["use_vv_cl"] = False
    return replace(config, **overrides)


def _load_vocab(path, config: TrainConfig):
    if path is None:
        if config.use_ivg:
            raise UsageError("--vocab is required unless --no-ivg is given")
        return None
    return ConfounderVocab.load(_require_file(path))


def cmd_generate_data(args) -> int:
    spec = BiasSpec.load(_require_file(args.spec))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    out = Path(args.out)
    train_m, test_m = generate_dataset(spec)
    save_dataset(train_m, out / "train.manifest.json")
    save_dataset(test_m, out / "test.manifest.json")
    print(f"train split ({len(train_m)} examples):")
    print(format_bias_report(bias_report(train_m)))
    print(f"\ntest split ({len(test_m)} examples):")
    print(format_bias_report(bias_report(test_m)))
    return 0


def cmd_build_vocab(args) -> int:
    if args.svo_jsonl:
        vocab = vocab_from_tuples(load_svo_jsonl(_require_file(args.svo_jsonl)))
    else:
        manifest = _load_manifest(args.data)
        vocab = build_vocab([ex.query.raw_text for ex in manifest])
    vocab.save(args.out)
    for s in ("role", "action", "object"):
        pri = vocab.priors(s)
        print(f"{s}: " + ", ".join(f"{z}={p:.5f}" for z, p in pri.items()))
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    manifest = _load_manifest(args.data)
    vocab = _load_vocab(args.vocab, config)
    eval_manifest = _load_manifest(args.eval_data) if args.eval_data else None
    out = Path(args.out)
    res = train(manifest, vocab, config, out_dir=out, eval_manifest=eval_manifest,
                on_epoch=lambda e: print(json.dumps({k: v for k, v in e.items()}), flush=True))
    print(f"checkpoint: {res.checkpoint}  config_sha256: {config.sha256()}")
    return 0


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.data)
    ckpt = Path(args.checkpoint)
    if not (ckpt / "meta.json").is_file():
        raise UsageError(f"{ckpt} is not a checkpoint directory")
    report = evaluate_checkpoint(ckpt, manifest, args.vocab)
    meta = json.loads((ckpt / "meta.json").read_text())
    payload = report.to_dict() | {"checkpoint": str(ckpt),
                                  "config_sha256": meta.get("config_sha256")}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    config = _train_config(args)
    train_m = _load_manifest(args.data)
    test_m = _load_manifest(args.test_data)
    variants = sensitivity_variants() if args.sweep_alpha_beta else ABLATIONS
    needs_vocab = any(replace(config, **v).use_ivg for v in variants.values())
    vocab = _load_vocab(args.vocab, config) if needs_vocab else None
    results = run_variants(train_m, test_m, vocab, config, variants, args.seeds, args.out)
    stem = "sensitivity" if args.sweep_alpha_beta else "ablation"
    json_path, csv_path = write_table(results, args.out, stem)
    print(csv_path.read_text(), end="")
    print(f"wrote {json_path} and {csv_path}")
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--alpha", type=float, help="QV-CL weight (default 0.1)")
    p.add_argument("--beta", type=float, help="VV-CL weight (default 0.01)")
    p.add_argument("--no-ivg", action="store_true", help="disable the backdoor adjustment")
    p.add_argument("--no-qv-cl", action="store_true", help="disable the query-video loss")
    p.add_argument("--no-vv-cl", action="store_true", help="disable the video-video loss")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivgdcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic biased train/test pair")
    p.add_argument("--spec", default=str(default_spec_path()))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("build-vocab", help="confounder vocabularies from manifest queries")
    p.add_argument("--data", help="manifest whose queries are used as captions")
    p.add_argument("--svo-jsonl", help="externally extracted (subject, verb, object) records")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train")
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--eval-data")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", help="check the checkpoint's vocabulary against this file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="ablation table, or the alpha/beta sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--sweep-alpha-beta", action="store_true",
                   help="run the five (alpha, beta) pairs instead of the ablation rows")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "build-vocab" and not (args.data or args.svo_jsonl):
        parser.error("build-vocab needs --data or --svo-jsonl")
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError) as exc:  # config, format, checkpoint, io
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, RuntimeError, ArithmeticError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
