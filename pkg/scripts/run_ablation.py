"""Ablation table on the shipped biased spec (full model and its five switch-offs).

    python3 scripts/run_ablation.py --out runs/ablation --seeds 0 1 2 --epochs 15
"""
import argparse
import logging
from dataclasses import replace

from ivgdcl import default_spec_path
from ivgdcl.ablation import ABLATIONS, run_variants, write_table
from ivgdcl.model import ModelConfig
from ivgdcl.synthgen import BiasSpec, bias_report, format_bias_report, generate_dataset
from ivgdcl.trainer import TrainConfig
from ivgdcl.vocab import build_vocab


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--spec", default=str(default_spec_path()))
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--variants", nargs="+", default=list(ABLATIONS),
                    help="subset of ablation rows to run")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = BiasSpec.load(args.spec)
    train_m, test_m = generate_dataset(spec)
    print("test split co-occurrence:\n" + format_bias_report(bias_report(test_m)))
    vocab = build_vocab([ex.query.raw_text for ex in train_m])
    base = TrainConfig(epochs=args.epochs, model=ModelConfig(d=args.d, heads=args.heads))
    variants = {k: ABLATIONS[k] for k in args.variants}
    results = run_variants(train_m, test_m, vocab, base, variants, args.seeds, args.out)
    json_path, csv_path = write_table(results, args.out, "ablation")
    print(csv_path.read_text())
    for r in results:
        print(r.name, {s: round(rep.mean_iou, 2) for s, rep in r.per_seed.items()})


if __name__ == "__main__":
    main()
