"""Loss-weight sweep over the five (alpha, beta) pairs on the shipped spec."""
import argparse
import logging

from ivgdcl import default_spec_path
from ivgdcl.ablation import run_variants, sensitivity_variants, write_table
from ivgdcl.model import ModelConfig
from ivgdcl.synthgen import BiasSpec, generate_dataset
from ivgdcl.trainer import TrainConfig
from ivgdcl.vocab import build_vocab


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--spec", default=str(default_spec_path()))
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--d", type=int, default=64)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train_m, test_m = generate_dataset(BiasSpec.load(args.spec))
    vocab = build_vocab([ex.query.raw_text for ex in train_m])
    base = TrainConfig(epochs=args.epochs, model=ModelConfig(d=args.d, heads=4))
    results = run_variants(train_m, test_m, vocab, base, sensitivity_variants(),
                           args.seeds, args.out)
    _, csv_path = write_table(results, args.out, "sensitivity")
    print(csv_path.read_text())


if __name__ == "__main__":
    main()
