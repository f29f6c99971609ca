"""Train LeNet-5 at several batch sizes and tabulate loss, error and S_z_total.

Uses the bundled MNIST files when present (first --train-size images), the
synthetic blobs otherwise.  A 10k-image, 20-epoch sweep over three batch
sizes takes a few minutes per run on one CPU core.

    python demos/batch_size_sweep.py --batch-sizes 128,1024,8192 --epochs 20
    python demos/batch_size_sweep.py --activation linear
"""

import argparse
import os

from nearrank.experiments import load_dataset, run_sweep
from nearrank.nn import TrainConfig

MNIST_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "data", "mnist")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch-sizes", default="128,1024,8192")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--train-size", type=int, default=10000)
    p.add_argument("--activation", default="relu", choices=("relu", "linear"))
    p.add_argument("--no-batchnorm", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    spec = MNIST_DIR if os.path.isdir(MNIST_DIR) else "synthetic"
    train, test = load_dataset(spec, args.train_size, None, args.seed)
    cfg = TrainConfig(epochs=args.epochs, activation=args.activation,
                      batchnorm=not args.no_batchnorm, seed=args.seed, eval_every=0)
    sizes = [int(v) for v in args.batch_sizes.split(",")]
    results, failures = run_sweep(train, test, sizes, cfg, "lenet5", (args.seed,))

    print(f"data: {train.provenance} ({len(train)} train / {len(test)} test)")
    print(f"{'batch':>6} {'train err':>10} {'test err':>9} {'train loss':>11} {'test loss':>10} "
          f"{'S_z 1e-4':>9} {'S_z 1e-5':>9}")
    for (bs, _), rep in sorted(results.items()):
        f = rep.final()
        print(f"{bs:>6} {f.train_error:9.2f}% {f.test_error:8.2f}% {f.train_loss:11.4f} "
              f"{f.test_loss:10.4f} {rep.s_z_total(1e-4):9d} {rep.s_z_total(1e-5):9d}")
    for fail in failures:
        print(f"failed: {fail['run']}: {fail['error'].splitlines()[0]}")


if __name__ == "__main__":
    main()
