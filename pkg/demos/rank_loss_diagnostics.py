"""Per-layer small-singular-value counts of a small CNN before and after training.

Trains LeNet-5 briefly on synthetic blobs (or MNIST with --mnist DIR), then
captures the hidden activations of one batch and counts, per layer and per
mode unfolding, the singular values below each threshold.

    python demos/rank_loss_diagnostics.py --epochs 3 --batch-size 256
"""

import argparse

from nearrank.data import load_mnist_dir, synthetic_dataset
from nearrank.diagnostics import near_rank_loss_many
from nearrank.nn import TrainConfig, build_network, forward, train_run


def report(net, images, thresholds, title):
    _, acts = forward(net, images, capture=True)
    print(f"\n{title}")
    for rep in near_rank_loss_many(acts, thresholds):
        print(f"  t_th={rep.threshold:g}  S_z_total={rep.s_z_total}")
        for lay in rep.per_layer:
            modes = " ".join(f"{m.mode}:{m.s_z}/{m.examined}" for m in lay.modes)
            print(f"    {lay.layer:<8} shape={lay.shape}  {modes}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--mnist", default=None, help="directory with MNIST IDX files")
    p.add_argument("--train-size", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--probe", type=int, default=256, help="samples used for the diagnostics")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    if args.mnist:
        train = load_mnist_dir(args.mnist, "train").subset(args.train_size)
    else:
        train = synthetic_dataset(10, args.train_size // 10, (28, 28, 1), 10.0, 0.1, args.seed)
    net = build_network("lenet5", seed=args.seed)
    probe = train.images[:args.probe]
    thresholds = (1e-4, 1e-5)

    report(net, probe, thresholds, "at initialisation")
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, eval_every=0,
                      snapshot_epochs=())
    rep = train_run(net, train, train, cfg)
    f = rep.final()
    print(f"\ntrained {args.epochs} epochs: train loss {f.train_loss:.4f}, train error {f.train_error:.2f}%")
    report(net, probe, thresholds, "after training")


if __name__ == "__main__":
    main()
