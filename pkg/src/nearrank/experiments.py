"""Experiment drivers and the ``nearrank`` command line.

Subcommands::

    nearrank randmat  --dist gaussian --m 1000 --n 10,50,200,500,1000 --trials 100
    nearrank sweep    --dataset data/mnist --batch-sizes 128,1024,8192 --epochs 20
    nearrank switch   --dataset data/mnist --large-batch 8192 --small-batch 128 --switch-epoch 5
    nearrank diagnose activation.nrt --tth 1e-4,1e-5

Every command writes into ``--out`` (default: ``$NEARRANK_OUT`` or
``./nearrank-out``).  Data files (CSV and JSON reports) depend only on the
flags and seed, so reruns overwrite them with identical bytes; wall-clock
times and timestamps go to ``metadata.json``.  If any requested run fails,
the failures are listed in ``failures.json`` and the exit status is 1.

``--config FILE`` reads flat ``key = value`` lines (``#`` starts a comment).
Keys are the long option names without leading dashes (``batch-sizes`` and
``batch_sizes`` are equivalent).  Command-line flags override the file,
which overrides the defaults.
"""

import argparse
import datetime
import json
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor

from .data import load_mnist_dir, synthetic_dataset
from .diagnostics import DEFAULT_BATCH_CAP, RANK_LOSS_COLUMNS, near_rank_loss_many
from .nn.network import ARCHITECTURES, build_network
from .nn.train import TrainConfig, switch_batch_run, train_run
from .randmat import DISTRIBUTIONS, DistSpec, mp_edges, study, verify_prop2
from .reports import ReportEnvelope, atomic_write, csv_bytes, read_tensor, write_report

__all__ = [
    "OUT_ENV",
    "build_parser",
    "load_config",
    "load_dataset",
    "run_randmat",
    "run_sweep",
    "run_switch",
    "run_diagnose",
    "main",
]

OUT_ENV = "NEARRANK_OUT"
RANDMAT_COLUMNS = ("matrix_size", "m", "n", "trials", "mean_sigma_min", "std_sigma_min",
                   "mean_sigma_max", "std_sigma_max", "mp_lower", "mp_upper")
RESULT_COLUMNS = ("batch_size", "seed", "train_error", "test_error", "train_loss", "test_loss",
                  "diverged")
SWEEP_RANK_COLUMNS = ("batch_size", "seed", "t_th", "S_z_total")
SWITCH_COLUMNS = ("run", "schedule", "train_error", "test_error", "train_loss", "test_loss",
                  "t_th", "S_z_total")


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _modes(text):
    return "all" if str(text) == "all" else _int_list(text)


def load_config(path):
    """Parse a flat ``key = value`` file into a dict of strings."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------- datasets

def load_dataset(spec, train_size=None, test_size=None, seed=0):
    """``(train, test)`` from a directory of IDX files or ``synthetic``.

    ``synthetic`` gives 10 well-separated 28x28 classes, handy for smoke runs.
    """
    if spec == "synthetic":
        n_train = train_size or 1000
        n_test = test_size or 500
        full = synthetic_dataset(10, -(-(n_train + n_test) // 10), (28, 28, 1), 10.0, 0.1, seed)
        test = full.subset(n_test, offset=n_train)
        test.split = "test"
        return full.subset(n_train), test
    directory = spec
    train = load_mnist_dir(directory, "train")
    test = load_mnist_dir(directory, "test")
    if train_size:
        train = train.subset(train_size)
    if test_size:
        test = test.subset(test_size)
    return train, test


# ---------------------------------------------------------------- output helpers

def _output(out_dir):
    return out_dir if isinstance(out_dir, _Output) else _Output(out_dir)


class _Output:
    def __init__(self, out_dir):
        self.dir = str(out_dir)
        os.makedirs(out_dir, exist_ok=True)
        self.written = []

    def path(self, name):
        return os.path.join(self.dir, name)

    def write(self, name, data):
        atomic_write(self.path(name), data)
        self.written.append(name)

    def envelope(self, name, kind, payload, config, seed):
        self.write(name, write_report(ReportEnvelope(kind, payload, config, seed)))

    def finish(self, command, failures, started, config):
        meta = {"command": command, "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                "wall_clock_seconds": time.perf_counter() - started, "files": sorted(self.written),
                "config": config}
        atomic_write(self.path("metadata.json"), json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
        manifest = self.path("failures.json")
        if failures:
            atomic_write(manifest, json.dumps({"command": command, "failures": failures},
                                              indent=2, sort_keys=True) + "\n")
            return 1
        if os.path.exists(manifest):
            os.unlink(manifest)
        return 0


# ---------------------------------------------------------------- randmat

def run_randmat(dist, m, n_list, trials=100, seed=0, bins=50, out_dir=None, workers=1):
    """Monte-Carlo table of extreme singular values for each ``n`` at fixed ``m``.

    Returns ``(estimates, histograms, failures)``; writes
    ``randmat_<dist>_m<m>.csv``, ``..._hist.csv`` and ``....json`` when
    ``out_dir`` is given.
    """
    if not n_list:
        raise ValueError("need at least one n")
    for n in n_list:
        if n < 1 or n > m:
            raise ValueError(f"invalid dimensions {m} x {n}: need m >= n >= 1")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    spec = DistSpec(dist)
    estimates, hists, checks, failures = [], [], [], []
    for n in n_list:
        try:
            est, hist = study(spec, m, n, trials, seed, bins, workers)
        except Exception as exc:  # record and continue with the next size
            failures.append({"run": f"{dist} {m}x{n}", "error": repr(exc)})
            continue
        estimates.append(est)
        hists.append(hist)
        if dist == "gaussian":
            checks.append(verify_prop2(spec, m, n, trials, seed, estimate=est))
    if out_dir is not None:
        out = _output(out_dir)
        stem = f"randmat_{dist}_m{m}"
        rows = []
        for e in estimates:
            lo, hi = mp_edges(e.m, e.n)
            rows.append([f"{e.m} x {e.n}", e.m, e.n, e.trials, e.mean_sigma_min, e.std_sigma_min,
                         e.mean_sigma_max, e.std_sigma_max, lo, hi])
        out.write(stem + ".csv", csv_bytes(RANDMAT_COLUMNS, rows))
        hrows = [[h.n, h.edges[i], h.edges[i + 1], int(c)]
                 for h in hists for i, c in enumerate(h.counts)]
        out.write(stem + "_hist.csv", csv_bytes(("n", "bin_lo", "bin_hi", "count"), hrows))
        payload = {"estimates": estimates, "histograms": hists, "prop2": checks,
                   "failures": failures}
        config = {"dist": dist, "m": m, "n": list(n_list), "trials": trials, "bins": bins}
        out.envelope(stem + ".json", "randmat", payload, config, seed)
    return estimates, hists, failures


# ---------------------------------------------------------------- sweep

def _train_job(job):
    """Run one training job; module-level so worker processes can pickle it."""
    try:
        train, test = job["data"]
        net = build_network(job["arch"], input_shape=job["input_shape"], classes=job["classes"],
                            widths=job.get("widths"), activation=job["cfg"].activation,
                            batchnorm=job["cfg"].batchnorm, seed=job["init_seed"])
        if job.get("switch") is None:
            report = train_run(net, train, test, job["cfg"], job.get("metrics_path"))
        else:
            switch_epoch, small = job["switch"]
            report = switch_batch_run(net, train, test, job["cfg"], switch_epoch, small,
                                      job.get("metrics_path"))
        return {"name": job["name"], "report": report, "error": None}
    except Exception as exc:
        return {"name": job["name"], "report": None,
                "error": f"{exc!r}\n{traceback.format_exc()}"}


def _run_jobs(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]


def _input_shape(ds):
    h, w, c = ds.images.shape[1:]
    return (c, h, w)


def _tth_tag(t):
    return format(t, ".0e").replace("e-0", "e-")


def _write_run_files(out, name, report, thresholds):
    out.write(f"runs/{name}_metrics.csv", report.metrics_csv())
    if report.snapshots:
        snap = report.snapshots[-1]
        for t in thresholds:
            rows = [list(r) for r in snap.report_for(t).rows()]
            out.write(f"runs/{name}_rank_tth{_tth_tag(t)}.csv", csv_bytes(RANK_LOSS_COLUMNS, rows))


def run_sweep(train, test, batch_sizes, cfg, arch="lenet5", seeds=(0,), widths=None,
              out_dir=None, workers=1, init_seed=None):
    """Train one fresh network per (batch size, seed) and collect the reports.

    All runs with the same seed share the initial parameters (``init_seed``
    defaults to the run seed) and the data order.  Returns
    ``(results, failures)`` where ``results[(batch_size, seed)]`` is an
    :class:`~nearrank.nn.train.ExperimentReport`.
    """
    batch_sizes = list(batch_sizes)
    if not batch_sizes:
        raise ValueError("empty batch-size list")
    if any(b2 <= b1 for b1, b2 in zip(batch_sizes, batch_sizes[1:])):
        raise ValueError("batch sizes must be strictly increasing")
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    jobs = []
    for seed in seeds:
        for bs in batch_sizes:
            run_cfg = _replace(cfg, batch_size=bs, seed=seed)
            name = f"bs{bs}_seed{seed}"
            jobs.append({"name": name, "data": (train, test), "arch": arch,
                         "input_shape": _input_shape(train), "classes": train.classes,
                         "widths": widths, "cfg": run_cfg,
                         "init_seed": seed if init_seed is None else init_seed,
                         "metrics_path": None, "key": (bs, seed)})
    outcomes = _run_jobs(jobs, workers)
    results, failures = {}, []
    for job, res in zip(jobs, outcomes):
        if res["error"] is not None:
            failures.append({"run": res["name"], "error": res["error"]})
        else:
            if res["report"].diverged:
                failures.append({"run": res["name"], "error": "diverged (non-finite loss)"})
            results[job["key"]] = res["report"]
    if out_dir is not None:
        out = _output(out_dir)
        rows, rank_rows = [], []
        for (bs, seed), rep in sorted(results.items()):
            f = rep.final() if any(e.evaluated for e in rep.epochs) else None
            rows.append([bs, seed, f and f.train_error, f and f.test_error, f and f.train_loss,
                         f and f.test_loss, rep.diverged])
            for t in cfg.thresholds:
                if rep.snapshots:
                    rank_rows.append([bs, seed, t, rep.s_z_total(t)])
            _write_run_files(out, f"bs{bs}_seed{seed}", rep, cfg.thresholds)
        out.write("sweep_results.csv", csv_bytes(RESULT_COLUMNS, rows))
        out.write("sweep_rank.csv", csv_bytes(SWEEP_RANK_COLUMNS, rank_rows))
        payload = {"runs": [{"batch_size": bs, "seed": seed, "report": rep}
                            for (bs, seed), rep in sorted(results.items())],
                   "failures": failures}
        config = {"arch": arch, "batch_sizes": batch_sizes, "seeds": list(seeds),
                  "train": cfg.to_dict(), "widths": widths}
        out.envelope("sweep.json", "sweep", payload, config, list(seeds))
    return results, failures


def _replace(cfg, **kw):
    d = cfg.to_dict()
    d.update(kw)
    d["thresholds"] = tuple(d["thresholds"])
    if d["snapshot_epochs"] is not None:
        d["snapshot_epochs"] = tuple(d["snapshot_epochs"])
    return TrainConfig(**d)


# ---------------------------------------------------------------- switch

def run_switch(train, test, cfg, large_bs, small_bs, switch_epoch, arch="lenet5", widths=None,
               out_dir=None, workers=1, include_large=True):
    """Small-batch baseline, optional unswitched large-batch run, and the switched run.

    Returns ``(results, failures)`` keyed by ``"baseline"``, ``"large"`` and
    ``"switched"``.
    """
    if small_bs >= large_bs:
        raise ValueError("small batch size must be below the large batch size")
    if not 0 <= switch_epoch < cfg.epochs:
        raise ValueError("switch epoch must lie in [0, epochs)")
    common = {"data": (train, test), "arch": arch, "input_shape": _input_shape(train),
              "classes": train.classes, "widths": widths, "init_seed": cfg.seed,
              "metrics_path": None}
    jobs = [dict(common, name="baseline", cfg=_replace(cfg, batch_size=small_bs))]
    if include_large:
        jobs.append(dict(common, name="large", cfg=_replace(cfg, batch_size=large_bs)))
    jobs.append(dict(common, name="switched", cfg=_replace(cfg, batch_size=large_bs),
                     switch=(switch_epoch, small_bs)))
    outcomes = _run_jobs(jobs, workers)
    results, failures = {}, []
    for res in outcomes:
        if res["error"] is not None:
            failures.append({"run": res["name"], "error": res["error"]})
            continue
        if res["report"].diverged:
            failures.append({"run": res["name"], "error": "diverged (non-finite loss)"})
        results[res["name"]] = res["report"]
    if out_dir is not None:
        out = _output(out_dir)
        labels = {"baseline": f"{small_bs}", "large": f"{large_bs}",
                  "switched": f"{large_bs} -> {small_bs} @ epoch {switch_epoch}"}
        rows = []
        for name in ("baseline", "large", "switched"):
            rep = results.get(name)
            if rep is None:
                continue
            f = rep.final() if any(e.evaluated for e in rep.epochs) else None
            for t in cfg.thresholds:
                rows.append([name, labels[name], f and f.train_error, f and f.test_error,
                             f and f.train_loss, f and f.test_loss, t,
                             rep.s_z_total(t) if rep.snapshots else None])
            _write_run_files(out, name, rep, cfg.thresholds)
        out.write("switch_results.csv", csv_bytes(SWITCH_COLUMNS, rows))
        payload = {name: rep for name, rep in sorted(results.items())}
        payload["failures"] = failures
        config = {"arch": arch, "large_batch": large_bs, "small_batch": small_bs,
                  "switch_epoch": switch_epoch, "train": cfg.to_dict()}
        out.envelope("switch.json", "switch", payload, config, cfg.seed)
    return results, failures


# ---------------------------------------------------------------- diagnose

def run_diagnose(tensor_paths, thresholds, modes="all", batch_cap=DEFAULT_BATCH_CAP, seed=0,
                 out_dir=None):
    """Rank-loss reports for activations stored in tensor container files."""
    acts, ids = [], []
    for path in tensor_paths:
        with open(path, "rb") as fh:
            acts.append(read_tensor(fh.read()))
        ids.append(os.path.basename(path))
    reports = near_rank_loss_many(acts, thresholds, modes, batch_cap, seed, ids)
    if out_dir is not None:
        out = _output(out_dir)
        rows = [[r.threshold] + list(row) for r in reports for row in r.rows()]
        out.write("diagnose.csv", csv_bytes(("t_th",) + RANK_LOSS_COLUMNS, rows))
        out.write("diagnose_totals.csv",
                  csv_bytes(("t_th", "S_z_total"), [[r.threshold, r.s_z_total] for r in reports]))
        config = {"tensors": ids, "thresholds": list(thresholds), "modes": modes,
                  "batch_cap": batch_cap}
        out.envelope("diagnose.json", "rank_loss", {"reports": reports}, config, seed)
    return reports


# ---------------------------------------------------------------- command line

def _train_options(p):
    p.add_argument("--dataset", help="directory with MNIST-style IDX files, or 'synthetic'")
    p.add_argument("--train-size", type=int, default=10000,
                   help="use the first N training images (0 = all)")
    p.add_argument("--test-size", type=int, default=0, help="use the first N test images (0 = all)")
    p.add_argument("--arch", default="lenet5", choices=ARCHITECTURES)
    p.add_argument("--widths", type=_int_list, default=None, help="mlp widths, e.g. 784,256,10")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--activation", default="relu", choices=("relu", "linear"))
    p.add_argument("--batchnorm", type=_bool, default=True)
    p.add_argument("--lr-initial", type=float, default=0.1)
    p.add_argument("--lr-final", type=float, default=1e-4)
    p.add_argument("--schedule", default="cosine", choices=("cosine", "step", "constant"))
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--snapshot-mode", default="eval", choices=("eval", "train"))
    p.add_argument("--snapshot-cap", type=int, default=DEFAULT_BATCH_CAP)
    p.add_argument("--modes", type=_modes, default="all")
    p.add_argument("--tth", type=_float_list, default=[1e-4, 1e-5])


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./nearrank-out)")
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--workers", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="nearrank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("randmat", help="Monte-Carlo extreme singular values of random matrices")
    p.add_argument("--dist", default="gaussian", choices=DISTRIBUTIONS)
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--n", type=_int_list, default=[10, 50, 200, 500, 1000])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--bins", type=int, default=50)
    _common(p)

    p = sub.add_parser("sweep", help="train one network per batch size and count small singular values")
    p.add_argument("--batch-sizes", type=_int_list, default=[128, 512, 1024, 2048, 4096, 8192])
    p.add_argument("--seeds", type=_int_list, default=None,
                   help="one run per seed (default: just --seed)")
    _train_options(p)
    _common(p)

    p = sub.add_parser("switch", help="large-to-small batch switch against a small-batch baseline")
    p.add_argument("--large-batch", type=int, default=8192)
    p.add_argument("--small-batch", type=int, default=128)
    p.add_argument("--switch-epoch", type=int, default=5)
    _train_options(p)
    _common(p)

    p = sub.add_parser("diagnose", help="count small singular values of stored activations")
    p.add_argument("tensors", nargs="+", help="tensor container files (.nrt), one per layer")
    p.add_argument("--tth", type=_float_list, default=[1e-4, 1e-5])
    p.add_argument("--modes", type=_modes, default="all")
    p.add_argument("--batch-cap", type=int, default=DEFAULT_BATCH_CAP)
    _common(p)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with config-file values as defaults."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    values = load_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        if key not in actions or key in ("config", "help"):
            parser.error(f"unknown config key {key!r} for '{args.command}'")
        action = actions[key]
        try:
            defaults[key] = action.type(value) if action.type else value
        except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
            parser.error(f"config key {key!r}: {exc}")
        if action.choices is not None and defaults[key] not in action.choices:
            parser.error(f"config key {key!r}: {value!r} not in {list(action.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _train_config(args):
    return TrainConfig(
        epochs=args.epochs, momentum=args.momentum, lr_initial=args.lr_initial,
        lr_final=args.lr_final, schedule=args.schedule, weight_decay=args.weight_decay,
        batchnorm=args.batchnorm, activation=args.activation, seed=args.seed,
        thresholds=tuple(args.tth), snapshot_cap=args.snapshot_cap,
        snapshot_mode=args.snapshot_mode, rank_modes=args.modes, eval_every=args.eval_every)


def _config_echo(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != "out"}


def main(argv=None):
    parser = build_parser()
    args = _apply_config(parser, argv)
    out_dir = args.out or os.environ.get(OUT_ENV) or "nearrank-out"
    started = time.perf_counter()
    out = _Output(out_dir)
    try:
        if args.command == "randmat":
            _, _, failures = run_randmat(args.dist, args.m, args.n, args.trials, args.seed,
                                         args.bins, out, args.workers)
        elif args.command == "diagnose":
            run_diagnose(args.tensors, args.tth, args.modes, args.batch_cap, args.seed, out)
            failures = []
        else:
            if not args.dataset:
                parser.error("--dataset is required")
            train, test = load_dataset(args.dataset, args.train_size or None,
                                       args.test_size or None, args.seed)
            cfg = _train_config(args)
            if args.command == "sweep":
                if not args.batch_sizes:
                    parser.error("--batch-sizes must not be empty")
                if any(b <= a for a, b in zip(args.batch_sizes, args.batch_sizes[1:])):
                    parser.error("--batch-sizes must be strictly increasing")
                seeds = args.seeds or [args.seed]
                _, failures = run_sweep(train, test, args.batch_sizes, cfg, args.arch, seeds,
                                        args.widths, out, args.workers)
            else:
                if args.small_batch >= args.large_batch:
                    parser.error("--small-batch must be smaller than --large-batch")
                _, failures = run_switch(train, test, cfg, args.large_batch, args.small_batch,
                                         args.switch_epoch, args.arch, args.widths, out,
                                         args.workers)
    except (ValueError, OSError) as exc:
        print(f"nearrank {args.command}: error: {exc}", file=sys.stderr)
        return out.finish(args.command, [{"run": args.command, "error": repr(exc)}], started,
                          _config_echo(args))
    status = out.finish(args.command, failures, started, _config_echo(args))
    for f in failures:
        print(f"nearrank {args.command}: run {f['run']} failed: {f['error'].splitlines()[0]}",
              file=sys.stderr)
    return status
