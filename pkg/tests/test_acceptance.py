"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N PASS|FAIL|SKIP`` line (collected
again in the terminal summary).  Heavy Monte-Carlo studies and training
runs are cached per session and shared between criteria.

Environment:
    NEARRANK_FULL=1          also run the full-MNIST 60-epoch spot check
    NEARRANK_TEST_WORKERS=k  worker processes for the training sweeps
"""

import functools
import math
import os

import numpy as np
import pytest

from nearrank.data import Dataset, load_idx, load_mnist_dir, synthetic_dataset, write_idx
from nearrank.diagnostics import check_perturbation_inequality, eq4_bound, near_rank_loss
from nearrank.experiments import main, run_sweep
from nearrank.nn import (
    Activation,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2D,
    Network,
    ResidualBlock,
    TrainConfig,
    build_network,
    gradient_check,
    switch_batch_run,
    train_run,
)
from nearrank.randmat import expected_extreme_sv, verify_prop2
from nearrank.reports import ReportEnvelope, read_report, write_report, write_tensor
from nearrank.svd import hosvd_mode_spectra, singular_values
from oracles import fiber_unfold, fsum_frobenius, gram_extreme_sv, gram_singular_values

pytestmark = pytest.mark.slow

MNIST_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "data", "mnist")
HAVE_MNIST = os.path.exists(os.path.join(MNIST_DIR, "train-labels-idx1-ubyte.gz"))
WORKERS = int(os.environ.get("NEARRANK_TEST_WORKERS", "1"))

# published expected minimum singular values, tall cases
GAUSSIAN_M1000 = {10: 29.9333, 50: 24.9032, 200: 17.6944, 500: 9.3842}
GAUSSIAN_SQUARE_1000 = 0.0214
UNIFORM_M1000 = {10: 8.4324, 50: 7.2078, 200: 5.1265, 500: 2.7250}
LOGNORMAL = {1000: {10: 56.1322, 50: 48.7673, 200: 36.0231, 500: 19.4127},
             2000: {10: 84.1329, 500: 47.0961, 1000: 27.8701, 1500: 12.8825}}
LOGNORMAL_M4000 = (50, 500, 2000, 3000)

SWEEP_SIZES = (128, 1024, 8192)
SWEEP_SEEDS = (0, 1, 2)
VARIANTS = {"relu+bn": ("relu", True), "linear+bn": ("linear", True), "relu-bn": ("relu", False)}


@functools.lru_cache(maxsize=None)
def estimate(dist, m, n, trials=100, seed=0):
    return expected_extreme_sv(dist, m, n, trials=trials, seed=seed)


def rel(a, b):
    return abs(a - b) / abs(b)


# ---------------------------------------------------------------- random matrices

def test_c01_gaussian_table(criterion):
    bad, parts = [], []
    for n, paper in GAUSSIAN_M1000.items():
        got = estimate("gaussian", 1000, n).mean_sigma_min
        parts.append(f"{n}:{got:.4f}/{paper}")
        if rel(got, paper) > 0.10:
            bad.append(n)
    sq = estimate("gaussian", 1000, 1000).mean_sigma_min
    parts.append(f"1000:{sq:.4f}/{GAUSSIAN_SQUARE_1000}")
    if not GAUSSIAN_SQUARE_1000 / 2 <= sq <= GAUSSIAN_SQUARE_1000 * 2:
        bad.append(1000)
    criterion(1, "gaussian m=1000 E sigma_min", not bad, " ".join(parts))
    assert not bad, f"out of tolerance for n={bad}"


def _lognormal_sampler(rng, shape):
    return np.exp(rng.standard_normal(shape))


def test_c02_uniform_lognormal_tables(criterion):
    bad, parts = [], []
    for n, paper in UNIFORM_M1000.items():
        got = estimate("uniform", 1000, n).mean_sigma_min
        parts.append(f"U1000x{n}:{got:.3f}/{paper}")
        if rel(got, paper) > 0.12:
            bad.append(f"uniform 1000x{n}")
    for m, row in LOGNORMAL.items():
        for n, paper in row.items():
            got = estimate("lognormal", m, n).mean_sigma_min
            parts.append(f"L{m}x{n}:{got:.3f}/{paper}")
            if rel(got, paper) > 0.15:
                bad.append(f"lognormal {m}x{n}")
    # m = 4000 against an independent Gram-eigenvalue Monte Carlo
    oracle_rng = np.random.default_rng(20240101)
    for n in LOGNORMAL_M4000:
        est = estimate("lognormal", 4000, n, trials=20)
        o_mean, o_se, _, _ = gram_extreme_sv(_lognormal_sampler, 4000, n, 10, oracle_rng)
        tol = 4 * math.hypot(est.se_sigma_min, o_se)
        parts.append(f"L4000x{n}:{est.mean_sigma_min:.3f}/oracle {o_mean:.3f}+-{tol:.3f}")
        if abs(est.mean_sigma_min - o_mean) > tol:
            bad.append(f"lognormal 4000x{n}")
    criterion(2, "uniform/lognormal E sigma_min", not bad, " ".join(parts))
    assert not bad, f"out of tolerance: {bad}"


def test_c03_prop2_inequality(criterion):
    bad, parts = [], []
    for m, n in ((1000, 10), (1000, 500), (2000, 1000), (4000, 2000)):
        chk = verify_prop2("gaussian", m, n, trials=100, seed=0, estimate=estimate("gaussian", m, n))
        parts.append(f"{m}x{n}:[{chk.lower:.2f}<={chk.mean_sigma_min:.2f}, "
                     f"{chk.mean_sigma_max:.2f}<={chk.upper:.2f}]")
        if not chk.holds:
            bad.append((m, n))
    criterion(3, "expected extreme values inside sqrt(m)+-sqrt(n)", not bad, " ".join(parts))
    assert not bad


def test_c04_monotone_in_n(criterion):
    bad, parts = [], []
    ns = (10, 50, 200, 500, 1000)
    for dist in ("gaussian", "uniform", "lognormal"):
        ests = [estimate(dist, 1000, n) for n in ns]
        margins = []
        for a, b in zip(ests, ests[1:]):
            se = math.hypot(a.se_sigma_min, b.se_sigma_min)
            margins.append((a.mean_sigma_min - b.mean_sigma_min) / se)
        parts.append(f"{dist}: min decrement {min(margins):.1f} SE")
        if min(margins) <= 3:
            bad.append(dist)
    criterion(4, "E sigma_min decreasing in n by > 3 SE", not bad, "; ".join(parts))
    assert not bad


# ---------------------------------------------------------------- linear algebra

def test_c05_svd_oracle_equivalence(criterion):
    rng = np.random.default_rng(5)
    worst_mat = worst_ten = worst_hosvd = 0.0
    for _ in range(200):
        m, n = rng.integers(1, 65, size=2)
        a = rng.standard_normal((m, n))
        oracle = gram_singular_values(a)
        for method in ("lapack", "jacobi"):
            worst_mat = max(worst_mat, np.max(np.abs(singular_values(a, method) - oracle)))
        s0, s1 = hosvd_mode_spectra(a)
        s = singular_values(a)
        worst_hosvd = max(worst_hosvd, np.max(np.abs(s0 - s)), np.max(np.abs(s1 - s)))
    for i in range(50):
        order = 3 + i % 2
        t = rng.standard_normal(tuple(rng.integers(1, 13, size=order)))
        for k, s in enumerate(hosvd_mode_spectra(t)):
            worst_ten = max(worst_ten, np.max(np.abs(s - gram_singular_values(fiber_unfold(t, k)))))
    ok = worst_mat <= 1e-9 and worst_ten <= 1e-9 and worst_hosvd <= 1e-12
    criterion(5, "SVD/HOSVD vs Gram oracle", ok,
              f"matrices {worst_mat:.1e}, tensors {worst_ten:.1e}, order-2 HOSVD {worst_hosvd:.1e}")
    assert ok


def _orthonormal(rng, rows, cols):
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


def _planted_matrix(rng):
    """Features x batch matrix with dead (zero) units and duplicated samples."""
    rows, cols = (int(v) for v in rng.integers(2, 13, size=2))
    zero_rows = int(rng.integers(0, rows))
    dup_cols = int(rng.integers(0, cols))
    live_r, live_c = rows - zero_rows, cols - dup_cols
    r = int(rng.integers(1, min(live_r, live_c) + 1))
    base = (_orthonormal(rng, live_r, r) * rng.uniform(1, 3, r)) @ _orthonormal(rng, live_c, r).T
    a = np.zeros((rows, live_c))
    a[np.sort(rng.permutation(rows)[:live_r])] = base
    a = np.hstack([a, a[:, rng.integers(0, live_c, dup_cols)]])[:, rng.permutation(cols)]
    return a, min(rows, cols) - r


def _planted_tensor(rng):
    """Order-4 activation with known mode ranks; zeroed channels and duplicated samples."""
    while True:
        dims = [int(d) for d in rng.integers(2, 6, size=4)]
        ranks = [int(rng.integers(1, d + 1)) for d in dims]
        if all(ranks[k] <= math.prod(ranks) // ranks[k] for k in range(4)):
            break
    while True:
        core = 5 * rng.standard_normal(ranks)
        # keep every core unfolding well away from singular
        if all(gram_singular_values(fiber_unfold(core, k))[-1] > 0.5 for k in range(4)):
            break
    factors = []
    for k, (d, r) in enumerate(zip(dims, ranks)):
        if k == 3:
            # duplicated samples along the batch mode
            distinct = int(rng.integers(r, d + 1))
            u = _orthonormal(rng, distinct, r)
            u = np.vstack([u, u[rng.integers(0, distinct, d - distinct)]])
        else:
            # zeroed fibers along feature modes
            live = int(rng.integers(r, d + 1))
            u = np.zeros((d, r))
            u[np.sort(rng.permutation(d)[:live])] = _orthonormal(rng, live, r)
        factors.append(u[rng.permutation(d)])
    t = np.einsum("abcd,ia,jb,kc,ld->ijkl", core, *factors)
    planted = sum(min(dims[k], math.prod(dims) // dims[k]) - ranks[k] for k in range(4))
    return t, planted


def test_c06_planted_rank_loss(criterion):
    rng = np.random.default_rng(6)
    mismatches, non_monotone, total_planted = 0, 0, 0
    for _ in range(100):
        layers, planted = [], []
        for _ in range(int(rng.integers(1, 5))):
            act, count = _planted_tensor(rng) if rng.random() < 0.5 else _planted_matrix(rng)
            layers.append(act)
            planted.append(count)
        rep = near_rank_loss(layers, 1e-4)
        total_planted += sum(planted)
        if [lay.s_z for lay in rep.per_layer] != planted or rep.s_z_total != sum(planted):
            mismatches += 1
        if near_rank_loss(layers, 1e-5).s_z_total > rep.s_z_total:
            non_monotone += 1
    ok = mismatches == 0 and non_monotone == 0
    criterion(6, "near-rank-loss counts on planted deficiencies", ok,
              f"{mismatches} count mismatches, {non_monotone} threshold violations, "
              f"{total_planted} planted values over 100 sets")
    assert ok


def test_c07_perturbation_suite(criterion):
    rng = np.random.default_rng(7)
    violations, worst_eq4 = 0, 0.0
    for _ in range(1000):
        theta = (_orthonormal(rng, 5, 5) * rng.uniform(1, 3, 5)) @ _orthonormal(rng, 5, 5)
        x = (_orthonormal(rng, 5, 5) * rng.uniform(1, 3, 5)) @ _orthonormal(rng, 5, 5)
        dx = 10.0 ** rng.uniform(-8, -1) * rng.standard_normal((5, 5))
        chk = check_perturbation_inequality(theta, x, dx)
        if chk.lhs > chk.bound + 1e-12:
            violations += 1
        oracle = fsum_frobenius(dx) * math.fsum(1.0 / s for s in gram_singular_values(x))
        worst_eq4 = max(worst_eq4, abs(eq4_bound(x, dx) - oracle))
    ok = violations == 0 and worst_eq4 <= 1e-9
    criterion(7, "perturbation inequality on 1000 instances", ok,
              f"{violations} violations, eq4 max deviation {worst_eq4:.1e}")
    assert ok


def _labels(n, classes, seed):
    return np.random.default_rng(seed).integers(0, classes, n)


def test_c08_gradient_check(criterion):
    r = np.random.default_rng(8)
    nets = {
        "conv+bn+pool+dense": Network(
            [Conv2D(1, 3, 3, rng=r), BatchNorm(3), Activation("relu"), MaxPool2D(2),
             Flatten(), Dense(12, 6, rng=r), BatchNorm(6), Activation("linear"),
             Dense(6, 4, bias=True, rng=r)], (1, 6, 6), 4, "custom", 0),
        # biased conv without batch norm (a bias right before batch norm has zero gradient)
        "biased conv": Network(
            [Conv2D(1, 2, 3, bias=True, rng=r), Activation("relu"), Flatten(),
             Dense(32, 3, rng=r)], (1, 6, 6), 3, "custom", 0),
        "residual+avgpool": Network(
            [Conv2D(1, 2, 3, stride=2, padding=1, rng=r), ResidualBlock(2, 2, 1, True, "relu", r),
             ResidualBlock(2, 4, 2, False, "relu", r), GlobalAvgPool(), Dense(4, 3, rng=r)],
            (1, 8, 8), 3, "custom", 0),
        "mlp": build_network("mlp", input_shape=(1, 4, 4), widths=[16, 12, 8, 5], seed=1),
    }
    for bn in nets["conv+bn+pool+dense"].batchnorm_layers():
        bn.params["gamma"] = r.uniform(0.5, 1.5, bn.features)
        bn.params["beta"] = r.uniform(-0.5, 0.5, bn.features)
    worst, kinds, sizes = {}, set(), {}
    for name, net in nets.items():
        for layer in net.all_layers():
            kinds.add(type(layer).__name__ + (f"({layer.fn})" if isinstance(layer, Activation) else ""))
        sizes[name] = net.n_params()
        batch = np.random.default_rng(1).standard_normal((6,) + net.input_shape)
        rep = gradient_check(net, batch, _labels(6, net.classes, 2), weight_decay=5e-4)
        worst[name] = rep.max_rel_error
    ok = max(worst.values()) <= 1e-5 and max(sizes.values()) <= 5000
    detail = ", ".join(f"{k} ({sizes[k]} params) {v:.1e}" for k, v in worst.items())
    criterion(8, "finite-difference gradients", ok, f"{detail}; layer kinds {sorted(kinds)}")
    assert ok


# ---------------------------------------------------------------- training

@pytest.fixture(scope="session")
def mnist_subset():
    if not HAVE_MNIST:
        return None
    return load_mnist_dir(MNIST_DIR, "train").subset(10000), load_mnist_dir(MNIST_DIR, "test")


def desk_config(activation="relu", batchnorm=True):
    return TrainConfig(epochs=20, activation=activation, batchnorm=batchnorm, eval_every=0)


@pytest.fixture(scope="session")
def sweeps(mnist_subset):
    if mnist_subset is None:
        return None
    train, test = mnist_subset
    out = {}
    for variant, (act, bn) in VARIANTS.items():
        results, _ = run_sweep(train, test, SWEEP_SIZES, desk_config(act, bn), "lenet5",
                               SWEEP_SEEDS, workers=WORKERS)
        out[variant] = results
    return out


def _final_loss(rep):
    return rep.final().train_loss if not rep.diverged else math.nan


def test_c09_batch_size_direction(criterion, sweeps):
    if sweeps is None:
        criterion(9, "batch-size direction", "SKIP", "MNIST files not present")
        pytest.skip("MNIST files not present")
    bad, parts = [], []
    for variant, results in sweeps.items():
        med_loss = [float(np.median([_final_loss(results[(bs, s)]) for s in SWEEP_SEEDS]))
                    for bs in SWEEP_SIZES]
        med_sz = [float(np.median([results[(bs, s)].s_z_total(1e-4) for s in SWEEP_SEEDS]))
                  for bs in SWEEP_SIZES]
        loss_ok = all(b > a for a, b in zip(med_loss, med_loss[1:]))
        sz_ok = all(b >= a for a, b in zip(med_sz, med_sz[1:]))
        parts.append(f"{variant} loss {[round(v, 4) for v in med_loss]} S_z {[f'{v:g}' for v in med_sz]}")
        if not loss_ok:
            bad.append(f"{variant} train loss")
        if not sz_ok:
            bad.append(f"{variant} S_z")
    criterion(9, "median train loss and S_z(1e-4) vs batch size", not bad,
              "; ".join(parts) + (f"; failing: {bad}" if bad else ""))
    assert not bad, f"direction not reproduced: {bad}"


@pytest.mark.skipif(os.environ.get("NEARRANK_FULL") != "1", reason="set NEARRANK_FULL=1 (hours of CPU)")
def test_c10_full_mnist_spot_check(criterion):
    train, test = load_mnist_dir(MNIST_DIR, "train"), load_mnist_dir(MNIST_DIR, "test")
    finals = {}
    for bs in (128, 8192):
        cfg = TrainConfig(batch_size=bs, epochs=60, eval_every=0)
        finals[bs] = train_run(build_network("lenet5", seed=0), train, test, cfg).final()
    small, large = finals[128], finals[8192]
    checks = {"bs128 test error <= 0.7%": small.test_error <= 0.7,
              "bs128 train loss within 30% of 0.0156": rel(small.train_loss, 0.0156) <= 0.30,
              "bs8192 loss >= 5x bs128": large.train_loss >= 5 * small.train_loss,
              "test error gap >= 0.3 pp": large.test_error - small.test_error >= 0.3}
    ok = all(checks.values())
    criterion(10, "full MNIST 60 epochs", ok,
              f"bs128 loss {small.train_loss:.4f} err {small.test_error:.2f}%, bs8192 loss "
              f"{large.train_loss:.4f} err {large.test_error:.2f}%; failing "
              f"{[k for k, v in checks.items() if not v]}")
    assert ok


def test_c10_skipped_line(criterion):
    if os.environ.get("NEARRANK_FULL") == "1":
        pytest.skip("full run requested")
    criterion(10, "full MNIST 60 epochs", "SKIP", "long-running; set NEARRANK_FULL=1")


def test_c11_batch_switch(criterion, mnist_subset, sweeps):
    if sweeps is None:
        criterion(11, "batch switch", "SKIP", "MNIST files not present")
        pytest.skip("MNIST files not present")
    train, test = mnist_subset
    baseline = sweeps["relu+bn"][(128, 0)]
    large = sweeps["relu+bn"][(8192, 0)]
    cfg = TrainConfig(batch_size=8192, epochs=20, eval_every=0)
    switched = switch_batch_run(build_network("lenet5", seed=0), train, test, cfg, 5, 128)
    degenerate = switch_batch_run(build_network("lenet5", seed=0), train, test, cfg, 0, 128)
    b, lg, sw = (_final_loss(r) for r in (baseline, large, switched))
    identical = (degenerate.metrics_csv() == baseline.metrics_csv()
                 and [s.to_dict() for s in degenerate.snapshots] == [s.to_dict() for s in baseline.snapshots])
    checks = {"within 15% of baseline": rel(sw, b) <= 0.15, "below unswitched": sw < lg,
              "switch at 0 identical": identical}
    ok = all(checks.values())
    criterion(11, "8192 -> 128 at epoch 5", ok,
              f"baseline {b:.5f}, switched {sw:.5f} ({100 * (sw - b) / b:+.1f}%), unswitched {lg:.5f}, "
              f"switch@0 identical {identical}" + (f"; failing {[k for k, v in checks.items() if not v]}"
                                                  if not ok else ""))
    assert ok


# ---------------------------------------------------------------- determinism

def _data_files(out):
    found = {}
    for root, _, names in os.walk(out):
        for name in names:
            if name != "metadata.json":
                with open(os.path.join(root, name), "rb") as fh:
                    found[os.path.relpath(os.path.join(root, name), out)] = fh.read()
    return found


def test_c12_determinism_and_round_trips(criterion, tmp_path):
    (tmp_path / "act.nrt").write_bytes(write_tensor(np.random.default_rng(0).standard_normal((3, 4, 2, 5))))
    train_flags = ["--dataset", "synthetic", "--arch", "mlp", "--widths", "784,16,10",
                   "--train-size", "200", "--test-size", "100", "--epochs", "2"]
    commands = {
        "randmat": ["randmat", "--dist", "lognormal", "--m", "50", "--n", "5,50", "--trials", "4"],
        "sweep": ["sweep", "--batch-sizes", "8,32", *train_flags],
        "switch": ["switch", "--large-batch", "32", "--small-batch", "8", "--switch-epoch", "1",
                   *train_flags],
        "diagnose": ["diagnose", str(tmp_path / "act.nrt")],
    }
    failing = []
    for name, argv in commands.items():
        runs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            assert main(argv + ["--seed", "3", "--out", str(out)]) == 0
            runs.append(_data_files(out))
        if runs[0] != runs[1] or not runs[0]:
            failing.append(name)
        for fname, data in runs[0].items():
            if fname.endswith(".json") and write_report(read_report(data)) != data:
                failing.append(f"{name}:{fname} report round-trip")

    if HAVE_MNIST:
        ds = load_mnist_dir(MNIST_DIR, "test").subset(500)
    else:
        synth = synthetic_dataset(10, 50, (28, 28, 1))
        ds = Dataset(np.rint(synth.images * 255) / 255, synth.labels)
    write_idx(ds, tmp_path / "i.gz", tmp_path / "l.gz", compress=True)
    back = load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    if not (np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)):
        failing.append("idx round-trip")
    env = ReportEnvelope("check", {"x": [0.1, 1e-300, -2.5e17]}, {"k": "v"}, 1)
    if write_report(read_report(write_report(env))) != write_report(env):
        failing.append("envelope round-trip")
    ok = not failing
    criterion(12, "byte-identical reruns and round-trips", ok,
              f"{len(commands)} commands rerun" + (f"; failing {failing}" if failing else ""))
    assert ok
