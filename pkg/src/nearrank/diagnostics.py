"""Near-rank-loss counting over network layers and perturbation-bound checks.

A layer's activation ``H`` is either a matrix ``(units, batch)`` or a 4-D
tensor ``(height, width, channels, batch)``.  Matrices contribute their
singular values; 4-D tensors contribute the singular values of their mode
unfoldings, pooled over all modes by default (``modes="all"``) or over a
chosen subset.  ``S_z`` counts values strictly below the threshold.
"""

from dataclasses import dataclass, field

import numpy as np

from .svd import pseudoinverse, singular_values
from .tensor import frobenius_norm, mode_unfold

__all__ = [
    "RANK_TOL",
    "DEFAULT_BATCH_CAP",
    "ModeCount",
    "LayerRankLoss",
    "RankLossReport",
    "PerturbationCheck",
    "count_below_threshold",
    "layer_spectra",
    "near_rank_loss",
    "near_rank_loss_many",
    "eq4_bound",
    "check_perturbation_inequality",
]

# singular values at or below RANK_TOL * sigma_max are treated as zero
RANK_TOL = 1e-12
DEFAULT_BATCH_CAP = 4096
RANK_LOSS_COLUMNS = ("layer", "mode", "count_examined", "S_z")


def count_below_threshold(spectrum, t_th):
    """Number of entries strictly less than ``t_th``."""
    if not t_th > 0:
        raise ValueError("t_th must be positive")
    s = np.asarray(spectrum, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("singular values must be nonnegative")
    return int(np.count_nonzero(s < t_th))


@dataclass(frozen=True)
class ModeCount:
    mode: str
    examined: int
    s_z: int


@dataclass(frozen=True)
class LayerRankLoss:
    layer: str
    s_z: int
    examined: int
    modes: tuple
    shape: tuple
    batch_used: int


@dataclass
class RankLossReport:
    """Per-layer and total counts of singular values below ``threshold``."""

    threshold: float
    per_layer: list
    s_z_total: int
    batch_cap: int = DEFAULT_BATCH_CAP
    mode_selection: object = "all"
    meta: dict = field(default_factory=dict)

    def rows(self):
        """``(layer, mode, count_examined, S_z)`` rows, one per spectrum."""
        return [(lay.layer, mc.mode, mc.examined, mc.s_z)
                for lay in self.per_layer for mc in lay.modes]

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "s_z_total": self.s_z_total,
            "batch_cap": self.batch_cap,
            "mode_selection": self.mode_selection,
            "per_layer": [{"layer": lay.layer, "s_z": lay.s_z, "examined": lay.examined,
                           "shape": list(lay.shape), "batch_used": lay.batch_used,
                           "modes": [{"mode": mc.mode, "examined": mc.examined, "s_z": mc.s_z}
                                     for mc in lay.modes]}
                          for lay in self.per_layer],
            "meta": self.meta,
        }


def _cap_batch(h, batch_cap, rng):
    b = h.shape[-1]
    if batch_cap is None or b <= batch_cap:
        return h
    keep = np.sort(rng.choice(b, size=batch_cap, replace=False))
    return np.take(h, keep, axis=-1)


def layer_spectra(activation, modes="all", method="lapack"):
    """``[(mode_label, spectrum), ...]`` for one activation matrix or 4-D tensor."""
    h = np.asarray(activation, dtype=np.float64)
    if h.ndim == 2:
        return [("matrix", singular_values(h, method))]
    if h.ndim != 4:
        raise ValueError(f"activation must have order 2 or 4, got shape {h.shape}")
    chosen = range(4) if modes == "all" else modes
    out = []
    for k in chosen:
        if not 0 <= k < 4:
            raise ValueError(f"mode {k} out of range for a 4-D activation")
        out.append((str(k), singular_values(mode_unfold(h, k), method)))
    return out


def near_rank_loss_many(activations, thresholds, modes="all", batch_cap=DEFAULT_BATCH_CAP,
                        seed=0, layer_ids=None, method="lapack"):
    """:func:`near_rank_loss` for several thresholds, decomposing each layer once.

    Returns a list of reports in the order of ``thresholds``.
    """
    thresholds = [float(t) for t in thresholds]
    if not thresholds or any(not t > 0 for t in thresholds):
        raise ValueError("thresholds must be a non-empty list of positive numbers")
    activations = list(activations)
    if not activations:
        raise ValueError("no layer activations given")
    if layer_ids is None:
        layer_ids = [f"layer{i}" for i in range(len(activations))]
    if len(layer_ids) != len(activations):
        raise ValueError("layer_ids and activations differ in length")
    rng = np.random.default_rng(seed)
    per_layer = {t: [] for t in thresholds}
    for lid, act in zip(layer_ids, activations):
        h = np.asarray(act, dtype=np.float64)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite values in activation of {lid}")
        shape = h.shape
        h = _cap_batch(h, batch_cap, rng)
        spectra = layer_spectra(h, modes, method)
        for t in thresholds:
            counts = tuple(ModeCount(label, len(spec), count_below_threshold(spec, t))
                           for label, spec in spectra)
            per_layer[t].append(LayerRankLoss(lid, sum(c.s_z for c in counts),
                                              sum(c.examined for c in counts),
                                              counts, tuple(shape), h.shape[-1]))
    selection = modes if modes == "all" else list(modes)
    return [RankLossReport(t, per_layer[t], sum(lay.s_z for lay in per_layer[t]), batch_cap,
                           selection, {"seed": seed})
            for t in thresholds]


def near_rank_loss(activations, t_th, modes="all", batch_cap=DEFAULT_BATCH_CAP, seed=0,
                   layer_ids=None, method="lapack"):
    """Count singular values below ``t_th`` in every layer and sum them.

    When a layer's batch (last) axis exceeds ``batch_cap`` a uniformly
    random subset of ``batch_cap`` columns is kept; the subset is drawn from
    ``default_rng(seed)`` layer by layer in order.
    """
    if not t_th > 0:
        raise ValueError("t_th must be positive")
    return near_rank_loss_many(activations, [t_th], modes, batch_cap, seed, layer_ids, method)[0]


def _retained(s):
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("matrix has no retained rank (all singular values are zero)")
    return s[s > RANK_TOL * s[0]]


def eq4_bound(activation, delta):
    """``||delta||_F * sum(1 / sigma_i)`` over the retained singular values of ``activation``.

    This is the sum ``sum_i (1/sigma_i) ||delta|| ||v_i u_i^T||`` with
    Frobenius norms, where each rank-one term has unit norm.
    """
    a = np.asarray(activation, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    if a.shape != d.shape:
        raise ValueError(f"shape mismatch: activation {a.shape}, delta {d.shape}")
    s = _retained(singular_values(a))
    return float(frobenius_norm(d) * np.sum(1.0 / s))


@dataclass(frozen=True)
class PerturbationCheck:
    lhs: float
    bound: float
    svd_bound: float
    holds: bool
    delta_theta: np.ndarray

    def to_dict(self):
        return {"lhs": self.lhs, "bound": self.bound, "svd_bound": self.svd_bound,
                "holds": self.holds}


def check_perturbation_inequality(theta, x, delta_x, tol=1e-12):
    """Relative change of ``theta`` in ``theta @ x = y`` when ``x`` moves by ``delta_x``.

    The first-order change keeping ``y`` fixed solves ``dtheta @ x = -theta @ delta_x``,
    i.e. ``dtheta = -theta @ delta_x @ pinv(x)``.  Returns ``lhs = ||dtheta||/||theta||``,
    ``bound = ||delta_x|| ||pinv(x)||`` and the looser sum-of-reciprocals bound,
    all Frobenius.  ``tol`` is relative to the largest singular value.
    """
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    delta_x = np.asarray(delta_x, dtype=np.float64)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise ValueError("theta must be square")
    if x.ndim != 2 or theta.shape[1] != x.shape[0]:
        raise ValueError(f"theta {theta.shape} and x {x.shape} do not compose")
    if delta_x.shape != x.shape:
        raise ValueError("delta_x must have the shape of x")
    st = singular_values(theta)
    if st[-1] <= tol * st[0]:
        raise ValueError("theta is singular to tolerance")
    sx = singular_values(x)
    if x.shape[0] > x.shape[1] or sx[-1] <= tol * sx[0]:
        raise ValueError("x is not full row rank to tolerance")
    x_pinv = pseudoinverse(x, tol)
    delta_theta = -theta @ delta_x @ x_pinv
    lhs = frobenius_norm(delta_theta) / frobenius_norm(theta)
    bound = frobenius_norm(delta_x) * frobenius_norm(x_pinv)
    svd_bound = eq4_bound(x, delta_x)
    return PerturbationCheck(float(lhs), float(bound), svd_bound,
                             bool(lhs <= bound + 1e-12), delta_theta)
