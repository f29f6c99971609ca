"""Near-rank loss of hidden activations versus training batch size.

Submodules:

``tensor``       float64 tensors, mode unfoldings, norms
``svd``          SVD, pseudoinverse, per-mode (HOSVD) spectra
``randmat``      random matrices and Monte-Carlo extreme singular values
``diagnostics``  counting small singular values per layer, perturbation bounds
``nn``           networks, SGD training, gradient checks
``data``         IDX datasets and synthetic data
``reports``      JSON/CSV reports and the tensor file container
``experiments``  sweeps and command-line entry point
"""

from .diagnostics import (
    RankLossReport,
    check_perturbation_inequality,
    count_below_threshold,
    eq4_bound,
    near_rank_loss,
)
from .randmat import DistSpec, expected_extreme_sv, mp_edges, sample_matrix, spectrum_histogram, verify_prop2
from .svd import SvdResult, hosvd_mode_spectra, pseudoinverse, singular_values, svd_full
from .tensor import as_tensor, frobenius_norm, matmul, mode_fold, mode_unfold

__version__ = "0.1.0"

__all__ = [
    "RankLossReport", "check_perturbation_inequality", "count_below_threshold", "eq4_bound",
    "near_rank_loss", "DistSpec", "expected_extreme_sv", "mp_edges", "sample_matrix",
    "spectrum_histogram", "verify_prop2", "SvdResult", "hosvd_mode_spectra", "pseudoinverse",
    "singular_values", "svd_full", "as_tensor", "frobenius_norm", "matmul", "mode_fold",
    "mode_unfold",
]
