"""Row products of random matrices: implicit operators, spectra, l1 geometry
and the contingency-table reconstruction attack."""

from .core import (
    DEFAULT_CAPS,
    CapExceededError,
    Caps,
    FactorMatrix,
    RowProductOperator,
    apply,
    apply_adjoint,
    flat_to_multi,
    gram,
    iterated_log,
    materialize,
    multi_to_flat,
    regime_check,
    row_entry,
)
from .ensembles import EnsembleSpec, center_split, delta_of, make_rng, sample_factor, sample_factors, seed_derive

__version__ = "0.1.0"
