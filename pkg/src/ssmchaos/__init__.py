"""Data-driven spectral-submanifold reduced models of chaotic attractors."""

__version__ = "0.1.0"

from .trajectory import TrajectorySet, read_csv, write_csv  # noqa: E402
from .systems import Forcing, SystemSpec, integrate, integrate_batch, integrate_ks  # noqa: E402
from .embedding import DelaySpec, delay_embed, fnn_dimension, fnn_percentages  # noqa: E402
from .manifold import MonomialBasis, SsmModel, fit_ssm, fit_ssm_fast, invariance_error  # noqa: E402
from .dynamics import (ForcedPolyFlow, KnnModel, PolyFlowModel, calibrate_forcing,  # noqa: E402
                       fit_poly_flow, fit_poly_map, forecast, knn_build, knn_step,
                       modal_transform, propagate)
from .diagnostics import density_compare, mle_ensemble, mle_from_pair, nmte  # noqa: E402

__all__ = [
    "TrajectorySet", "read_csv", "write_csv", "Forcing", "SystemSpec", "integrate",
    "integrate_batch", "integrate_ks", "DelaySpec", "delay_embed", "fnn_dimension",
    "fnn_percentages", "MonomialBasis", "SsmModel", "fit_ssm", "fit_ssm_fast",
    "invariance_error", "ForcedPolyFlow", "KnnModel", "PolyFlowModel", "calibrate_forcing",
    "fit_poly_flow", "fit_poly_map", "forecast", "knn_build", "knn_step", "modal_transform",
    "propagate", "density_compare", "mle_ensemble", "mle_from_pair", "nmte",
]
