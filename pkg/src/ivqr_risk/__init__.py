"""Instrumental-variable quantile regression for unemployment tail risk."""

__version__ = "0.1.0"

from .data import (
    DatasetSpec,
    EstimationDataset,
    TimeSeriesPanel,
    build_design,
    diff_horizon,
    load_csv,
    summarize,
    yoy_change,
)
from .ivqr import (
    AlphaGrid,
    IVQRFit,
    IVQROptions,
    SmoothingBandwidth,
    fit_ivqr_auto,
    fit_ivqr_grid,
    fit_ivqr_smoothed,
    ivqr_se,
    smoothed_indicator,
    wald_objective,
)
from .linear_iv import fit_2sls, qq_data, residual_moments
from .mc import DGPSpec, run_study, simulate_dgp
from .qreg import QuantileFit, check_loss, fit_quantile, qreg_cov
from .risk import (
    fit_quantile_grid,
    group_contrast,
    predictive_density,
    rearrange,
    tail_risk,
)
