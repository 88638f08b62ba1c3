"""Embedded poststratification for nonprobability samples.

Estimates population and subgroup means when the poststratification
cells involve a covariate with unknown population counts: cell counts
are estimated (bootstrap expansion of the weighted sample, multinomial
draws, or a covariate regression) and their uncertainty is propagated
by pairing count draws with posterior cell-mean draws.
"""
from .data_model import (
    CellFrame,
    CellMeanDraws,
    CountDraws,
    EmptyCellError,
    EmrpError,
    EstimateSummary,
    EstimationError,
    SubgroupDef,
    UnsupportedError,
    UrnUnderflowError,
    ValidationError,
    WeightedSample,
    build_cell_frame,
    collapse_empty_cells,
    construct_base_weights,
    read_margins_csv,
    read_sample_csv,
    sample_cell_counts,
)
from .bayes_glm import (
    BernoulliCellData,
    FactorTerm,
    ModelSpec,
    PosteriorFit,
    SamplerConfig,
    cell_data_from_units,
    cell_means,
    diagnostics,
    sample,
)
from .estimators import (
    emrp_estimate,
    emrp_variance_decomposition,
    mrp_estimate,
    pair_draws,
    unweighted_estimate,
    wfpbb_direct_estimate,
    write_estimates_json,
)
from .simulation import SimConfig, StudyResult, run_study, run_study_cached
from .synthpop import (
    SyntheticPopulation,
    bayesian_bootstrap,
    counts_from_populations,
    counts_multinomial,
    counts_twostage,
    counts_wfpbb,
    polya_draw_counts,
    recalibrate_weights,
    wfpbb_populations,
)

__version__ = "0.4.0"

__all__ = [
    "__version__",
    # data model
    "CellFrame", "WeightedSample", "CountDraws", "CellMeanDraws",
    "SubgroupDef", "EstimateSummary",
    "EmrpError", "ValidationError", "EmptyCellError", "UrnUnderflowError",
    "UnsupportedError", "EstimationError",
    "build_cell_frame", "construct_base_weights", "collapse_empty_cells",
    "sample_cell_counts", "read_sample_csv", "read_margins_csv",
    # model
    "FactorTerm", "ModelSpec", "BernoulliCellData", "SamplerConfig",
    "PosteriorFit", "cell_data_from_units", "sample", "cell_means",
    "diagnostics",
    # counts
    "SyntheticPopulation", "bayesian_bootstrap", "recalibrate_weights",
    "polya_draw_counts", "wfpbb_populations", "counts_from_populations",
    "counts_wfpbb", "counts_multinomial", "counts_twostage",
    # estimators
    "pair_draws", "emrp_estimate", "mrp_estimate",
    "emrp_variance_decomposition", "wfpbb_direct_estimate",
    "unweighted_estimate", "write_estimates_json",
    # study
    "SimConfig", "StudyResult", "run_study", "run_study_cached",
]
