"""micromix: infer K sparse microbial association networks from counts.

Three engines fit a K-component mixture to a sample-taxa count matrix
and return per-component precision matrices (the networks):

* mixmpln - Poisson log-normal mixture, Newton latent updates;
* mixmcmc - same model, latent vectors estimated by MCMC posterior means;
* mixggm  - centered log-ratio transform + Gaussian mixture.

Supporting modules generate benchmark data (synthgen), select the
sparsity penalty (glasso), choose K (modelsel), and score recovered
networks against ground truth (metrics). The cli module wires these
into reproducible experiments.
"""

__version__ = "0.1.0"

from .datamodel import (ComponentParams, FitConfig, GroundTruth, MixtureModel,
                        SampleTaxaMatrix, load_counts, load_model,
                        partial_correlation, save_model)
from .glasso import GlassoSolution, glasso_fit, tune_cv, tune_fixed, tune_iterative, tune_stars
from .metrics import (EvalReport, auc_edge_recovery, evaluate_model,
                      frobenius_pc_diff, match_components, relative_difference)
from .mixggm import clr, fit_mixggm
from .mixmcmc import fit_mixmcmc, neff, rhat, sample_lambda_posterior
from .mixmpln import fit_mixmpln, mpln_log_density
from .modelsel import (VIPriors, bic_select, pca_reduce, select_k, silhouette,
                       vi_gmm_fit, vi_mpln_fit)
from .synthgen import (GraphSpec, MarginalSpec, MixtureSpec, SyntheticDataset,
                       compositional_subsample, gen_graph, gen_mixture_dataset,
                       gen_precision, norta_sample, sample_mpln, tmm_normalize)

__all__ = [
    "__version__",
    "SampleTaxaMatrix", "ComponentParams", "MixtureModel", "GroundTruth", "FitConfig",
    "load_counts", "save_model", "load_model", "partial_correlation",
    "GraphSpec", "MarginalSpec", "MixtureSpec", "SyntheticDataset",
    "gen_graph", "gen_precision", "sample_mpln", "norta_sample",
    "gen_mixture_dataset", "compositional_subsample", "tmm_normalize",
    "GlassoSolution", "glasso_fit", "tune_fixed", "tune_iterative", "tune_cv", "tune_stars",
    "fit_mixmpln", "mpln_log_density",
    "fit_mixmcmc", "rhat", "neff", "sample_lambda_posterior",
    "fit_mixggm", "clr",
    "VIPriors", "vi_gmm_fit", "vi_mpln_fit", "select_k", "bic_select",
    "silhouette", "pca_reduce",
    "EvalReport", "relative_difference", "frobenius_pc_diff",
    "auc_edge_recovery", "match_components", "evaluate_model",
]
