"""Multi-level reduced-rank functional principal components analysis.

Gaussian and skew-t-normal variants for replicated time-course panels.
"""

__version__ = "0.1.0"

from .basis import SplineBasis, build_basis
from .dataset import Dataset, load_csv, write_csv
from .gaussian import EMConfig, fit_multilevel_gaussian, fit_singlelevel_gaussian
from .mcem import GibbsConfig, fit_multilevel_stn
from .model import MultiLevelParams, assemble_designs, extract_curves, orthogonalize
from .ranks import select_ranks
from .simulate import SimDesign, generate, mse_variable_curves, run_study
from .stn import StNParams, fit_stn_mle

__all__ = [
    "Dataset", "EMConfig", "GibbsConfig", "MultiLevelParams", "SimDesign", "SplineBasis",
    "StNParams", "assemble_designs", "build_basis", "extract_curves", "fit_multilevel_gaussian",
    "fit_multilevel_stn", "fit_singlelevel_gaussian", "fit_stn_mle", "generate", "load_csv",
    "mse_variable_curves", "orthogonalize", "run_study", "select_ranks", "write_csv",
]
