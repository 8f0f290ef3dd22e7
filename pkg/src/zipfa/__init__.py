"""Zero-inflated Poisson factor analysis for microbiome count matrices."""

from .data import CountMatrix, load_counts, relative_library_size, save_counts
from .factorize import FactorModel, FitOptions, predict_zero_probability, zipfa_fit
from .rankcv import CvConfig, CvResult, select_rank
from .zipreg import ZipRegProblem, fit_zip_regression

__version__ = "0.1.0"
