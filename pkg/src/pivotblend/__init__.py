"""Skewed pivot-blend densities, regression and sparse two-part models."""
from .densities import (GDG, BASE_KINDS, BaseDensity, DoubleRayleigh, Exponential, Gaussian, Gumbel, HalfNormal,
                        HuberPseudo, Laplace, MaxwellBoltzmann, PastedDistribution, SkewSpec, SPDistribution,
                        make_base)
from .diagnostics import backward_blend, diagnostics_report, weighted_kde, weighted_ks
from .errors import (ConfigError, DegeneratePivotError, DomainError, InternalError, NotConvergedError,
                     OptimizationError, PartitionError, PivotBlendError, QuadratureError, StratificationError)
from .speus import FitOptions, SPFit, SpeusProblem, absorb_pivot, rank_criterion, speus_fit, speus_fit_bounded
from .twopart import (TwoPartFit, TwoPartOptions, TwoPartProblem, effective_noise, lambda_theory, s2_fit, s2_path,
                      select_lambda_scv)

__version__ = "0.1.0"
