"""Operator-splitting analysis for continuous-time Markov chains and lattice KMC."""

__version__ = "0.1.0"

from .errors import (AbsoluteContinuityError, ConfigError, ConvergenceError, DecompositionError,
                     GeneratorError, ReducibleChainError, SplitMCError, StateSpaceOverflow,
                     TheoremInapplicable)
from .model import (LIE, STRANG, ArrheniusRates, DenseGenerator, RestrictionSpec, SchemeKind,
                    SchemeSpec, SpinConfiguration, arrhenius_rate, lattice_generator, restrict,
                    total_rate)
from .exact import (CommutatorReport, ConnectivityReport, OrderFit, PowerLawRegressor,
                    TransitionMatrix, commutator, connectivity, expm, fit_order,
                    goal_oriented_bounds, leading_rer_coefficient, linearized_bound,
                    path_relative_entropy, predict_order, rer, scheme_matrix, stationary,
                    tilted_eigenvalue)
from .lattice import (CommStats, Decomposition, SimClock, checkerboard, comm_bound, scheme_step,
                      simulate, ssa_run)
from .estimator import (LocalTerms, RerAccumulator, RerEstimator, accumulate, dt_for_tolerance,
                        f_term, f_value, info_criterion, local_commutator,
                        local_scheme_coefficient, pp_rer)
