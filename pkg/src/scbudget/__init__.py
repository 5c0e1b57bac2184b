"""Budget allocation for self-consistency sampling of language-model traces."""

from .core import majority_vote, marginal_gain_binary, sc_exact_binary, sc_multinomial
from .offline import OKGRunner, QuestionBelief, run_offline
from .online import GridModel, greedy_allocate, stream_step, train_grid_model
from .surrogate import SurrogateParams, fit_probit

__version__ = "0.1.0"

__all__ = [
    "GridModel",
    "OKGRunner",
    "QuestionBelief",
    "SurrogateParams",
    "fit_probit",
    "greedy_allocate",
    "majority_vote",
    "marginal_gain_binary",
    "run_offline",
    "sc_exact_binary",
    "sc_multinomial",
    "stream_step",
    "train_grid_model",
]
