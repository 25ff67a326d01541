"""Variational EM actor-critic toolkit.

A softmax (Boltzmann) policy whose temperature is the critic's own Bellman
residual, the evidence-lower-bound objective that couples actor and critic,
exact EM reductions on tabular MDPs, the practical actor-critic variants, a
maximum-entropy comparison construction, and a verification CLI.
"""

__version__ = "0.1.0"

from . import actor_critic, bellman, boltzmann, em_exact, maxent, mdp  # noqa: F401
from .mdp import (  # noqa: F401
    ContinuousEnv,
    CounterexampleParams,
    DiscreteMdp,
    StateAction,
    build_counterexample,
    make_continuous_bandit,
    make_point_mass,
    random_mdp,
    sample_transition,
)
