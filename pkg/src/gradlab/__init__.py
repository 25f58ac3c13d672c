"""gradlab: a desk-scale lab for gradient-stabilization experiments.

Implements multi-skip residual MLPs, a Kronecker-factored second-order
optimizer, training-pathology diagnostics (dormant units, SRank, Hessian
trace), non-stationary supervised and RL training regimes (PQN, PPO), and
a seeded experiment harness with CSV/JSONL logging.
"""

__version__ = "0.1.0"

from .networks import ArchitectureSpec, build_network, forward_network, backward_network  # noqa: F401
from .optim import make_optimizer_state, optimizer_step  # noqa: F401
from .diagnostics import ProbeConfig, run_probes  # noqa: F401
from .harness import ExperimentConfig, parse_config, run_experiment, run_sweep, summarize  # noqa: F401
