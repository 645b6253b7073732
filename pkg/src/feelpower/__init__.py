"""Learning-oriented uplink power allocation for federated edge learning.

Modules
-------
channel
    Random MIMO uplink channels, composite gains, rates and sample counts.
lossmodel
    Power-law loss fitting, the data-deficit factor and the convergence bound.
problem
    The sample-deficit objective, its concave-convex surrogate and gradients.
mm_solver
    Centralized majorization-minimization allocator.
fom_solver
    Distributed first-order primal-dual allocator with optional momentum.
baselines
    Uniform power and sum-rate maximization.
fedsim
    Closed-loop federated training on a synthetic classification task.
cli
    Command-line experiment runner (``feelpower``).
"""

__version__ = "0.1.0"

from .channel import ConfigError, DomainError, NetworkConfig, build_config, sample_channels  # noqa: E402
from .problem import AllocationProblem  # noqa: E402

__all__ = [
    "__version__",
    "AllocationProblem",
    "ConfigError",
    "DomainError",
    "NetworkConfig",
    "build_config",
    "sample_channels",
]
