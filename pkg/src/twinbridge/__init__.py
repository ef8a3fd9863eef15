"""twinbridge: cost-aware querying and probabilistic bridging for
network digital twins."""

from .core import (CostModelConfig, ExperimentBudget, NetworkState, Observation,
                   StateSpace, enumerate_state_grid, sample_candidates, state_cost)
from .envs import (DatasetEnv, DatasetRecord, PerformanceCollection, Role, Source,
                   SyntheticEnv, SyntheticEnvConfig, env_query, load_dataset,
                   make_synthetic_pair, save_dataset)
from .divergence import (KlEstimatorConfig, KlMethod, augment_collection,
                         kl_divergence, quantile_residuals)
from .bo import (AlphaControllerConfig, GPModel, KernelConfig, KernelFamily,
                 cost_aware_ei, expected_improvement, gp_fit, gp_posterior,
                 select_next_state, update_alpha)
from .agent import (BnnArchitecture, TrainConfig, TrainedAgent, VariationalParams,
                    bnn_init, bnn_train, elbo_loss, load_params, predict_offsets,
                    save_params)

__version__ = "0.1.0"
