"""Graph reaction-diffusion networks: graphs and Laplacians, a tape-based
differentiation engine, explicit and IMEX layer dynamics with conjugate
gradient solves, model assembly, stability analysis, training loops,
dataset tooling, and a command-line interface."""

__version__ = "0.1.0"

from .graph import (Graph, GraphError, NormalizedLaplacian, build_graph,
                    dirichlet_energy, laplacian_apply, normalized_laplacian)
from .autodiff import (NonFiniteError, ShapeError, Tape, TapeError, Tensor,
                       backward, finite_difference_check)
from .dynamics import (ConvergenceError, DiffusionParams, LayerParams,
                       ReactionParams, ReactionWeights, cg_solve,
                       diffusion_coefficients, explicit_step, imex_step,
                       implicit_solve_adjoint, reaction_total)
from .model import (ConfigError, ForwardPass, ModelConfig, ModelParams,
                    expected_param_count, forward, init_params,
                    load_checkpoint, save_checkpoint)
from .analysis import (AnalysisError, StabilityReport, dynamics_trace,
                       eigenvalues, model_stability, reaction_jacobian,
                       stability_matrix, turing_check)
from .datasets import (DataError, Dataset, Snapshot, TemporalDataset,
                       edge_homophily, load_json_dataset, load_temporal_csv,
                       make_splits, save_json_dataset, synth_sbm, synth_temporal)
from .training import (AdamState, Metrics, SearchSpace, TrainConfig,
                       TrainingError, adam_init, adam_step, accuracy,
                       cross_entropy_loss, depth_study, grid_search, mse_loss,
                       train_node_classification, train_spatiotemporal)
