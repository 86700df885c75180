"""offdiff: multi-server computation-offloading optimization toolkit.

Generate offloading problem instances, label them with a min-cost-max-flow
heuristic or exhaustive search, train an edge-gated graph network to
denoise solution distributions (discrete decisions + continuous
allocations jointly), sample feasible solutions in parallel, and evaluate
everything against exact labels. A separate calculator module covers the
best-of-n sampling theory (concentration bound, hit probabilities, sample
lower bounds).
"""

from .problem import (GenConfig, OffloadInstance, Solution, all_local_solution,
                      check_feasible, generate_instance, objective)
from .solvers import (HeuristicConfig, build_flow_network, exact_solve,
                      exhaustive_over_D_with_fixed_A, heuristic_allocation,
                      heuristic_best, mcmf_solve)
from .data import DatasetManifest, DatasetRecord, build_dataset, load_dataset
from .diffusion import (DiffusionSchedule, continuous_denoise_step,
                        continuous_noise_to_t, discrete_denoise_step,
                        discrete_noise_to_t, discrete_posterior, make_schedule)
from .gnn import (BatchedGraph, GnnConfig, GnnModel, batch_instances, forward,
                  init_params, load_checkpoint, save_checkpoint)
from .training import (OrthoReport, TrainConfig, compute_losses, probe_orthogonality,
                       train, train_discriminative)
from .sampling import (SampleConfig, DiffusionSampler, DiscriminativePredictor,
                       FlowHeuristic, decode, empirical_generation_variance,
                       evaluate_method, exceed_ratio, run_benchmark,
                       sample_solutions)
from .bounds import (TheoryParams, chebyshev_bound, fig_table,
                     hit_probability_continuous, hit_probability_discrete,
                     min_samples, sample_lower_bound)

__version__ = "0.1.0"
