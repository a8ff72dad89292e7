"""KV-cache compaction via attention matching."""

from .attention import (CompactHead, HeadCache, QuerySet, RopeParams,
                        attn_mass, attn_output, concat_attn, rope_rotate,
                        scaled_logits, true_mass)
from .budgets import (BudgetSchedule, SensitivityCurve, allocate_budgets,
                      interp_curve, linear_layer_shares, measure_sensitivity,
                      shares_to_counts)
from .compaction import (ChunkPlan, CompactionConfig, compact_cache,
                         compact_chunked, compact_head, fit_beta, fit_values)
from .container import (ContainerError, Manifest, TensorEntry,
                        read_container, validate_manifest, write_container)
from .metrics import (ReconReport, mass_error, oracle_best_subset_mass,
                      output_error, reconstruction_report)
from .queries import (QueryBudget, gen_random_queries, merge_query_sets,
                      reservoir_subsample)
from .selection import (MassFeatures, SelectionResult, mass_features,
                        score_keys, select_global_topk, select_omp,
                        select_topk)
from .solvers import (BoxBounds, estimate_spectral_norm_sq, solve_lstsq,
                      solve_nnls_pgd)
from .synth import synth_cache, synth_head

__version__ = "0.1.0"
