"""Path-based explanations for GNN knowledge-graph-completion models."""

from .autodiff import ParamStore, Tape, backward, finite_diff_check, sgd_step
from .explain import (
    EdgeScoreMatrix,
    ExplainConfig,
    Explanation,
    PowerVector,
    TesParams,
    combine_cat,
    combine_euc,
    generate_paths,
    init_tes,
    initial_power_vector,
    normalize_power,
    on_path_probability,
    path_loss,
    power_step,
    prepare_computation_graph,
    tes_score_edges,
    total_loss,
    train_explainer,
)
from .harness import PlantedConfig, SuiteConfig, generate_planted, run_suite
from .kgraph import (
    ComputationGraph,
    KnowledgeGraph,
    TargetTriple,
    adjacency_power_row,
    extract_computation_graph,
    full_graph,
    k_core_prune,
    load_triples,
)
from .metrics import (
    EvalConfig,
    MetricReport,
    evaluate_batch,
    fidelity_minus,
    fidelity_plus,
    h_delta_r,
    sparsity,
)
from .model import (
    KgcModel,
    ModelConfig,
    TripleScore,
    encode,
    load_checkpoint,
    rank_target,
    save_checkpoint,
    score,
    score_target_masked,
    train_kgc,
)

__version__ = "0.1.0"
