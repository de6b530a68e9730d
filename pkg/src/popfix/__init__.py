"""Population-based semantic-evolution engine for test-suite-driven program repair."""

from .core import (
    EngineConfig,
    EvaluatedCandidate,
    EvaluationOutcome,
    FailureRecord,
    Lineage,
    Population,
    RepairTask,
    TestCase,
    TestKind,
    TestSuite,
    Verdict,
    compute_fitness,
    compute_signature,
    load_tasks,
    normalize_source,
)
from .engine import (
    EvolutionRun,
    RunReport,
    Termination,
    baseline_greedy,
    baseline_naive,
    initialize_population,
    run,
    survivor_selection,
)
from .evaluator import (
    EvaluatorConfig,
    EvaluatorMode,
    ExternalEvaluator,
    SyntheticEvaluator,
    build_failure_report,
    make_evaluator,
)
from .generator import (
    BackendConfig,
    BackendKind,
    GeneratorExchange,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
    ScriptedRule,
    make_backend,
)
from .grouping import (
    GroupSet,
    cluster,
    effective_group_count,
    jaccard_similarity,
    rebalance_singletons,
    similarity_matrix,
)
from .metrics import (
    CombinationOutcome,
    combination_indicator,
    combination_rate,
    pass_at_k,
)
from .operators import (
    ParsedResponse,
    PromptBundle,
    PromptKind,
    parse_response,
    render_init_prompt,
    render_mutation_prompt,
    render_recombination_prompt,
    select_mutation_parents,
)
from .sampling import MixedGroupPlan, build_mixed_groups, group_entropy, allocate_samples

__version__ = "0.1.0"
