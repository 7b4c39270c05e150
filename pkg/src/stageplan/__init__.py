"""Synergy-driven stage partitioning for multi-domain adapter tuning.

The pipeline: reduce raw text domains to statistics (`corpus`), score
pairwise discrepancy and synergy (`affinity`), optimize the stage
partition and evaluate risk bounds (`partition`), and verify plans on a
synthetic adapter model (`synth`, `trainer`). The `stageplan` CLI binds
the same steps end to end.
"""

from .affinity import (
    AffinityMatrices,
    blend_gradient_affinity,
    build_matrices,
    embedding_cosine,
    jaccard,
    js_divergence,
    synergy,
)
from .corpus import (
    DomainCorpus,
    DomainStats,
    DomainVectorizer,
    EmbeddingConfig,
    TokenDistribution,
    TokenizerConfig,
    bootstrap_centroid_deviation,
    compute_domain_stats,
    embed_document,
    load_corpus,
    load_precomputed_embeddings,
    tokenize,
)
from .errors import (
    AffinityError,
    CapabilityError,
    InputError,
    ParameterError,
    ParseError,
    StageplanError,
    StatisticsError,
    SynthesisError,
    TrainingError,
)
from .partition import (
    EXACT_DOMAIN_GUARD,
    BoundReport,
    ObjectiveParams,
    Partition,
    StagePartitioner,
    StagePlan,
    agglomerative_search,
    capacity_proxy,
    check_grouping_condition,
    enumerate_exact,
    iter_partitions,
    make_stage_plan,
    multisource_risk_bound,
    partition_objective,
    random_partition,
    solve_partition,
    stage_risk_bound,
    update_complexity,
)
from .synth import (
    DomainData,
    SyntheticDomainSpec,
    affinity_from_plan,
    probe_tasks_from_stats,
    standard_suite,
    synth_domains,
)
from .trainer import (
    Adapter,
    ModelState,
    MultiStageAdapterModel,
    StageRecord,
    ToyModelConfig,
    TrainingReport,
    domain_risk,
    extend_plan,
    gradient_check,
    gradient_cosine_matrix,
    init_state,
    project_norms,
    run_plan,
)

__version__ = "0.1.0"
