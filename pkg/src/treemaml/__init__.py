"""treemaml: MAML and tree-structured MAML over task hierarchies.

Library layout: numerics (vectors, similarity stats, finite differences),
models (linear regression with closed-form derivatives), tasks (synthetic
hierarchical task distribution), clustering (online top-down tree building),
meta (inner/outer loops and meta-gradients), cli (experiment grids).

Typical use:
    >>> from treemaml import tasks, meta, models
    >>> tree = tasks.build_parameter_tree(tasks.TaskGeneratorConfig(seed=7))
"""

from __future__ import annotations

__version__ = "0.1.0"

from .numerics import (
    InsufficientSamplesError,
    NumericalError,
    ParamVector,
    SimilarityStats,
    ZeroVectorError,
    confidence_halfwidth_95,
    cosine_similarity,
    finite_difference_gradient,
    set_similarity,
)
from .models import Batch, EmptyBatchError, LinearRegressionModel
from .tasks import (
    ConfigError,
    TaskGeneratorConfig,
    TaskInstance,
    TaskSampler,
    build_parameter_tree,
    sample_task,
    sample_task_batch,
)
from .clustering import (
    ClusterConfig,
    ClusterTreeNode,
    DuplicateTaskError,
    build_tree,
    clusters_at_level,
    otd_insert,
)
from .meta import (
    MODES,
    AdaptationTrace,
    CapabilityError,
    DivergenceError,
    EmptyClusterError,
    FixedTreeSpec,
    MetaConfig,
    TreeShapeError,
    adapt_and_evaluate,
    adapt_tree,
    generator_hierarchy_tree,
    inner_step_cluster,
    inner_step_task,
    meta_train,
    outer_update,
    single_cluster_tree,
    singleton_tree,
)

__all__ = [name for name in dir() if not name.startswith("_")]
