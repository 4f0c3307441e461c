"""Synthetic hierarchical linear-regression task distribution.

Task weight vectors live on the leaves of a tree of Gaussian offsets: the root
center is drawn once, each child adds an offset at its level's scale, and each
sampled task jitters around its leaf center. Inputs are uniform on a box and
targets carry additive Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .models import Batch
from .numerics import ParamVector


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


@dataclass(frozen=True)
class TaskGeneratorConfig:
    """Geometry and noise of the task distribution.

    level_scales has one entry per tree level including the root, so its length
    is len(branching) + 1. task_jitter is the std of the per-task offset around
    its leaf center; None selects the default of 0.1 * level_scales[-1].
    """

    dim: int = 64
    branching: tuple = (2, 2)
    level_scales: tuple = (1.0, 1.0, 0.5)
    noise_std: float = 0.01
    input_low: float = -5.0
    input_high: float = 5.0
    seed: int = 0
    task_jitter: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(int(b) for b in self.branching))
        object.__setattr__(self, "level_scales", tuple(float(s) for s in self.level_scales))
        if self.dim <= 0:
            raise ConfigError("dim must be positive")
        if any(b <= 0 for b in self.branching):
            raise ConfigError("branching factors must be positive")
        if len(self.level_scales) != len(self.branching) + 1:
            raise ConfigError("need one level scale per tree level including the root")
        if any(s < 0 for s in self.level_scales):
            raise ConfigError("level scales must be non-negative")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")
        if not self.input_low < self.input_high:
            raise ConfigError("input_low must be < input_high")
        if self.task_jitter is not None and self.task_jitter < 0:
            raise ConfigError("task_jitter must be non-negative")

    @property
    def jitter_std(self) -> float:
        if self.task_jitter is not None:
            return float(self.task_jitter)
        return 0.1 * self.level_scales[-1]

    @property
    def num_leaf_clusters(self) -> int:
        n = 1
        for b in self.branching:
            n *= b
        return n

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "branching": list(self.branching),
            "level_scales": list(self.level_scales),
            "noise_std": self.noise_std,
            "input_low": self.input_low,
            "input_high": self.input_high,
            "seed": self.seed,
            "task_jitter": self.task_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskGeneratorConfig":
        return cls(**d)


@dataclass(frozen=True)
class ParameterTreeNode:
    center: ParamVector
    path: tuple
    children: tuple


@dataclass(frozen=True)
class ParameterTree:
    """Center hierarchy plus the flat list of leaves in path order."""

    root: ParameterTreeNode
    leaves: tuple
    config: TaskGeneratorConfig


def build_parameter_tree(cfg: TaskGeneratorConfig) -> ParameterTree:
    """Draw the center hierarchy for cfg, deterministically from cfg.seed.

    Nodes are drawn in depth-first pre-order: the root center comes from
    N(0, level_scales[0]^2) per coordinate, and each level-l child adds a
    N(0, level_scales[l]^2) offset to its parent's center.
    """
    rng = np.random.default_rng(cfg.seed)

    def grow(center: np.ndarray, path: tuple, level: int) -> ParameterTreeNode:
        children = []
        if level < len(cfg.branching):
            for b in range(cfg.branching[level]):
                offset = rng.normal(0.0, cfg.level_scales[level + 1], cfg.dim)
                children.append(grow(center + offset, path + (b,), level + 1))
        return ParameterTreeNode(ParamVector(center), path, tuple(children))

    root = grow(rng.normal(0.0, cfg.level_scales[0], cfg.dim), (), 0)

    leaves = []

    def collect(node: ParameterTreeNode):
        if not node.children:
            leaves.append(node)
        for child in node.children:
            collect(child)

    collect(root)
    return ParameterTree(root, tuple(leaves), cfg)


@dataclass(frozen=True)
class RegressionTaskParams:
    """Ground truth for one task: weights, owning leaf cluster, and tree path."""

    weights: ParamVector
    leaf_cluster_id: int
    path: tuple


@dataclass(frozen=True)
class TaskInstance:
    params: RegressionTaskParams
    train_points: Batch
    val_points: Batch
    test_points: Batch
    task_id: int


def _draw_batch(rng: np.random.Generator, cfg: TaskGeneratorConfig, weights: np.ndarray, n: int) -> Batch:
    x = rng.uniform(cfg.input_low, cfg.input_high, size=(n, cfg.dim))
    noise = rng.normal(0.0, cfg.noise_std, size=n)
    return Batch(x, x @ weights + noise)


def sample_task(
    tree: ParameterTree,
    rng: np.random.Generator,
    n_train: int,
    n_val: int,
    n_test: int = 0,
    task_id: int = 0,
) -> TaskInstance:
    """Sample one task: uniform leaf, jittered weights, then the three splits.

    A pure function of the RNG state, so replaying a seeded generator replays
    the exact task. Draw order: leaf index, jitter, train, val, test.
    """
    cfg = tree.config
    if n_train < 0 or n_val < 0 or n_test < 0:
        raise ConfigError("split sizes must be non-negative")
    leaf_idx = int(rng.integers(len(tree.leaves)))
    leaf = tree.leaves[leaf_idx]
    jitter = rng.normal(0.0, cfg.jitter_std, cfg.dim)
    weights = leaf.center.values + jitter
    params = RegressionTaskParams(ParamVector(weights), leaf_idx, leaf.path)
    train = _draw_batch(rng, cfg, weights, n_train)
    val = _draw_batch(rng, cfg, weights, n_val)
    test = _draw_batch(rng, cfg, weights, n_test)
    return TaskInstance(params, train, val, test, task_id)


def sample_task_batch(
    tree: ParameterTree,
    m: int,
    rng: np.random.Generator,
    n_train: int,
    n_val: int,
    n_test: int = 0,
    start_id: int = 0,
) -> list:
    """Sample m tasks with sequential task_ids start_id..start_id+m-1."""
    if m <= 0:
        raise ConfigError("batch size m must be positive")
    return [
        sample_task(tree, rng, n_train, n_val, n_test, task_id=start_id + i)
        for i in range(m)
    ]


class TaskSampler:
    """Stateful wrapper handing out batches with unique, increasing task_ids."""

    def __init__(self, tree: ParameterTree, rng: np.random.Generator, start_id: int = 0):
        self.tree = tree
        self.rng = rng
        self.next_id = int(start_id)

    def sample_batch(self, m: int, n_train: int, n_val: int, n_test: int = 0) -> list:
        batch = sample_task_batch(
            self.tree, m, self.rng, n_train, n_val, n_test, start_id=self.next_id
        )
        self.next_id += m
        return batch

    def sample(self, n_train: int, n_val: int, n_test: int = 0) -> TaskInstance:
        return self.sample_batch(1, n_train, n_val, n_test)[0]


def distribution_to_dict(tree: ParameterTree) -> dict:
    """JSON-ready audit dump: config plus every node center in BFS order."""
    centers = []
    queue = [tree.root]
    while queue:
        node = queue.pop(0)
        centers.append(node.center.to_list())
        queue.extend(node.children)
    return {"config": tree.config.to_dict(), "centers": centers}


def distribution_from_dict(d: dict) -> tuple:
    """Inverse of distribution_to_dict: (config, list of center ParamVectors)."""
    cfg = TaskGeneratorConfig.from_dict(d["config"])
    centers = [ParamVector(c) for c in d["centers"]]
    return cfg, centers
