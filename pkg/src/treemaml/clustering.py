"""Online top-down (OTD) clustering with non-binary nodes.

Items arrive one at a time as (task_id, gradient vector) and are routed into a
bounded-depth tree. Each arrival runs a branch ladder at the current node:

1. no children yet: the item becomes the sole child;
2. one child: append (a pair is the smallest set with a similarity);
3. adding the item raises the children's mean pairwise similarity: descend
   toward the most similar child, nesting a new internal node around it when it
   is a leaf, or recursing into it when it is already a cluster (unless the
   depth budget forbids growing, in which case append);
4. adding the item lowers the mean by more than xi standard deviations of the
   existing pairwise similarities: the item is an outlier to the whole node, so
   the node and the item become siblings under a new parent (skipped when the
   demoted subtree would exceed the depth bound, falling through to 5);
5. otherwise: append as a new child, widening the node.

Internal nodes are represented by the arithmetic mean of their descendant leaf
vectors; similarities always compare these representatives.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .numerics import ParamVector, ZeroVectorError, set_similarity


class DuplicateTaskError(ValueError):
    """A task_id was inserted into the same tree twice."""


@dataclass(frozen=True)
class ClusterConfig:
    """Knobs of the insertion ladder.

    max_depth bounds the depth of every node (root is depth 0). xi scales the
    outlier threshold in branch 4. most_similar selects how branch 3 reads
    "most similar child": "argmax" picks the highest cosine similarity;
    "argmin" is the literal-minimizer alternative, kept behind this switch.
    """

    max_depth: int = 2
    xi: float = 1.0
    similarity: str = "cosine"
    most_similar: str = "argmax"

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")
        if self.similarity != "cosine":
            raise ValueError(f"unsupported similarity {self.similarity!r}")
        if self.most_similar not in ("argmax", "argmin"):
            raise ValueError("most_similar must be 'argmax' or 'argmin'")


class ClusterTreeNode:
    """One tree node; leaves carry a task_id, internal nodes carry children.

    node_id is unique within a tree and increases with creation order, which is
    what similarity ties break on. member_tasks and the running representative
    sum are maintained incrementally along every insertion path.
    """

    __slots__ = ("node_id", "depth", "task_id", "children", "member_tasks", "_rep_sum", "_count", "_ids", "_rep_vec")

    def __init__(self, ids: itertools.count, depth: int, task_id: Optional[int] = None,
                 vector: Optional[ParamVector] = None):
        self.node_id = next(ids)
        self.depth = depth
        self.task_id = task_id
        self.children: list = []
        self.member_tasks: set = set() if task_id is None else {task_id}
        self._rep_sum = None if vector is None else vector.values.copy()
        self._count = 0 if vector is None else 1
        self._ids = ids
        self._rep_vec: Optional[ParamVector] = None

    @classmethod
    def new_root(cls) -> "ClusterTreeNode":
        return cls(itertools.count(), depth=0)

    @property
    def is_leaf(self) -> bool:
        return self.task_id is not None

    @property
    def representative(self) -> ParamVector:
        if self._count == 0:
            raise ValueError("empty node has no representative")
        if self._rep_vec is None:
            self._rep_vec = ParamVector(self._rep_sum / self._count)
        return self._rep_vec

    def _absorb(self, vector: ParamVector) -> None:
        if self._rep_sum is None:
            self._rep_sum = vector.values.copy()
        else:
            self._rep_sum = self._rep_sum + vector.values
        self._count += 1
        self._rep_vec = None

    def __repr__(self) -> str:
        kind = f"task={self.task_id}" if self.is_leaf else f"children={len(self.children)}"
        return f"ClusterTreeNode(id={self.node_id}, depth={self.depth}, {kind})"


def _max_leaf_depth(node: ClusterTreeNode) -> int:
    if not node.children:
        return node.depth
    return max(_max_leaf_depth(c) for c in node.children)


def _shift_down(node: ClusterTreeNode) -> None:
    node.depth += 1
    for child in node.children:
        _shift_down(child)


def _most_similar_child(node: ClusterTreeNode, vector: ParamVector, cfg: ClusterConfig) -> int:
    """Index of the child whose representative is most similar to vector.

    Ties break to the lowest node_id.
    """
    pick_max = cfg.most_similar == "argmax"
    reps = np.stack([child.representative.values for child in node.children])
    norms = np.linalg.norm(reps, axis=1)
    scores = (reps @ vector.values) / (norms * vector.norm())
    best_idx = -1
    best_score = None
    best_id = None
    for idx, child in enumerate(node.children):
        score = float(scores[idx])
        better = (
            best_score is None
            or (score > best_score if pick_max else score < best_score)
            or (score == best_score and child.node_id < best_id)
        )
        if better:
            best_idx, best_score, best_id = idx, score, child.node_id
    return best_idx


def otd_insert(node: ClusterTreeNode, item: Tuple[int, ParamVector], cfg: ClusterConfig) -> ClusterTreeNode:
    """Insert (task_id, vector) into the tree rooted at node.

    Returns the node now occupying node's position: node itself, or the new
    parent created by branch 4. Callers must use the return value as the new
    root. Raises DuplicateTaskError for a repeated task_id and ZeroVectorError
    for a zero-norm vector (cosine similarity would be undefined).
    """
    task_id, vector = item
    if node.is_leaf:
        raise ValueError("insertion target must be an internal node")
    if task_id in node.member_tasks:
        raise DuplicateTaskError(f"task {task_id} already in tree")
    if vector.norm() == 0.0:
        raise ZeroVectorError("cannot cluster a zero gradient")
    return _insert(node, task_id, vector, cfg)


def _append_leaf(node: ClusterTreeNode, task_id: int, vector: ParamVector) -> None:
    node.children.append(ClusterTreeNode(node._ids, node.depth + 1, task_id, vector))


def _insert(node: ClusterTreeNode, task_id: int, vector: ParamVector, cfg: ClusterConfig) -> ClusterTreeNode:
    children = node.children

    if len(children) <= 1:
        node._absorb(vector)
        node.member_tasks.add(task_id)
        _append_leaf(node, task_id, vector)
        return node

    reps = [child.representative for child in children]
    before = set_similarity(reps)
    after = set_similarity(reps + [vector])

    if after.mean_pairwise > before.mean_pairwise:
        # Branch 3: the item agrees with this node; push it toward its closest
        # child unless the depth budget only allows widening here.
        node._absorb(vector)
        node.member_tasks.add(task_id)
        if node.depth + 1 == cfg.max_depth:
            _append_leaf(node, task_id, vector)
            return node
        idx = _most_similar_child(node, vector, cfg)
        target = children[idx]
        if target.is_leaf:
            group = ClusterTreeNode(node._ids, node.depth + 1)
            target.depth += 1
            group.children = [target]
            group.member_tasks = set(target.member_tasks)
            group._rep_sum = target._rep_sum.copy()
            group._count = target._count
            group._absorb(vector)
            group.member_tasks.add(task_id)
            _append_leaf(group, task_id, vector)
            children[idx] = group
        else:
            children[idx] = _insert(target, task_id, vector, cfg)
        return node

    threshold = before.mean_pairwise - cfg.xi * before.std_pairwise
    if after.mean_pairwise < threshold and _max_leaf_depth(node) + 1 <= cfg.max_depth:
        # Branch 4: outlier; this whole node and the item become siblings
        # under a fresh parent occupying the node's slot.
        parent = ClusterTreeNode(node._ids, node.depth)
        _shift_down(node)
        parent.children = [node]
        parent.member_tasks = set(node.member_tasks)
        parent._rep_sum = node._rep_sum.copy()
        parent._count = node._count
        parent._absorb(vector)
        parent.member_tasks.add(task_id)
        _append_leaf(parent, task_id, vector)
        return parent

    # Branch 5 (and branch 4's depth fallback): widen this node.
    node._absorb(vector)
    node.member_tasks.add(task_id)
    _append_leaf(node, task_id, vector)
    return node


def build_tree(items: Sequence[Tuple[int, ParamVector]], cfg: ClusterConfig) -> ClusterTreeNode:
    """Insert items in order into a fresh tree and return the final root."""
    items = list(items)
    if not items:
        raise ValueError("build_tree needs at least one item")
    root = ClusterTreeNode.new_root()
    for item in items:
        root = otd_insert(root, item, cfg)
    return root


def clusters_at_level(root: ClusterTreeNode, k: int) -> list:
    """Partition of the tree's tasks induced by cutting at depth k.

    Nodes sitting exactly at depth k contribute their member sets; leaves that
    never grew to depth k contribute themselves as singletons. Returned in
    depth-first order, members sorted, so the output is deterministic for a
    given insertion sequence.
    """
    if k < 1:
        raise ValueError("level k must be >= 1")
    out: list = []

    def walk(node: ClusterTreeNode) -> None:
        if node.depth == k or node.is_leaf:
            out.append(tuple(sorted(node.member_tasks)))
            return
        for child in node.children:
            walk(child)

    for child in root.children:
        walk(child)
    return out


def tree_to_dict(node: ClusterTreeNode) -> dict:
    """JSON-ready dump: node_id, depth, member_tasks, children (recursive)."""
    return {
        "node_id": node.node_id,
        "depth": node.depth,
        "member_tasks": sorted(node.member_tasks),
        "children": [tree_to_dict(c) for c in node.children],
    }
