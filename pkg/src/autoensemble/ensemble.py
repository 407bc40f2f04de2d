"""Greedy auto ensemble: bottom-up pairwise merging of detection groups.

At every level the pair of candidate nodes whose best merge scores the
highest validation mAP becomes siblings; the best merge is the argmax over
the operator set. Because o1/o2 are always in that set, a merged node is
never worse than either child on the selection ground truth.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from autoensemble.core import DetectionGroup, Difficulty, GroundTruth, canonical_sort
from autoensemble.errors import ConfigError, DomainError
from autoensemble.evaluation import EvalConfig, EvalReport, evaluate
from autoensemble.fusion import FusionOp, OpKind, OpParams, apply_op, default_ops, fuse_groups

logger = logging.getLogger(__name__)

# mAPs closer than this are ties; mathematically equal APs can differ in the last ulp
MAP_TIE_TOL = 1e-9


@dataclass(frozen=True)
class MergeNode:
    group: DetectionGroup
    accuracy: EvalReport
    children: Tuple["MergeNode", ...] = ()
    chosen_op: Optional[FusionOp] = None
    name: str = ""

    def __post_init__(self):
        if len(self.children) not in (0, 2):
            raise DomainError("a merge node has either zero or two children")
        if bool(self.children) != (self.chosen_op is not None):
            raise DomainError("internal nodes need an operator, leaves must not have one")
        if not self.name:
            if self.children:
                left, right = self.children
                name = f"{self.chosen_op.name}({left.name}, {right.name})"
            else:
                name = self.group.group_id
            object.__setattr__(self, "name", name)

    @property
    def map(self) -> float:
        return self.accuracy.map

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def walk(self):
        """Post-order traversal."""
        for child in self.children:
            yield from child.walk()
        yield self


@dataclass(frozen=True)
class LogEntry:
    level: int
    step: int
    left: str
    right: str
    op: str
    map: float


@dataclass(frozen=True)
class MergeStep:
    level: int
    step: int
    left: str
    right: str
    op: str
    map: float


@dataclass
class MergeTree:
    root: MergeNode
    leaves: List[MergeNode]
    log: List[LogEntry] = field(default_factory=list)
    steps: List[MergeStep] = field(default_factory=list)
    promotions: List[Tuple[int, str]] = field(default_factory=list)
    num_levels: int = 1

    @property
    def result(self) -> DetectionGroup:
        return self.root.group

    def internal_nodes(self) -> List[MergeNode]:
        return [n for n in self.root.walk() if not n.is_leaf]


def _check_ops(ops: Sequence[FusionOp]) -> List[FusionOp]:
    if not ops:
        raise ConfigError("operator set is empty")
    kinds = {op.kind for op in ops}
    missing = {OpKind.O1, OpKind.O2} - kinds
    if missing:
        raise ConfigError(
            "operator set must contain o1 and o2 (missing: %s)" % ", ".join(sorted(k.value for k in missing))
        )
    return sorted(ops, key=lambda op: op.precedence)


def _score_candidate(args) -> Tuple[DetectionGroup, EvalReport]:
    op, left, right, val_gt, cfg = args
    merged = apply_op(op, left, right)
    return merged, evaluate(merged, val_gt, cfg)


def _orient(a: MergeNode, b: MergeNode) -> Tuple[MergeNode, MergeNode]:
    return (a, b) if a.name <= b.name else (b, a)


def _evaluate_ops(di: MergeNode, dj: MergeNode, val_gt: GroundTruth, cfg: EvalConfig,
                  ops: Sequence[FusionOp], executor: Optional[Executor] = None):
    tasks = [(op, di.group, dj.group, val_gt, cfg) for op in ops]
    if executor is None:
        return [_score_candidate(t) for t in tasks]
    return list(executor.map(_score_candidate, tasks))


def argmax_first(scores: Sequence[float], tol: float = MAP_TIE_TOL) -> int:
    """Index of the first score within ``tol`` of the maximum."""
    top = max(scores)
    return next(k for k, s in enumerate(scores) if s >= top - tol)


def _select(di: MergeNode, dj: MergeNode, ops: Sequence[FusionOp], results) -> MergeNode:
    # ops arrive in precedence order
    best = argmax_first([rep.map for _, rep in results])
    merged, report = results[best]
    return MergeNode(merged, report, (di, dj), ops[best])


def merge_pair(di: MergeNode, dj: MergeNode, val_gt: GroundTruth, cfg: EvalConfig,
               ops: Optional[Sequence[FusionOp]] = None) -> MergeNode:
    """Try every operator on (di, dj) and keep the one with the highest validation mAP."""
    ops = _check_ops(ops if ops is not None else default_ops())
    return _select(di, dj, ops, _evaluate_ops(di, dj, val_gt, cfg, ops))


def leaf(group: DetectionGroup, val_gt: GroundTruth, cfg: EvalConfig) -> MergeNode:
    return MergeNode(group, evaluate(group, val_gt, cfg))


def num_levels(n_groups: int) -> int:
    """Tree depth L such that halving (rounding up) from n_groups reaches one node at level 1."""
    return 1 + math.ceil(math.log2(n_groups)) if n_groups > 1 else 1


def greedy_auto_ensemble(groups: Sequence[DetectionGroup], val_gt: GroundTruth, cfg: EvalConfig,
                         ops: Optional[Sequence[FusionOp]] = None, jobs: int = 1) -> MergeTree:
    """Build the merge tree level by level.

    Within a level, merged nodes go to the next level's candidate set and are
    not reconsidered; an odd node left over is promoted unchanged. Pair ties are
    broken by node name, operator ties by the fixed operator precedence. Pair
    evaluations are cached within a level. ``jobs > 1`` scores new pairs in
    worker processes; results are identical to ``jobs=1``.
    """
    if not groups:
        raise DomainError("greedy auto ensemble needs at least one detection group")
    ids = [g.group_id for g in groups]
    if len(set(ids)) != len(ids):
        raise DomainError(f"detection group ids must be unique, got {ids}")
    ops = _check_ops(ops if ops is not None else default_ops())

    leaves = [leaf(g, val_gt, cfg) for g in groups]
    n_levels = num_levels(len(leaves))
    tree = MergeTree(root=leaves[0], leaves=leaves, num_levels=n_levels)

    executor = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 and len(leaves) > 1 else None
    try:
        candidates = list(leaves)
        for level in range(n_levels, 1, -1):
            promoted: List[MergeNode] = []
            cache: Dict[Tuple[str, str], MergeNode] = {}
            step = 0
            while len(candidates) > 1:
                pairs = sorted((_orient(a, b) for a, b in itertools.combinations(candidates, 2)),
                               key=lambda p: (p[0].name, p[1].name))
                fresh = [p for p in pairs if (p[0].name, p[1].name) not in cache]
                tasks = [(op, l.group, r.group, val_gt, cfg) for l, r in fresh for op in ops]
                if executor is not None:
                    flat = list(executor.map(_score_candidate, tasks))
                else:
                    flat = [_score_candidate(t) for t in tasks]
                for k, (l, r) in enumerate(fresh):
                    results = flat[k * len(ops):(k + 1) * len(ops)]
                    for op, (_, report) in zip(ops, results):
                        tree.log.append(LogEntry(level, step, l.name, r.name, op.name, report.map))
                    cache[(l.name, r.name)] = _select(l, r, ops, results)

                # pairs are in name order, so the first (near-)maximum wins ties
                l, r = pairs[argmax_first([cache[(a.name, b.name)].map for a, b in pairs])]
                node = cache[(l.name, r.name)]
                tree.steps.append(MergeStep(level, step, l.name, r.name, node.chosen_op.name, node.map))
                promoted.append(node)
                candidates = [c for c in candidates if c is not l and c is not r]
                step += 1
            if len(candidates) == 1:
                tree.promotions.append((level, candidates[0].name))
                promoted.append(candidates[0])
            candidates = promoted
    finally:
        if executor is not None:
            executor.shutdown()

    if len(candidates) != 1:
        raise AssertionError(f"merge ended with {len(candidates)} nodes")
    tree.root = candidates[0]
    return tree


STRATEGIES = ("gae", "adj_nms", "wbf", "nms", "nmw_naive", "soft_nms", "first")

# final cross-detector routing: Adj-NMS for vehicles and pedestrians, WBF for cyclists
FINAL_ROUTING = {"vehicle": "adj_nms", "pedestrian": "adj_nms", "cyclist": "wbf"}


def default_routing() -> Dict[str, Tuple[str, OpParams]]:
    return {cls: (strategy, OpParams()) for cls, strategy in FINAL_ROUTING.items()}


@dataclass
class ClassEnsemble:
    group: DetectionGroup
    trees: Dict[str, MergeTree]
    strategies: Dict[str, str]


def per_class_ensemble_with_trees(
    routing: Mapping[str, Tuple[str, OpParams]],
    groups: Sequence[DetectionGroup],
    val_gt: GroundTruth,
    cfg: EvalConfig,
    ops: Optional[Sequence[FusionOp]] = None,
    jobs: int = 1,
    group_id: str = "ensemble",
    weights: Optional[Sequence[float]] = None,
) -> ClassEnsemble:
    """Route every class to its own strategy and stitch the per-class results together.

    ``gae`` runs the greedy search on class-restricted groups and ground truth,
    so the selection mAP is that class's AP. Operator strategies pool all
    groups once. ``first`` keeps the first group's boxes.
    """
    if not groups:
        raise DomainError("no detection groups")
    classes = set().union(*(g.classes for g in groups)) | val_gt.classes
    for cls in sorted(classes):
        if cls not in routing:
            raise ConfigError(f"no strategy configured for class {cls!r}")
    for cls, (strategy, _) in routing.items():
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r} for class {cls!r}; expected one of {STRATEGIES}")

    image_ids = sorted(set().union(*(g.per_image for g in groups)))
    merged: Dict[str, list] = {img: [] for img in image_ids}
    trees: Dict[str, MergeTree] = {}
    used: Dict[str, str] = {}
    for cls in sorted(classes):
        strategy, params = routing[cls]
        sub = [g.restrict_classes([cls]) for g in groups]
        if strategy == "gae":
            sub_gt = val_gt.restrict_classes([cls])
            if not _has_targets(sub_gt, cfg):
                logger.warning("class %r has no validation ground truth; keeping the first group", cls)
                result = sub[0]
                strategy = "first"
            else:
                class_ops = ops if ops is not None else default_ops(params=params)
                tree = greedy_auto_ensemble(sub, sub_gt, cfg, class_ops, jobs=jobs)
                trees[cls] = tree
                result = tree.result
        elif strategy == "first":
            result = sub[0]
        else:
            result = fuse_groups(FusionOp(OpKind.parse(strategy), params), sub, weights)
        used[cls] = strategy
        for img, dets in result.per_image.items():
            merged.setdefault(img, []).extend(dets.boxes)

    provenance = ", ".join(f"{c}={s}" for c, s in sorted(used.items()))
    out = DetectionGroup.from_boxes(group_id, {img: canonical_sort(b) for img, b in sorted(merged.items())},
                                    provenance)
    return ClassEnsemble(out, trees, used)


def per_class_ensemble(routing, groups, val_gt, cfg, ops=None, jobs=1) -> DetectionGroup:
    return per_class_ensemble_with_trees(routing, groups, val_gt, cfg, ops, jobs).group


def _has_targets(gt: GroundTruth, cfg: EvalConfig) -> bool:
    for boxes in gt.per_image.values():
        for g in boxes:
            if cfg.level is Difficulty.L2 or g.difficulty is Difficulty.L1:
                return True
    return False
