"""Console tables, merge-tree traces, JSON metrics and figures."""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple

from matplotlib.figure import Figure

from autoensemble.ensemble import MergeNode, MergeTree
from autoensemble.evaluation import EvalReport

# PNG metadata carries a timestamp-free software tag only; keeps figure bytes reproducible
_PNG_META = {"Software": "autoensemble"}


def format_table(rows: Sequence[Tuple[str, EvalReport]], classes: Optional[Sequence[str]] = None) -> str:
    """Fixed-width AP table, one row per method, values in percent."""
    if classes is None:
        seen: List[str] = []
        for _, rep in rows:
            for c in rep.evaluated_classes:
                if c not in seen:
                    seen.append(c)
        classes = seen
    level = rows[0][1].level.value if rows else "L2"
    total_col = f"AP/{level}"
    name_w = max([len("Method")] + [len(name) for name, _ in rows])
    col_w = max([len(total_col)] + [len(c) for c in classes]) + 2
    header = "Method".ljust(name_w) + " |" + "".join(c.rjust(col_w) for c in classes) + " |" + total_col.rjust(col_w)
    rule = "-" * len(header)
    lines = [rule, header, "=" * len(header)]
    for name, rep in rows:
        cells = []
        for c in classes:
            res = rep.per_class.get(c)
            cells.append((f"{100 * res.ap:.2f}" if res is not None and res.num_gt else "-").rjust(col_w))
        lines.append(name.ljust(name_w) + " |" + "".join(cells) + " |" + f"{100 * rep.map:.2f}".rjust(col_w))
    lines.append(rule)
    return "\n".join(lines)


def format_trace(trees: Mapping[str, MergeTree], strategies: Optional[Mapping[str, str]] = None) -> str:
    """Human-readable record of every pair/operator scored and each step's winner."""
    out: List[str] = []
    for cls in sorted(set(trees) | set(strategies or {})):
        if cls not in trees:
            out.append(f"== class {cls}: strategy {strategies[cls]} (no search)")
            out.append("")
            continue
        tree = trees[cls]
        out.append(f"== class {cls}: greedy auto ensemble over {len(tree.leaves)} groups, {tree.num_levels} levels")
        for node in tree.leaves:
            out.append(f"leaf {node.name}  mAP={node.map:.6f}")
        for level in range(tree.num_levels, 1, -1):
            entries = [e for e in tree.log if e.level == level]
            steps = [s for s in tree.steps if s.level == level]
            if not entries and not steps:
                continue
            out.append(f"-- level {level}")
            for e in entries:
                out.append(f"  eval  {e.left} + {e.right}  op={e.op:<9} mAP={e.map:.6f}")
            for s in steps:
                out.append(f"  merge step {s.step}: {s.left} + {s.right} -> {s.op}  mAP={s.map:.6f}")
            for lvl, name in tree.promotions:
                if lvl == level:
                    out.append(f"  promote {name}")
        out.append(f"root {tree.root.name}  mAP={tree.root.map:.6f}")
        out.append("")
    return "\n".join(out)


def node_to_dict(node: MergeNode) -> dict:
    d = {"name": node.name, "group_id": node.group.group_id, "mAP": node.map,
         "per_class_AP": node.accuracy.per_class_ap}
    if node.children:
        d["op"] = node.chosen_op.name
        d["children"] = [node_to_dict(c) for c in node.children]
    return d


def tree_to_dict(tree: MergeTree) -> dict:
    return {
        "num_levels": tree.num_levels,
        "leaves": [n.name for n in tree.leaves],
        "root": node_to_dict(tree.root),
        "steps": [vars(s) for s in tree.steps],
        "log": [vars(e) for e in tree.log],
    }


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def plot_pr_curves(report: EvalReport, path, title: str = "") -> Path:
    """One precision/recall panel per evaluated class."""
    classes = report.evaluated_classes or list(report.per_class)
    fig = Figure(figsize=(3.2 * max(len(classes), 1), 3.0))
    axes = fig.subplots(1, max(len(classes), 1), squeeze=False)[0]
    for ax, cls in zip(axes, classes):
        res = report.per_class[cls]
        recall, precision = res.curve.recall, res.curve.precision
        if len(recall):
            ax.step([0.0, *recall], [precision[0], *precision], where="post", lw=1.2)
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_title(f"{cls}  AP={100 * res.ap:.2f}", fontsize=9)
    axes[0].set_ylabel("precision")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    return path


def plot_merge_trace(trees: Mapping[str, MergeTree], path) -> Path:
    """Per class: leaf mAPs, then the mAP after each merge step, annotated with the chosen operator."""
    classes = sorted(trees)
    fig = Figure(figsize=(4.0 * max(len(classes), 1), 3.0))
    axes = fig.subplots(1, max(len(classes), 1), squeeze=False)[0]
    for ax, cls in zip(axes, classes):
        tree = trees[cls]
        leaf_maps = [n.map for n in tree.leaves]
        ax.scatter([0] * len(leaf_maps), leaf_maps, marker="o", s=14, label="leaves")
        xs = list(range(1, len(tree.steps) + 1))
        ys = [s.map for s in tree.steps]
        if xs:
            ax.plot(xs, ys, marker="s", ms=4, lw=1.0, label="merges")
            for x, s in zip(xs, tree.steps):
                ax.annotate(s.op, (x, s.map), textcoords="offset points", xytext=(0, 4),
                            ha="center", fontsize=7)
        ax.margins(y=0.15)
        ax.set_xlabel("merge step")
        ax.set_title(cls, fontsize=9)
        ax.set_xticks(range(0, len(xs) + 1))
    axes[0].set_ylabel("validation mAP")
    axes[0].legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    return path
