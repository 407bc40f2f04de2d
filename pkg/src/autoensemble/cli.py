"""Batch front-end: ``autoensemble eval | fuse | gae``.

Exit codes: 0 success, 2 usage error, 3 parse error, 4 configuration error,
5 evaluation/domain error.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click

from autoensemble.core import DEFAULT_CLASSES, DetectionGroup, Difficulty
from autoensemble.ensemble import FINAL_ROUTING, STRATEGIES, per_class_ensemble_with_trees
from autoensemble.errors import AutoEnsembleError, ConfigError
from autoensemble.evaluation import EvalConfig, EvalReport, default_waymo_config, evaluate
from autoensemble.formats import load_detections, load_ground_truth, save_detections
from autoensemble.fusion import FusionOp, OpKind, OpParams, fuse_groups
from autoensemble import report

logger = logging.getLogger("autoensemble")

FUSE_OPS = ("nms", "soft_nms", "adj_nms", "nmw_naive", "wbf")


@dataclass
class RunConfig:
    groups: List[Path]
    gt: Optional[Path] = None
    select_gt: Optional[Path] = None
    weights: Optional[List[float]] = None
    vocabulary: Tuple[str, ...] = DEFAULT_CLASSES
    eval_iou: Dict[str, float] = field(default_factory=dict)
    level: Difficulty = Difficulty.L2
    max_dets: Optional[int] = None
    strategy: Dict[str, str] = field(default_factory=dict)
    op: Optional[str] = None
    ops: Optional[List[str]] = None
    params: OpParams = OpParams()
    out: Optional[Path] = None
    log: Optional[Path] = None
    metrics: Optional[Path] = None
    figures: Optional[Path] = None
    jobs: int = 1
    name: Optional[str] = None

    def eval_config(self) -> EvalConfig:
        base = default_waymo_config()
        thresholds = dict(base.per_class_iou)
        thresholds.update(self.eval_iou)
        return EvalConfig(thresholds, level=self.level, max_dets_per_image=self.max_dets)


def parse_class_floats(text: Optional[str], vocabulary: Sequence[str]) -> Dict[str, float]:
    """``0.5`` (every class) or ``vehicle=0.7,pedestrian=0.5``."""
    if not text:
        return {}
    try:
        if "=" not in text:
            value = float(text)
            return {c: value for c in vocabulary}
        out = {}
        for item in text.split(","):
            cls, _, value = item.partition("=")
            cls = cls.strip()
            if cls not in vocabulary:
                raise ConfigError(f"unknown class {cls!r} in {text!r}")
            out[cls] = float(value)
        return out
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"cannot parse per-class values {text!r}") from None


def parse_strategy(text: Optional[str], vocabulary: Sequence[str], default: str = "gae") -> Dict[str, str]:
    """Per-class routing: ``vehicle=adj_nms,pedestrian=gae``, a single strategy for all, or ``final``."""
    routing = {c: default for c in vocabulary}
    if not text:
        return routing
    text = text.strip()
    if text == "final":
        routing.update({c: s for c, s in FINAL_ROUTING.items() if c in routing})
        return routing
    if "=" not in text:
        return {c: _check_strategy(text) for c in vocabulary}
    for item in text.split(","):
        cls, _, strategy = item.partition("=")
        cls = cls.strip()
        if cls not in vocabulary:
            raise ConfigError(f"unknown class {cls!r} in strategy {text!r}")
        routing[cls] = _check_strategy(strategy.strip())
    return routing


def _check_strategy(name: str) -> str:
    if name not in STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}; expected one of {', '.join(STRATEGIES)}")
    return name


def _load_groups(cfg: RunConfig) -> List[DetectionGroup]:
    if not cfg.groups:
        raise ConfigError("at least one detection file is required")
    groups = [load_detections(p, cfg.vocabulary) for p in cfg.groups]
    ids = [g.group_id for g in groups]
    if len(set(ids)) != len(ids):
        stems = [Path(p).stem for p in cfg.groups]
        ids = stems if len(set(stems)) == len(stems) else [f"{s}#{k}" for k, s in enumerate(stems)]
        groups = [g.renamed(i) for g, i in zip(groups, ids)]
    if cfg.weights is not None and len(cfg.weights) != len(groups):
        raise ConfigError(f"{len(cfg.weights)} weights for {len(groups)} detection files")
    return groups


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"{what} is required")
    return value


def cmd_eval(cfg: RunConfig, echo=click.echo) -> EvalReport:
    """Evaluate one detection file and print a table row for it."""
    groups = _load_groups(cfg)
    gt = load_ground_truth(_require(cfg.gt, "ground truth (--gt)"), cfg.vocabulary)
    ecfg = cfg.eval_config()
    rows = []
    for g in groups:
        rows.append((g.group_id, evaluate(g, gt, ecfg)))
    echo(report.format_table(rows))
    if cfg.metrics is not None:
        report.write_json({name: rep.to_dict() for name, rep in rows}, cfg.metrics)
    if cfg.figures is not None:
        cfg.figures.mkdir(parents=True, exist_ok=True)
        for name, rep in rows:
            report.plot_pr_curves(rep, cfg.figures / f"pr_{_safe(name)}.png", title=name)
    return rows[0][1]


def cmd_fuse(cfg: RunConfig, echo=click.echo) -> DetectionGroup:
    """Pool all groups and apply one named operator. No ground truth involved."""
    name = _require(cfg.op, "operator (--op)")
    if name not in FUSE_OPS:
        raise ConfigError(f"unknown operator {name!r}; expected one of {', '.join(FUSE_OPS)}")
    groups = _load_groups(cfg)
    op = FusionOp(OpKind.parse(name), cfg.params)
    merged = fuse_groups(op, groups, cfg.weights, group_id=cfg.name or f"{name}_fused")
    out = _require(cfg.out, "output path (--out)")
    save_detections(merged, out)
    echo(f"wrote {merged.num_boxes} boxes over {len(merged.per_image)} images to {out}")
    return merged


def _parse_ops(names: Optional[Sequence[str]], params: OpParams) -> Optional[List[FusionOp]]:
    if not names:
        return None
    return [FusionOp(OpKind.parse(n), params) for n in names]


def cmd_gae(cfg: RunConfig, echo=click.echo):
    """Per-class routing with greedy auto ensemble; writes detections, trace, metrics and figures."""
    groups = _load_groups(cfg)
    gt = load_ground_truth(_require(cfg.gt, "ground truth (--gt)"), cfg.vocabulary)
    select_gt = load_ground_truth(cfg.select_gt, cfg.vocabulary) if cfg.select_gt else gt
    ecfg = cfg.eval_config()
    strategy = cfg.strategy or parse_strategy(None, cfg.vocabulary)
    routing = {c: (s, cfg.params) for c, s in strategy.items()}
    ops = _parse_ops(cfg.ops, cfg.params)

    result = per_class_ensemble_with_trees(routing, groups, select_gt, ecfg, ops=ops, jobs=cfg.jobs,
                                           group_id=cfg.name or "gae", weights=cfg.weights)
    out = _require(cfg.out, "output path (--out)")
    save_detections(result.group, out)

    trace = report.format_trace(result.trees, result.strategies)
    if cfg.log is not None:
        Path(cfg.log).write_text(trace, encoding="utf-8")

    rows = [(g.group_id, evaluate(g, gt, ecfg)) for g in groups]
    final = evaluate(result.group, gt, ecfg)
    rows.append((result.group.group_id, final))
    echo(report.format_table(rows))
    if cfg.metrics is not None:
        report.write_json({
            "inputs": {name: rep.to_dict() for name, rep in rows[:-1]},
            "result": final.to_dict(),
            "strategies": result.strategies,
            "trees": {cls: report.tree_to_dict(t) for cls, t in result.trees.items()},
        }, cfg.metrics)
    if cfg.figures is not None:
        cfg.figures.mkdir(parents=True, exist_ok=True)
        report.plot_pr_curves(final, cfg.figures / "pr_result.png", title=result.group.group_id)
        if result.trees:
            report.plot_merge_trace(result.trees, cfg.figures / "merge_trace.png")
    return result


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def _run(thunk):
    try:
        thunk()
    except AutoEnsembleError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)


def _vocab(ctx) -> Tuple[str, ...]:
    return ctx.obj["vocabulary"]


def _op_params(iou_thresh, soft_sigma, soft_method, score_floor, class_agnostic, model_count, max_per_image):
    return OpParams(iou_thresh=iou_thresh, soft_sigma=soft_sigma, soft_method=soft_method,
                    score_floor=score_floor, class_aware=not class_agnostic,
                    wbf_model_count=model_count, max_per_image=max_per_image)


def _weights(text: Optional[str]) -> Optional[List[float]]:
    if not text:
        return None
    try:
        return [float(w) for w in text.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse weights {text!r}") from None


_path = click.Path(dir_okay=False, path_type=Path)
_in_path = click.Path(exists=True, dir_okay=False, path_type=Path)


def operator_options(fn):
    options = [
        click.option("--iou-thresh", type=float, default=None,
                     help="Operator IoU threshold (default 0.5, WBF 0.55)."),
        click.option("--soft-sigma", type=float, default=0.5, show_default=True),
        click.option("--soft-method", type=click.Choice(["gaussian", "linear"]), default="gaussian",
                     show_default=True),
        click.option("--score-floor", type=float, default=0.001, show_default=True),
        click.option("--class-agnostic", is_flag=True, help="Let boxes of different classes suppress each other."),
        click.option("--model-count", type=int, default=None, help="N in the WBF score rescaling."),
        click.option("--max-per-image", type=int, default=None),
        click.option("--weights", default=None, help="Comma-separated per-file weights (WBF)."),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def eval_options(fn):
    options = [
        click.option("--level", type=click.Choice(["l1", "l2"], case_sensitive=False), default="l2",
                     show_default=True),
        click.option("--max-dets", type=int, default=None),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


@click.group()
@click.option("--seed-vocabulary", default=",".join(DEFAULT_CLASSES), show_default=True,
              help="Comma-separated class labels; integer category ids index this list from 1.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, seed_vocabulary, verbose):
    """Detection-group evaluation, fusion and greedy auto ensemble."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s | %(name)s | %(message)s")
    vocab = tuple(c.strip() for c in seed_vocabulary.split(",") if c.strip())
    if not vocab:
        raise click.BadParameter("vocabulary is empty", param_hint="--seed-vocabulary")
    ctx.ensure_object(dict)
    ctx.obj["vocabulary"] = vocab


@main.command("eval")
@click.argument("groups", nargs=-1, required=True, type=_in_path)
@click.option("--gt", required=True, type=_in_path, help="Ground-truth file.")
@click.option("--iou-thresh", default=None,
              help="Positive IoU threshold: one value, or per class like vehicle=0.7,cyclist=0.5.")
@eval_options
@click.option("--out", "metrics", type=_path, default=None, help="Write metrics JSON here.")
@click.option("--figures", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Directory for PR-curve figures.")
@click.pass_context
def eval_cmd(ctx, groups, gt, iou_thresh, level, max_dets, metrics, figures):
    """Per-class AP and mAP of one or more detection files."""
    vocab = _vocab(ctx)

    def run():
        cmd_eval(RunConfig(list(groups), gt=gt, vocabulary=vocab,
                           eval_iou=parse_class_floats(iou_thresh, vocab), level=Difficulty.parse(level),
                           max_dets=max_dets, metrics=metrics, figures=figures))

    _run(run)


@main.command("fuse")
@click.argument("groups", nargs=-1, required=True, type=_in_path)
@click.option("--op", required=True, help=f"One of: {', '.join(FUSE_OPS)}.")
@operator_options
@click.option("--out", required=True, type=_path)
@click.option("--name", default=None, help="group_id of the fused output.")
@click.pass_context
def fuse_cmd(ctx, groups, op, iou_thresh, soft_sigma, soft_method, score_floor, class_agnostic,
             model_count, max_per_image, weights, out, name):
    """Pool detection files and apply a single fusion operator."""
    vocab = _vocab(ctx)

    def run():
        params = _op_params(iou_thresh, soft_sigma, soft_method, score_floor, class_agnostic,
                            model_count, max_per_image)
        cmd_fuse(RunConfig(list(groups), vocabulary=vocab, op=op, params=params,
                           weights=_weights(weights), out=out, name=name))

    _run(run)


@main.command("gae")
@click.argument("groups", nargs=-1, required=True, type=_in_path)
@click.option("--gt", required=True, type=_in_path, help="Ground truth used for final metrics.")
@click.option("--select-gt", type=_in_path, default=None,
              help="Held-out ground truth for operator/pair selection (default: --gt).")
@click.option("--strategy", default=None,
              help="Per-class routing, e.g. vehicle=adj_nms,pedestrian=gae,cyclist=wbf; 'final' for "
                   "vehicle,pedestrian=adj_nms and cyclist=wbf. Default: gae for every class.")
@click.option("--ops", default=None, help="Searched operators (default nms,adj_nms,nmw_naive,o1,o2).")
@operator_options
@click.option("--eval-iou", default=None, help="Positive IoU thresholds for evaluation, as in `eval --iou-thresh`.")
@eval_options
@click.option("--out", required=True, type=_path, help="Merged detections.")
@click.option("--log", type=_path, default=None, help="Merge-tree trace (text).")
@click.option("--metrics", type=_path, default=None, help="Metrics and tree report (JSON).")
@click.option("--figures", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--name", default=None)
@click.pass_context
def gae_cmd(ctx, groups, gt, select_gt, strategy, ops, iou_thresh, soft_sigma, soft_method, score_floor,
            class_agnostic, model_count, max_per_image, weights, eval_iou, level, max_dets, out, log, metrics,
            figures, jobs, name):
    """Greedy auto ensemble of detection files."""
    vocab = _vocab(ctx)

    def run():
        if jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        params = _op_params(iou_thresh, soft_sigma, soft_method, score_floor, class_agnostic,
                            model_count, max_per_image)
        op_names = [o.strip() for o in ops.split(",") if o.strip()] if ops else None
        cmd_gae(RunConfig(list(groups), gt=gt, select_gt=select_gt, vocabulary=vocab,
                          eval_iou=parse_class_floats(eval_iou, vocab), level=Difficulty.parse(level),
                          max_dets=max_dets, strategy=parse_strategy(strategy, vocab), ops=op_names,
                          params=params, weights=_weights(weights), out=out, log=log, metrics=metrics,
                          figures=figures, jobs=jobs, name=name))

    _run(run)


if __name__ == "__main__":
    main()
