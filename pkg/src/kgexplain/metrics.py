"""Explanation-quality metrics: Fidelity+, Fidelity-, Sparsity, and the
hit-rate-on-removal family (HDR:m).

Fidelity uses probability scores and measures the prediction change when
the explanation mask is removed from (F+) or kept as (F-) the input
graph. HDR:m deletes the triples on the top-m explanation paths and
counts a hit when the raw score does not increase; a tie therefore
counts as a hit, exactly as the strict-inequality indicator dictates.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .explain import (
    EdgeScoreMatrix,
    ExplainConfig,
    Explanation,
    generate_paths,
    prepare_computation_graph,
    train_explainer,
)
from .kgraph import ComputationGraph, KnowledgeGraph, TargetTriple
from .model import KgcModel, rank_target, score_target_masked

HDR_PATH_COUNTS = (1, 3, 5)


@dataclass
class MetricReport:
    fidelity_plus: float
    fidelity_minus: float
    sparsity: float
    h_delta_r: dict
    n_samples: int

    def to_json_dict(self):
        return {
            "fidelity_plus": self.fidelity_plus,
            "fidelity_minus": self.fidelity_minus,
            "sparsity": self.sparsity,
            "h_delta_r": {str(m): v for m, v in self.h_delta_r.items()},
            "n_samples": self.n_samples,
        }


def fidelity_plus(model: KgcModel, gc: ComputationGraph, mask: EdgeScoreMatrix,
                  target: TargetTriple, base_prob: float | None = None) -> float:
    """|score on gc - score on gc with the explanation removed| via the
    complement mask (1 - M)."""
    if base_prob is None:
        base_prob = _unmasked_score(model, gc, target).probability
    removed = score_target_masked(model, gc, mask.complement(), target).probability
    return abs(base_prob - removed)


def fidelity_minus(model: KgcModel, gc: ComputationGraph, mask: EdgeScoreMatrix,
                   target: TargetTriple, base_prob: float | None = None) -> float:
    """|score on the explanatory subgraph - score on gc|."""
    if base_prob is None:
        base_prob = _unmasked_score(model, gc, target).probability
    kept = score_target_masked(model, gc, mask, target).probability
    return abs(kept - base_prob)


def sparsity(mask: EdgeScoreMatrix, gc: ComputationGraph | None = None) -> float:
    """1 - mean mask value over the graph's edge positions (1 when empty)."""
    n_edges = gc.num_pairs if gc is not None else len(mask.values)
    if n_edges == 0:
        return 1.0
    return 1.0 - float(mask.values.sum()) / n_edges


def _graph_without_paths(gc: ComputationGraph, explanation: Explanation, m: int):
    rows = []
    for p in explanation.paths[: min(m, len(explanation.paths))]:
        rows.extend(p.triple_indices)
    if not rows:
        return gc
    return gc.without_triples(sorted(set(rows)))


def h_delta_r(model: KgcModel, gc: ComputationGraph, explanation: Explanation,
              target: TargetTriple, m: int, base_raw: float | None = None) -> bool:
    """Hit when deleting the top-m paths' triples does not raise the raw score."""
    if m < 1:
        raise ContractError("m must be >= 1")
    if base_raw is None:
        base_raw = _unmasked_score(model, gc, target).raw
    gt = _graph_without_paths(gc, explanation, m)
    removed_raw = _unmasked_score(model, gt, target).raw
    return not (removed_raw > base_raw)


def _unmasked_score(model, gc, target):
    return score_target_masked(model, gc, None, target)


@dataclass
class EvalConfig:
    sample_num: int = 20
    threshold_rule: str = "prob"      # "prob" (> 0.5) or "rank1"
    k_hop: int = 1
    k_core: int = 2
    max_nodes: int | None = 1000
    seed: int = 0
    workers: int = 1
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def validate(self):
        if self.sample_num < 1:
            raise ContractError("sample_num must be >= 1")
        if self.threshold_rule not in ("prob", "rank1"):
            raise ContractError("threshold_rule must be 'prob' or 'rank1'")


def measure_explanation(model: KgcModel, gc: ComputationGraph, target: TargetTriple,
                        mask: EdgeScoreMatrix, explanation: Explanation):
    """Metric row for an already-computed explanation; a single unmasked
    forward pass feeds every metric."""
    base = _unmasked_score(model, gc, target)
    row = {
        "head": target.head,
        "relation": target.relation,
        "tail": target.tail,
        "f_plus": fidelity_plus(model, gc, mask, target, base_prob=base.probability),
        "f_minus": fidelity_minus(model, gc, mask, target, base_prob=base.probability),
        "sparsity": sparsity(mask, gc),
    }
    for m in HDR_PATH_COUNTS:
        row[f"hit{m}"] = bool(
            h_delta_r(model, gc, explanation, target, m, base_raw=base.raw)
        )
    return row


def evaluate_target(model: KgcModel, gc: ComputationGraph, target: TargetTriple,
                    cfg: ExplainConfig):
    """Explain one target and measure it."""
    t0 = time.perf_counter()
    result = train_explainer(model, gc, target, cfg)
    explanation = generate_paths(gc, result.mask, target, cfg.num_paths, cfg.power_order)
    explanation.loss_trace = result.loss_trace
    row = measure_explanation(model, gc, target, result.mask, explanation)
    row["epochs"] = cfg.epochs
    row["wall_time_s"] = time.perf_counter() - t0
    return row, explanation


def _is_explainable(model, g, target, cfg: EvalConfig):
    gc = prepare_computation_graph(g, target, cfg.k_hop, cfg.k_core, cfg.max_nodes)
    if cfg.threshold_rule == "prob":
        return _unmasked_score(model, gc, target).probability > 0.5
    return rank_target(model, gc, target) == 1


def _evaluate_one(args):
    model, g, target, cfg = args
    gc = prepare_computation_graph(g, target, cfg.k_hop, cfg.k_core, cfg.max_nodes)
    row, _ = evaluate_target(model, gc, target, cfg.explain)
    return row


def evaluate_batch(model: KgcModel, g: KnowledgeGraph, candidates, cfg: EvalConfig):
    """Filter candidates by the explainability rule, sample deterministically,
    explain each, and aggregate a MetricReport plus one CSV-ready row per
    target."""
    cfg.validate()
    explainable = [t for t in candidates if _is_explainable(model, g, t, cfg)]
    if not explainable:
        raise DataError(
            "no explainable target triples under rule "
            f"{cfg.threshold_rule!r}; relax the threshold or switch rules"
        )
    rng = np.random.default_rng(cfg.seed)
    if len(explainable) > cfg.sample_num:
        idx = rng.choice(len(explainable), size=cfg.sample_num, replace=False)
        sampled = [explainable[i] for i in sorted(idx.tolist())]
    else:
        sampled = explainable
    jobs = [(model, g, t, cfg) for t in sampled]
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_evaluate_one, jobs))
    else:
        rows = [_evaluate_one(j) for j in jobs]
    report = MetricReport(
        fidelity_plus=float(np.mean([r["f_plus"] for r in rows])),
        fidelity_minus=float(np.mean([r["f_minus"] for r in rows])),
        sparsity=float(np.mean([r["sparsity"] for r in rows])),
        h_delta_r={m: float(np.mean([r[f"hit{m}"] for r in rows])) for m in HDR_PATH_COUNTS},
        n_samples=len(rows),
    )
    return report, rows


CSV_COLUMNS = (
    "head", "relation", "tail", "f_plus", "f_minus", "sparsity",
    "hit1", "hit3", "hit5", "epochs", "wall_time_s",
)


def rows_to_csv(rows) -> str:
    out = [",".join(CSV_COLUMNS)]
    for r in rows:
        cells = []
        for c in CSV_COLUMNS:
            v = r[c]
            if isinstance(v, bool):
                cells.append("1" if v else "0")
            elif isinstance(v, float):
                cells.append(repr(v))
            else:
                cells.append(str(v))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def report_to_json(report: MetricReport) -> str:
    return json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
