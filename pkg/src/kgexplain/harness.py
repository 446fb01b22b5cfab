"""Synthetic planted-path instances and the desk-scale suite driver.

An instance plants node-disjoint head->tail paths that all use one
"explains" relation, adds the asserted (head, target, tail) triple to the
training set, and sprinkles noise. Distractor edges are rejection-sampled
so no head->tail route of length <= the planted length exists besides the
planted paths themselves; optional decoy paths deliberately add
equal-length routes over noise relations so ablations have competing
candidates to mis-rank.
"""

from __future__ import annotations

import json
import math
import time
import tracemalloc
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import kernels
from .errors import DataError
from .explain import ExplainConfig, generate_paths, prepare_computation_graph, train_explainer
from .kgraph import KnowledgeGraph, TargetTriple, full_graph
from .metrics import HDR_PATH_COUNTS, measure_explanation
from .model import KgcModel, ModelConfig, train_kgc

EXPLAIN_REL = 0
TARGET_REL = 1
NOISE_REL_BASE = 2


@dataclass
class PlantedConfig:
    n_entities: int = 40
    n_relations: int = 6
    n_planted_paths: int = 2
    path_len: int = 2
    n_distractors: int = 30
    n_decoy_paths: int = 0
    n_context_groups: int = 4
    seed: int = 0


@dataclass
class PlantedInstance:
    graph: KnowledgeGraph
    target: TargetTriple
    planted_paths: list
    decoy_paths: list
    distractor_edges: list
    seed: int


def _directed_distances(n, edges, start, reverse=False):
    adj = [[] for _ in range(n)]
    for h, _, t in edges:
        if reverse:
            adj[t].append(h)
        else:
            adj[h].append(t)
    dist = [-1] * n
    dist[start] = 0
    frontier = [start]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return dist


def generate_planted(config: PlantedConfig) -> PlantedInstance:
    """Deterministic planted instance; raises DataError when infeasible.

    Context groups replicate the (explains-chain => target) pattern on
    disjoint entity pairs so a trained model has to rely on the chain
    messages rather than memorised embeddings. Decoy paths connect head to
    tail at the planted length over decoy-only noise relations, giving the
    mask something plausible but unsupportive to rank.
    """
    cfg = config
    if cfg.path_len not in (1, 2, 3, 4):
        raise DataError("path_len must be in {1, 2, 3, 4}")
    inner = cfg.path_len - 1
    reserved = (
        2
        + inner * (cfg.n_planted_paths + cfg.n_decoy_paths)
        + cfg.n_context_groups * (2 + inner)
        - (2 if cfg.n_context_groups >= 2 else 0)
    )
    if cfg.n_entities < reserved:
        raise DataError(
            f"n_entities={cfg.n_entities} cannot host the requested disjoint paths "
            f"and context groups ({reserved} nodes needed)"
        )
    needs_noise = cfg.n_distractors > 0 or cfg.n_decoy_paths > 0
    if cfg.n_relations < 2 + (1 if needs_noise else 0):
        raise DataError("n_relations too small: need explains, target, and noise relations")
    rng = np.random.default_rng(cfg.seed)
    head, tail = 0, 1
    noise_rels = list(range(NOISE_REL_BASE, cfg.n_relations))
    if cfg.n_decoy_paths > 0 and len(noise_rels) >= 2:
        half = len(noise_rels) // 2
        distract_rels, decoy_rels = noise_rels[:half], noise_rels[half:]
    else:
        distract_rels = decoy_rels = noise_rels

    edges = []
    seen = set()
    names = {head: "head", tail: "tail"}

    def put(h, r, t):
        if (h, r, t) in seen:
            return False
        seen.add((h, r, t))
        edges.append((h, r, t))
        return True

    next_node = 2

    def make_chain(a, b, count, label):
        nonlocal next_node
        chain = [a] + list(range(next_node, next_node + count)) + [b]
        for j, node in enumerate(chain[1:-1]):
            names[node] = f"{label}_{j}"
        next_node += count
        return chain

    planted_paths = []
    for p in range(cfg.n_planted_paths):
        chain = make_chain(head, tail, inner, f"mid{p}")
        path = [(chain[j], EXPLAIN_REL, chain[j + 1]) for j in range(cfg.path_len)]
        for h, r, t in path:
            put(h, r, t)
        planted_paths.append(path)
    decoy_paths = []
    for p in range(cfg.n_decoy_paths):
        chain = make_chain(head, tail, inner, f"decoy{p}")
        path = []
        for j in range(cfg.path_len):
            r = int(rng.choice(decoy_rels))
            path.append((chain[j], r, chain[j + 1]))
            put(chain[j], r, chain[j + 1])
        decoy_paths.append(path)
    for gidx in range(cfg.n_context_groups):
        # the first two groups reuse the target endpoints so both endpoint
        # roles are trained even though the explained pair itself may not be
        if gidx == 0 and cfg.n_context_groups >= 2:
            gh, gt = head, next_node
            names[gt] = f"ctx{gidx}_tail"
            next_node += 1
        elif gidx == 1 and cfg.n_context_groups >= 2:
            gh, gt = next_node, tail
            names[gh] = f"ctx{gidx}_head"
            next_node += 1
        else:
            gh, gt = next_node, next_node + 1
            names[gh], names[gt] = f"ctx{gidx}_head", f"ctx{gidx}_tail"
            next_node += 2
        chain = make_chain(gh, gt, inner, f"ctx{gidx}")
        for j in range(cfg.path_len):
            put(chain[j], EXPLAIN_REL, chain[j + 1])
        put(gh, TARGET_REL, gt)

    distractors = []
    attempts = 0
    max_attempts = 200 * max(cfg.n_distractors, 1)
    while len(distractors) < cfg.n_distractors:
        attempts += 1
        if attempts > max_attempts:
            raise DataError(
                "could not place distractors without creating a head->tail shortcut; "
                "use more entities or fewer distractors"
            )
        a = int(rng.integers(0, cfg.n_entities))
        b = int(rng.integers(0, cfg.n_entities))
        r = int(rng.choice(distract_rels))
        if a == b or (a, r, b) in seen:
            continue
        d_h = _directed_distances(cfg.n_entities, edges, head)
        d_t = _directed_distances(cfg.n_entities, edges, tail, reverse=True)
        if d_h[a] >= 0 and d_t[b] >= 0 and d_h[a] + 1 + d_t[b] <= cfg.path_len:
            continue
        put(a, r, b)
        distractors.append((a, r, b))

    # the asserted fact itself, trained on so the model predicts it confidently
    put(head, TARGET_REL, tail)

    check = [e for e in edges if e != (head, TARGET_REL, tail)]
    d_h = _directed_distances(cfg.n_entities, check, head)
    if d_h[tail] != cfg.path_len:
        raise DataError("internal generator error: planted paths are not shortest")

    entity_names = [names.get(i, f"e{i}") for i in range(cfg.n_entities)]
    relation_names = ["explains", "target"] + [
        f"noise{i}" for i in range(cfg.n_relations - 2)
    ]

    arr = np.array(edges, dtype=np.int64)
    graph = KnowledgeGraph(
        cfg.n_entities, cfg.n_relations, arr[:, 0], arr[:, 1], arr[:, 2],
        entity_names, relation_names,
    )
    target = TargetTriple(head, TARGET_REL, tail)
    return PlantedInstance(graph, target, planted_paths, decoy_paths, distractors, cfg.seed)


def reliant_model(g: KnowledgeGraph, target: TargetTriple, dim: int = 8, seed: int = 0,
                  alpha: float = 0.4, gain: float = 2.0, base_raw: float = 0.9) -> KgcModel:
    """Hand-set model whose target score provably tracks explains-chain mass.

    Entity embeddings reserve coordinate 0 with a constant positive mass;
    the explains relation transports it (identity basis), every other
    relation is routed through a basis with coordinate 0 zeroed out, and
    the target relation's decoder embedding reads coordinate 0 alone.
    With one layer every explains message into the tail carries the same
    mass, so under mean aggregation deleting an explains-path triple can
    never raise the target's raw score while deleting a no-mass triple
    strictly raises it: explanation-quality metrics then measure route
    selection rather than accidents of toy-scale training.

    The read-out weight is calibrated so the unexplained target scores
    `base_raw` on the full graph (minus the asserted triple itself).
    """
    model = KgcModel(g.num_entities, g.num_relations, dim=dim, layers=1, bases=2,
                     decoder="distmult", seed=seed)
    rng = np.random.default_rng(seed + 17)
    p = model.store.params
    mu = 0.6
    ent = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(g.num_entities, dim))
    ent[:, 0] = mu
    p["ent"][...] = ent
    eye = np.eye(dim)
    for layer in range(model.layers):
        p[f"self_{layer}"][...] = alpha * eye
        p[f"basis_{layer}_0"][...] = gain * eye
        b1 = rng.normal(0.0, 0.25 / np.sqrt(dim), size=(dim, dim))
        b1[0, :] = 0.0
        b1[:, 0] = 0.0
        p[f"basis_{layer}_1"][...] = b1
        coef = np.zeros((g.num_relations, 2))
        coef[:, 1] = 1.0
        coef[EXPLAIN_REL] = (1.0, 0.0)
        p[f"coef_{layer}"][...] = coef
    keep = ~(
        (g.heads == target.head) & (g.rels == target.relation) & (g.tails == target.tail)
    )
    calib = KnowledgeGraph(
        g.num_entities, g.num_relations, g.heads[keep], g.rels[keep], g.tails[keep],
        g.entity_names, g.relation_names,
    )
    from .model import encode

    H = encode(model, full_graph(calib, target))
    mass = H[target.head, 0] * H[target.tail, 0]
    r_target = np.zeros(dim)
    r_target[0] = base_raw / mass
    p["rel"][target.relation] = r_target
    return model


# ---------------------------------------------------------------------------
# suite driver


@dataclass
class SuiteConfig:
    n_instances: int = 20
    base_seed: int = 0
    instance: PlantedConfig = field(default_factory=PlantedConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    model_source: str = "trained"   # "trained" or "reliant" (hand-set oracle model)
    hops: int | None = None
    k_core: int = 2
    max_nodes: int | None = None
    ablations: bool = False

    def resolved_hops(self):
        return self.hops if self.hops is not None else max(1, self.instance.path_len // 2)

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "SuiteConfig":
        """Flat key-value file format: instance.*/model.*/explain.* prefixes."""
        cfg = cls()
        for key, value in flat.items():
            if "." in key:
                section, name = key.split(".", 1)
                obj = {"instance": cfg.instance, "model": cfg.model,
                       "explain": cfg.explain}.get(section)
                if obj is None or not hasattr(obj, name):
                    raise DataError(f"unknown suite config key {key!r}")
                setattr(obj, name, value)
            else:
                if not hasattr(cfg, key):
                    raise DataError(f"unknown suite config key {key!r}")
                setattr(cfg, key, value)
        return cfg

    def to_flat_dict(self):
        out = {k: v for k, v in asdict(self).items()
               if k not in ("instance", "model", "explain")}
        for section, obj in (("instance", self.instance), ("model", self.model),
                             ("explain", self.explain)):
            for k, v in asdict(obj).items():
                out[f"{section}.{k}"] = v
        return out


MODES = ("full", "path_off", "mi_off")


def _mode_config(base: ExplainConfig, mode: str, seed: int) -> ExplainConfig:
    cfg = replace(base, seed=seed)
    if mode == "path_off":
        cfg = replace(cfg, enable_path_loss=False)
    elif mode == "mi_off":
        cfg = replace(cfg, enable_mi_loss=False)
    return cfg


def _paths_equal(a, b):
    return list(a) == list(b)


def run_instance(suite: SuiteConfig, seed: int):
    """Generate, train (or construct), explain per enabled mode, and measure."""
    inst = generate_planted(replace(suite.instance, seed=seed))
    if suite.model_source == "reliant":
        model = reliant_model(inst.graph, inst.target, dim=suite.model.dim, seed=seed)
    else:
        model = train_kgc(inst.graph, replace(suite.model, seed=seed))
    gc = prepare_computation_graph(
        inst.graph, inst.target, suite.resolved_hops(), suite.k_core, suite.max_nodes
    )
    modes = MODES if suite.ablations else ("full",)
    out = {"seed": seed}
    for mode in modes:
        cfg = _mode_config(suite.explain, mode, seed)
        result = train_explainer(model, gc, inst.target, cfg)
        explanation = generate_paths(gc, result.mask, inst.target, cfg.num_paths,
                                     cfg.power_order)
        row = measure_explanation(model, gc, inst.target, result.mask, explanation)
        returned = [p.triples for p in explanation.paths]
        planted = inst.planted_paths
        matches = [p for p in returned if any(_paths_equal(p, q) for q in planted)]
        row["top1_match"] = bool(returned) and any(
            _paths_equal(returned[0], q) for q in planted
        )
        row["precision"] = len(matches) / len(returned) if returned else 0.0
        row["recall"] = len({tuple(map(tuple, p)) for p in matches}) / len(planted)
        row["n_paths"] = len(returned)
        out[mode] = row
    return out


def sign_test_p(diffs) -> float:
    """One-sided sign test: P(at least this many positive signs | fair coin)."""
    nonzero = [d for d in diffs if d != 0]
    if not nonzero:
        return 1.0
    n = len(nonzero)
    k = sum(1 for d in nonzero if d > 0)
    return sum(math.comb(n, j) for j in range(k, n + 1)) / 2.0**n


SUITE_CSV_COLUMNS = (
    "seed", "mode", "f_plus", "f_minus", "sparsity", "hit1", "hit3", "hit5",
    "top1_match", "precision", "recall", "n_paths",
)


def run_suite(suite: SuiteConfig, out_dir=None):
    """Runs every instance, aggregates recovery and metric trends, and (when
    out_dir is given) writes config echo, per-instance JSON, and aggregate
    JSON + CSV with deterministic bytes."""
    t0 = time.perf_counter()
    out = None
    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps(suite.to_flat_dict(), indent=2, sort_keys=True) + "\n"
        )
    instances = [run_instance(suite, suite.base_seed + i) for i in range(suite.n_instances)]
    modes = MODES if suite.ablations else ("full",)
    agg = {"n_instances": suite.n_instances, "modes": {}}
    for mode in modes:
        rows = [r[mode] for r in instances]
        agg["modes"][mode] = {
            "recovery_rate": float(np.mean([r["top1_match"] for r in rows])),
            "precision": float(np.mean([r["precision"] for r in rows])),
            "recall": float(np.mean([r["recall"] for r in rows])),
            "f_plus": float(np.mean([r["f_plus"] for r in rows])),
            "f_minus": float(np.mean([r["f_minus"] for r in rows])),
            "sparsity": float(np.mean([r["sparsity"] for r in rows])),
            **{
                f"hdr{m}": float(np.mean([r[f"hit{m}"] for r in rows]))
                for m in HDR_PATH_COUNTS
            },
        }
    if suite.ablations:
        full_hits = [r["full"]["hit1"] for r in instances]
        for mode in ("path_off", "mi_off"):
            other = [r[mode]["hit1"] for r in instances]
            diffs = [int(a) - int(b) for a, b in zip(full_hits, other)]
            agg[f"sign_test_full_vs_{mode}"] = sign_test_p(diffs)
    report = {
        "config": suite.to_flat_dict(),
        "aggregate": agg,
        "instances": instances,
    }
    if out is not None:
        for r in instances:
            (out / f"instance_{r['seed']}.json").write_text(
                json.dumps(r, indent=2, sort_keys=True) + "\n"
            )
        (out / "aggregate.json").write_text(
            json.dumps({"config": suite.to_flat_dict(), "aggregate": agg},
                       indent=2, sort_keys=True) + "\n"
        )
        lines = [",".join(SUITE_CSV_COLUMNS)]
        for r in instances:
            for mode in modes:
                row = r[mode]
                cells = [str(r["seed"]), mode]
                for c in SUITE_CSV_COLUMNS[2:]:
                    v = row[c]
                    if isinstance(v, bool):
                        cells.append("1" if v else "0")
                    elif isinstance(v, float):
                        cells.append(repr(v))
                    else:
                        cells.append(str(v))
                lines.append(",".join(cells))
        (out / "aggregate.csv").write_text("\n".join(lines) + "\n")
    report["wall_time_s"] = time.perf_counter() - t0
    return report


def ablation_suite_config(n_instances: int = 32, base_seed: int = 0) -> SuiteConfig:
    """Canonical paired-seed suite for the loss-ablation comparison.

    Decoy routes give target-blind objectives something plausible to
    pick; the hand-set reliant model makes route choice measurable; the
    mask hyperparameters sit where 50 epochs train to meaningful margins
    at this graph size.
    """
    return SuiteConfig(
        n_instances=n_instances,
        base_seed=base_seed,
        ablations=True,
        model_source="reliant",
        instance=PlantedConfig(
            n_decoy_paths=3, n_context_groups=4, n_entities=50, n_distractors=30
        ),
        explain=ExplainConfig(gamma=0.3, lr=0.03),
        hops=2,
    )


def power_order_suite_config(power_order: int, n_instances: int = 20,
                             base_seed: int = 0) -> SuiteConfig:
    """Length-4 planted paths explained at the given power order."""
    return SuiteConfig(
        n_instances=n_instances,
        base_seed=base_seed,
        model_source="reliant",
        instance=PlantedConfig(
            path_len=4, n_planted_paths=2, n_context_groups=4,
            n_entities=44, n_distractors=20,
        ),
        explain=ExplainConfig(power_order=power_order),
        hops=2,
    )


# ---------------------------------------------------------------------------
# memory instrumentation (powering-chain scaling)


def _random_instance_for_memory(n_edges, seed=0, dim=8):
    rng = np.random.default_rng(seed)
    n = max(n_edges // 10, 16)
    key_bound = n * n * 4
    keys = np.unique(rng.integers(0, key_bound, size=int(n_edges * 1.6)))
    h = keys // (n * 4)
    rest = keys % (n * 4)
    t = rest // 4
    r = rest % 4
    keep = h != t
    h, r, t = h[keep], r[keep], t[keep]
    if h.size < n_edges:
        raise DataError("could not build the requested edge count")
    h, r, t = h[:n_edges], r[:n_edges], t[:n_edges]
    g = KnowledgeGraph(n, 4, h, r, t)
    model = KgcModel(n, 4, dim=dim, layers=1, bases=2, decoder="distmult", seed=seed)
    target = TargetTriple(0, 0, 1)
    gc = full_graph(g, target)
    return model, gc, target


def measure_explain_memory(edge_counts=(1000, 10000, 100000), seed=0, epochs=2, dim=8):
    """Peak auxiliary allocation of one explanation per edge count.

    Uses the numpy kernel backend so tracemalloc sees every array the
    powering chain allocates (numba's internal allocations are invisible
    to it).
    """
    results = []
    cfg = ExplainConfig(epochs=epochs, power_order=3)
    for n_edges in edge_counts:
        model, gc, target = _random_instance_for_memory(n_edges, seed=seed, dim=dim)
        with kernels.use_backend("numpy"):
            tracemalloc.start()
            train_explainer(model, gc, target, cfg)
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
        results.append((int(gc.num_edges), int(peak)))
    return results


def linear_fit_r2(points) -> float:
    x = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = ((y - pred) ** 2).sum()
    ss_tot = ((y - y.mean()) ** 2).sum()
    return float(1.0 - ss_res / ss_tot)
