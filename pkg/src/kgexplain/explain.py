"""Edge-score learning with a path-enforcing powering loss, and path extraction.

The triplet edge scorer (TES) is an MLP over a combination of the edge
triple's embeddings and the target triple's embeddings (frozen encoder
outputs for entities, the model's relation table for relations). Its
sigmoid outputs form a sparse weighted adjacency over the computation
graph's distinct (src, dst) positions; when several triples share a
position the maximum score is stored and the arg-max triple recorded as
provenance.

Training maximises the length-normalised on-path probability obtained by
repeatedly multiplying the target row of the score matrix into the
matrix (walk-product sums, normalised by walk counts and the l-th root),
together with the prediction term -log P(Y=1 | masked graph) and an L2
penalty on the mask. Paths are then read off with Dijkstra on inverse
scores, removing each found path's edges before searching again.

Note on walks vs paths: the powering chain counts walks (node revisits
allowed) exactly as the matrix algebra dictates; simple-path constraints
apply only at extraction time.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, backward, sgd_step
from .errors import ContractError, NumericError
from .kgraph import (
    ComputationGraph,
    KnowledgeGraph,
    TargetTriple,
    adjacency_power_row,
    extract_computation_graph,
    k_core_prune,
)
from .model import KgcModel, encode, target_score_nodes

COMBINE_MODES = ("concatenation", "euclidean")

TES_HIDDEN = (64, 32)


@dataclass
class ExplainConfig:
    epochs: int = 50
    lr: float = 0.005
    gamma: float = 0.03
    power_order: int = 3
    combine_mode: str = "concatenation"
    seed: int = 0
    enable_path_loss: bool = True
    enable_mi_loss: bool = True
    num_paths: int = 3

    def validate(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.power_order < 2:
            raise ContractError("power_order must be >= 2")
        if self.gamma < 0:
            raise ContractError("gamma must be >= 0")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.combine_mode not in COMBINE_MODES:
            raise ContractError(f"combine_mode must be one of {COMBINE_MODES}")
        if not (self.enable_path_loss or self.enable_mi_loss):
            raise ContractError("at least one of path loss / MI loss must be enabled")
        if self.num_paths < 1:
            raise ContractError("num_paths must be >= 1")


@dataclass
class TesParams:
    combine_mode: str
    input_width: int
    store: ParamStore


def init_tes(combine_mode: str, dim: int, seed: int = 0) -> TesParams:
    """MLP [input -> 64 -> 32 -> 1], ReLU hidden, sigmoid output.

    The final layer starts near zero so initial edge scores sit at ~0.5.
    """
    if combine_mode not in COMBINE_MODES:
        raise ContractError(f"combine_mode must be one of {COMBINE_MODES}")
    width = 6 * dim if combine_mode == "concatenation" else 3
    rng = np.random.default_rng(seed)
    s = ParamStore()
    s.add("w1", rng.normal(0.0, math.sqrt(2.0 / width), (width, TES_HIDDEN[0])))
    s.add("b1", np.zeros(TES_HIDDEN[0]))
    s.add("w2", rng.normal(0.0, math.sqrt(2.0 / TES_HIDDEN[0]), (TES_HIDDEN[0], TES_HIDDEN[1])))
    s.add("b2", np.zeros(TES_HIDDEN[1]))
    s.add("w3", rng.normal(0.0, 0.1 / math.sqrt(TES_HIDDEN[1]), (TES_HIDDEN[1], 1)))
    s.add("b3", np.zeros(1))
    return TesParams(combine_mode, width, s)


def combine_cat(edge_embs, target_embs):
    """[h, r, t, target-h, target-r, target-t] concatenated."""
    parts = [np.asarray(v, dtype=np.float64) for v in (*edge_embs, *target_embs)]
    d = parts[0].shape
    if any(p.shape != d for p in parts):
        raise ContractError("all six embeddings must share one dimension")
    return np.concatenate(parts)


def combine_euc(edge_embs, target_embs):
    """Per-slot Euclidean distances between edge and target embeddings."""
    out = []
    for a, b in zip(edge_embs, target_embs):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ContractError("edge/target embedding dimension mismatch")
        diff = a - b
        out.append(np.sqrt((diff * diff).sum()))
    return np.array(out)


@dataclass
class EdgeScoreMatrix:
    """Sparse n x n edge-probability matrix aligned to a computation graph.

    `values[p]` scores the distinct pair (pair_src[p], pair_dst[p]);
    `provenance[p]` is the gc triple row that produced the entry.
    """

    pair_src: np.ndarray
    pair_dst: np.ndarray
    values: np.ndarray
    provenance: np.ndarray
    num_nodes: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.pair_src.shape:
            raise ContractError("one value per edge position required")
        if self.values.size and not ((self.values >= 0.0).all() and (self.values <= 1.0).all()):
            raise NumericError("edge scores must lie in [0, 1]")

    @classmethod
    def from_values(cls, gc: ComputationGraph, values, provenance=None):
        if provenance is None:
            provenance = gc.pair_indptr[:-1].copy()
        return cls(gc.pair_src.copy(), gc.pair_dst.copy(), values, provenance, gc.num_nodes)

    @classmethod
    def constant(cls, gc: ComputationGraph, value: float):
        return cls.from_values(gc, np.full(gc.num_pairs, float(value)))

    def complement(self) -> "EdgeScoreMatrix":
        return EdgeScoreMatrix(
            self.pair_src, self.pair_dst, 1.0 - self.values, self.provenance, self.num_nodes
        )

    def to_dense(self):
        m = np.zeros((self.num_nodes, self.num_nodes))
        m[self.pair_src, self.pair_dst] = self.values
        return m

    def entry(self, i, j) -> float:
        hit = np.flatnonzero((self.pair_src == i) & (self.pair_dst == j))
        return float(self.values[hit[0]]) if hit.size else 0.0


@dataclass
class PowerVector:
    values: np.ndarray
    length: int
    start: int


def initial_power_vector(m: EdgeScoreMatrix, start: int) -> PowerVector:
    u = np.zeros(m.num_nodes)
    sel = m.pair_src == start
    u[m.pair_dst[sel]] = m.values[sel]
    return PowerVector(u, 1, start)


def power_step(u: PowerVector, m: EdgeScoreMatrix) -> PowerVector:
    """u' = u . M; entry k then sums edge-score products over all walks of
    length (u.length + 1) from the start node to k."""
    if u.length < 1:
        raise ContractError("power vector length must be >= 1")
    out = ad.edge_spmv(u.values, m.values, m.pair_src, m.pair_dst, m.num_nodes)
    return PowerVector(np.asarray(out), u.length + 1, u.start)


def normalize_power(u: PowerVector, walk_counts) -> np.ndarray:
    """(u[k] / count[k]) ** (1/l) where count[k] > 0, else 0."""
    a = np.asarray(walk_counts)
    if a.shape != u.values.shape:
        raise ContractError("walk-count vector shape mismatch")
    out = np.zeros_like(u.values)
    pos = a > 0
    out[pos] = np.power(u.values[pos] / a[pos], 1.0 / u.length)
    return out


def _pon_terms(gc: ComputationGraph, values, L: int, awalks, row_sel):
    """On-path probability terms for l = 1..L; `values` may be a Node."""
    n = gc.num_nodes
    k = gc.tail_local
    k_idx = np.array([k])
    u = ad.scatter_add(ad.gather(values, row_sel), gc.pair_dst[row_sel], n)
    terms = [ad.gather(u, k_idx)]
    for length in range(2, L + 1):
        u = ad.edge_spmv(u, values, gc.pair_src, gc.pair_dst, n)
        count = int(awalks[length - 1][k])
        if count > 0:
            uk = ad.gather(u, k_idx)
            terms.append(ad.powc(ad.mul(uk, 1.0 / count), 1.0 / length))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / L)


def on_path_probability(m: EdgeScoreMatrix, gc: ComputationGraph, L: int) -> float:
    """Average over l = 1..L of the normalised walk-product mass reaching the
    target tail (the l = 1 term is the direct-edge score)."""
    if L < 2:
        raise ContractError("power order must be >= 2")
    awalks = adjacency_power_row(gc, gc.head_local, L)
    row_sel = np.flatnonzero(gc.pair_src == gc.head_local)
    return float(np.asarray(_pon_terms(gc, m.values, L, awalks, row_sel)).reshape(()))


def path_loss(p_on: float) -> float:
    if not 0.0 <= p_on <= 1.0:
        raise ContractError("p_on must lie in [0, 1]")
    return -math.log(max(p_on, ad.LOG_CLAMP))


@dataclass(frozen=True)
class TotalLoss:
    prediction: float
    path: float
    regularization: float

    @property
    def total(self):
        return self.prediction + self.path + self.regularization


def total_loss(model: KgcModel, gc: ComputationGraph, mask: EdgeScoreMatrix,
               target: TargetTriple, gamma: float, L: int) -> TotalLoss:
    """-log p(masked prediction) + path loss + gamma * ||M||_2."""
    if gamma < 0:
        raise ContractError("gamma must be >= 0")
    _, prob = target_score_nodes(model, gc, mask, target)
    prediction = -math.log(max(float(np.asarray(prob)), ad.LOG_CLAMP))
    path = path_loss(on_path_probability(mask, gc, L))
    reg = gamma * float(np.sqrt((mask.values * mask.values).sum()))
    return TotalLoss(prediction, path, reg)


# ---------------------------------------------------------------------------
# TES forward


def _tes_mlp(params, x):
    z = ad.relu(ad.add(ad.matmul(x, params["w1"]), params["b1"]))
    z = ad.relu(ad.add(ad.matmul(z, params["w2"]), params["b2"]))
    z = ad.add(ad.matmul(z, params["w3"]), params["b3"])
    return ad.reshape(ad.sigmoid(z), (np.shape(ad._val(x))[0],))


def _tes_inputs(H, R, gc: ComputationGraph, target: TargetTriple, combine_mode: str):
    i = gc.local_of_global[target.head]
    k = gc.local_of_global[target.tail]
    E = gc.num_edges
    hs, rr, ht = H[gc.src], R[gc.rel], H[gc.dst]
    th = np.broadcast_to(H[i], (E, H.shape[1]))
    tr = np.broadcast_to(R[target.relation], (E, R.shape[1]))
    tt = np.broadcast_to(H[k], (E, H.shape[1]))
    if combine_mode == "concatenation":
        return np.concatenate([hs, rr, ht, th, tr, tt], axis=1)
    cols = [
        np.sqrt(((hs - th) ** 2).sum(axis=1)),
        np.sqrt(((rr - tr) ** 2).sum(axis=1)),
        np.sqrt(((ht - tt) ** 2).sum(axis=1)),
    ]
    return np.stack(cols, axis=1) if E else np.zeros((0, 3))


def _collapse_to_pairs(edge_scores, gc: ComputationGraph):
    """Max score per distinct (src, dst) pair; ties keep the first triple."""
    return ad.segment_max(edge_scores, gc.pair_indptr)


def tes_score_edges(tes: TesParams, model: KgcModel, gc: ComputationGraph,
                    target: TargetTriple) -> EdgeScoreMatrix:
    """Score every gc edge with the TES against the target triple."""
    H = encode(model, gc, None)
    x = _tes_inputs(H, model.relation_embeddings, gc, target, tes.combine_mode)
    if x.shape[1] != tes.input_width:
        raise ContractError("TES input width inconsistent with combine mode and dim")
    scores = _tes_mlp(tes.store.params, x)
    pair_vals, argmax = _collapse_to_pairs(scores, gc)
    return EdgeScoreMatrix(
        gc.pair_src.copy(), gc.pair_dst.copy(), np.asarray(pair_vals), argmax, gc.num_nodes
    )


# ---------------------------------------------------------------------------
# training


class ExplainJob:
    """One explanation unit: owns the TES inputs, constants, and loss tape.

    Entity inputs to the TES are encoder outputs computed once on the
    unmasked graph and frozen for the whole optimisation.
    """

    def __init__(self, model: KgcModel, gc: ComputationGraph, target: TargetTriple,
                 config: ExplainConfig):
        config.validate()
        if target.head not in gc.local_of_global or target.tail not in gc.local_of_global:
            raise ContractError("target endpoints are not present in the computation graph")
        self.model = model
        self.gc = gc
        self.target = target
        self.config = config
        self.H = encode(model, gc, None)
        self.R = model.relation_embeddings
        self.x = _tes_inputs(self.H, self.R, gc, target, config.combine_mode)
        self.awalks = adjacency_power_row(gc, gc.head_local, config.power_order)
        self.row_sel = np.flatnonzero(gc.pair_src == gc.head_local)

    def pair_scores(self, store: ParamStore, tape: Tape | None):
        params = (
            {name: tape.param(store, name) for name in store.params}
            if tape is not None
            else store.params
        )
        scores = _tes_mlp(params, self.x)
        return _collapse_to_pairs(scores, self.gc)

    def loss_terms(self, store: ParamStore, tape: Tape | None):
        """Enabled loss terms plus the mask L2 penalty, keyed by name."""
        cfg = self.config
        pair_vals, argmax = self.pair_scores(store, tape)
        terms = {}
        if cfg.enable_mi_loss:
            _, prob = target_score_nodes(self.model, self.gc, pair_vals, self.target)
            terms["prediction"] = ad.neg(ad.log(prob))
        if cfg.enable_path_loss:
            p_on = _pon_terms(self.gc, pair_vals, cfg.power_order, self.awalks, self.row_sel)
            terms["path"] = ad.neg(ad.log(p_on))
        terms["regularization"] = ad.mul(ad.norm(pair_vals), cfg.gamma)
        return terms, pair_vals, argmax

    def objective(self, store: ParamStore, tape: Tape | None):
        terms, pair_vals, argmax = self.loss_terms(store, tape)
        out = None
        for t in terms.values():
            out = t if out is None else ad.add(out, t)
        return out, terms, pair_vals, argmax

    def final_mask(self, store: ParamStore) -> EdgeScoreMatrix:
        pair_vals, argmax = self.pair_scores(store, None)
        return EdgeScoreMatrix(
            self.gc.pair_src.copy(), self.gc.pair_dst.copy(), np.asarray(pair_vals),
            argmax, self.gc.num_nodes,
        )


@dataclass
class ExplainResult:
    tes: TesParams
    mask: EdgeScoreMatrix
    loss_trace: list


def train_explainer(model: KgcModel, gc: ComputationGraph, target: TargetTriple,
                    config: ExplainConfig | None = None) -> ExplainResult:
    """Optimise the TES on one target; returns the scorer, the final mask,
    and the per-epoch loss breakdown."""
    config = config or ExplainConfig()
    job = ExplainJob(model, gc, target, config)
    tes = init_tes(config.combine_mode, model.dim, config.seed)
    trace = []
    for epoch in range(config.epochs):
        tape = Tape()
        objective, terms, _, _ = job.objective(tes.store, tape)
        tes.store.zero_grads()
        backward(tape, objective)
        row = {"epoch": epoch}
        for name in ("prediction", "path", "regularization"):
            row[name] = (
                float(np.asarray(ad._val(terms[name])).reshape(())) if name in terms else None
            )
        row["total"] = float(np.asarray(ad._val(objective)).reshape(()))
        trace.append(row)
        sgd_step(tes.store, config.lr)
    return ExplainResult(tes, job.final_mask(tes.store), trace)


# ---------------------------------------------------------------------------
# path generation


@dataclass
class ExplanationPath:
    triples: list          # global (head, relation, tail) tuples
    triple_indices: list   # gc triple rows (provenance)
    edge_scores: list
    mean_score: float


@dataclass
class Explanation:
    target: TargetTriple
    paths: list
    mask: EdgeScoreMatrix | None = None
    loss_trace: list = field(default_factory=list)

    def to_json_dict(self, g: KnowledgeGraph | None = None):
        def ent(i):
            return g.entity_names[i] if g is not None else str(i)

        def rel(i):
            return g.relation_names[i] if g is not None else str(i)

        return {
            "target": {
                "head": {"id": self.target.head, "name": ent(self.target.head)},
                "relation": {"id": self.target.relation, "name": rel(self.target.relation)},
                "tail": {"id": self.target.tail, "name": ent(self.target.tail)},
                "label": self.target.label,
            },
            "paths": [
                {
                    "triples": [
                        {
                            "head": {"id": h, "name": ent(h)},
                            "relation": {"id": r, "name": rel(r)},
                            "tail": {"id": t, "name": ent(t)},
                            "score": s,
                        }
                        for (h, r, t), s in zip(p.triples, p.edge_scores)
                    ],
                    "mean_score": p.mean_score,
                }
                for p in self.paths
            ],
            "loss_trace": self.loss_trace,
        }


def _dijkstra_pairs(gc: ComputationGraph, costs, alive, start, goal):
    """Min-cost pair chain start -> goal; ties pop the smaller node index."""
    dist = np.full(gc.num_nodes, np.inf)
    dist[start] = 0.0
    pred = np.full(gc.num_nodes, -1, dtype=np.int64)
    done = np.zeros(gc.num_nodes, dtype=bool)
    heap = [(0.0, start)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        if u == goal:
            break
        for pid in range(gc.adj_indptr[u], gc.adj_indptr[u + 1]):
            if not alive[pid]:
                continue
            v = gc.pair_dst[pid]
            nd = d + costs[pid]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = pid
                heapq.heappush(heap, (nd, int(v)))
    if not done[goal]:
        return None
    chain = []
    node = goal
    while node != start:
        pid = pred[node]
        chain.append(int(pid))
        node = gc.pair_src[pid]
    return chain[::-1]


def generate_paths(gc: ComputationGraph, mask: EdgeScoreMatrix, target: TargetTriple,
                   num_paths: int = 3, max_len: int | None = None) -> Explanation:
    """Iterative edge-disjoint Dijkstra with edge cost 1 / score.

    Shortest paths longer than max_len are discarded but their edges are
    still removed before the next round. An unreachable tail yields an
    empty path list (unexplainable, not an error).
    """
    if num_paths < 1:
        raise ContractError("num_paths must be >= 1")
    if len(mask.values) != gc.num_pairs:
        raise ContractError("mask support does not match the computation graph")
    i, k = gc.head_local, gc.tail_local
    paths = []
    if i == k or gc.num_pairs == 0:
        return Explanation(target, paths, mask)
    with np.errstate(divide="ignore"):
        costs = 1.0 / mask.values
    alive = np.ones(gc.num_pairs, dtype=bool)
    while len(paths) < num_paths:
        chain = _dijkstra_pairs(gc, costs, alive, i, k)
        if chain is None:
            break
        alive[chain] = False
        if max_len is not None and len(chain) > max_len:
            continue
        triples, rows, scores = [], [], []
        for pid in chain:
            row = int(mask.provenance[pid])
            triples.append(
                (
                    int(gc.nodes[gc.src[row]]),
                    int(gc.rel[row]),
                    int(gc.nodes[gc.dst[row]]),
                )
            )
            rows.append(row)
            scores.append(float(mask.values[pid]))
        paths.append(ExplanationPath(triples, rows, scores, float(np.mean(scores))))
    return Explanation(target, paths, mask)


# ---------------------------------------------------------------------------
# pipeline helper


def prepare_computation_graph(g: KnowledgeGraph, target: TargetTriple, hops: int,
                              k_core: int = 2, max_nodes: int | None = None,
                              exclude_target_triple: bool = True) -> ComputationGraph:
    """extract -> (drop the asserted triple itself) -> k-core prune.

    The asserted triple, when present in the KG, is removed before
    explaining so the explanation cannot be the prediction restated.
    """
    gc = extract_computation_graph(g, target, hops, max_nodes)
    if exclude_target_triple:
        row = gc.triple_index_of(
            gc.local_of_global[target.head], target.relation, gc.local_of_global[target.tail]
        )
        if row >= 0:
            gc = gc.without_triples([row])
    return k_core_prune(gc, k_core)
