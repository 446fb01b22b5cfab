"""Knowledge-graph storage, ego-graph extraction, k-core pruning, walk counts.

Triples are stored as parallel int64 columns. The binary adjacency (one
entry per distinct (head, tail) pair regardless of relation multiplicity)
is kept in CSR form, together with an undirected neighbour CSR used for
breadth-first reachability: ego-graph distances treat edges as
undirected, while stored edges keep their original direction.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, DataError, NumericError

log = logging.getLogger(__name__)

_INT64_MAX = np.iinfo(np.int64).max


def _csr_from_pairs(src, dst, n):
    """CSR over already (src, dst)-lexsorted pair arrays."""
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, dst.copy()


@dataclass(frozen=True)
class TargetTriple:
    """The triple whose prediction is being explained."""

    head: int
    relation: int
    tail: int
    label: str = "factual"

    def __post_init__(self):
        if self.label not in ("factual", "counterfactual"):
            raise ContractError(f"label must be factual or counterfactual, got {self.label!r}")

    def validate(self, g: "KnowledgeGraph"):
        if not (0 <= self.head < g.num_entities and 0 <= self.tail < g.num_entities):
            raise ContractError("target entity id out of range")
        if not (0 <= self.relation < g.num_relations):
            raise ContractError("target relation id out of range")


class KnowledgeGraph:
    """Immutable triple store with vocabularies and CSR adjacency."""

    def __init__(
        self,
        num_entities,
        num_relations,
        heads,
        rels,
        tails,
        entity_names=None,
        relation_names=None,
        duplicates_dropped=0,
    ):
        self.num_entities = int(num_entities)
        self.num_relations = int(num_relations)
        self.heads = np.asarray(heads, dtype=np.int64)
        self.rels = np.asarray(rels, dtype=np.int64)
        self.tails = np.asarray(tails, dtype=np.int64)
        self.entity_names = list(entity_names) if entity_names is not None else [
            f"e{i}" for i in range(self.num_entities)
        ]
        self.relation_names = list(relation_names) if relation_names is not None else [
            f"r{i}" for i in range(self.num_relations)
        ]
        self.duplicates_dropped = int(duplicates_dropped)
        self._validate()
        self._build_adjacency()
        self._name_index = None

    def _validate(self):
        if len(self.heads) != len(self.rels) or len(self.heads) != len(self.tails):
            raise ContractError("triple columns must have equal length")
        if len(self.entity_names) != self.num_entities:
            raise ContractError("entity_names length mismatch")
        if len(self.relation_names) != self.num_relations:
            raise ContractError("relation_names length mismatch")
        for arr, bound, what in (
            (self.heads, self.num_entities, "head"),
            (self.rels, self.num_relations, "relation"),
            (self.tails, self.num_entities, "tail"),
        ):
            if arr.size and (arr.min() < 0 or arr.max() >= bound):
                raise ContractError(f"{what} id out of range")
        key = (self.heads * self.num_relations + self.rels) * self.num_entities + self.tails
        if np.unique(key).size != key.size:
            raise ContractError("duplicate (head, relation, tail) triples")

    def _build_adjacency(self):
        n = self.num_entities
        pair = self.heads * n + self.tails
        upair = np.unique(pair)
        psrc = upair // n
        pdst = upair % n
        self.adj_indptr, self.adj_indices = _csr_from_pairs(psrc, pdst, n)
        both = np.unique(np.concatenate([psrc * n + pdst, pdst * n + psrc]))
        usrc, udst = both // n, both % n
        self.und_indptr, self.und_indices = _csr_from_pairs(usrc, udst, n)

    # -- vocabulary -------------------------------------------------------

    @property
    def num_triples(self):
        return len(self.heads)

    @property
    def triples(self):
        return list(zip(self.heads.tolist(), self.rels.tolist(), self.tails.tolist()))

    def _names(self):
        if self._name_index is None:
            self._name_index = (
                {name: i for i, name in enumerate(self.entity_names)},
                {name: i for i, name in enumerate(self.relation_names)},
            )
        return self._name_index

    def entity_id(self, name_or_id):
        return self._lookup(name_or_id, self._names()[0], self.num_entities, "entity")

    def relation_id(self, name_or_id):
        return self._lookup(name_or_id, self._names()[1], self.num_relations, "relation")

    @staticmethod
    def _lookup(key, index, bound, kind):
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < bound:
                raise DataError(f"{kind} id {key} out of range [0, {bound})")
            return int(key)
        if key in index:
            return index[key]
        try:
            as_int = int(key)
        except ValueError:
            as_int = None
        if as_int is not None and 0 <= as_int < bound:
            return as_int
        import difflib

        close = difflib.get_close_matches(str(key), list(index), n=5, cutoff=0.4)
        raise DataError(f"unknown {kind} {key!r}; closest matches: {close}")

    def entity_vocab_json(self) -> str:
        return json.dumps(
            {name: i for i, name in enumerate(self.entity_names)},
            sort_keys=True,
            separators=(",", ":"),
        )

    def relation_vocab_json(self) -> str:
        return json.dumps(
            {name: i for i, name in enumerate(self.relation_names)},
            sort_keys=True,
            separators=(",", ":"),
        )

    def vocab_hashes(self):
        return (
            hashlib.sha256(self.entity_vocab_json().encode()).hexdigest(),
            hashlib.sha256(self.relation_vocab_json().encode()).hexdigest(),
        )

    # -- traversal --------------------------------------------------------

    def undirected_distances(self, start, max_dist):
        """BFS distances over the undirected pair adjacency, -1 beyond max_dist."""
        dist = np.full(self.num_entities, -1, dtype=np.int64)
        dist[start] = 0
        frontier = [start]
        for d in range(1, max_dist + 1):
            nxt = []
            for u in frontier:
                for v in self.und_indices[self.und_indptr[u] : self.und_indptr[u + 1]]:
                    if dist[v] < 0:
                        dist[v] = d
                        nxt.append(int(v))
            if not nxt:
                break
            frontier = nxt
        return dist


def load_triples(path, delimiter="\t") -> KnowledgeGraph:
    """Parse a head<delim>relation<delim>tail file into a KnowledgeGraph.

    Vocabularies are assigned in first-appearance order; exact duplicate
    lines are dropped with a counted warning.
    """
    ent_index: dict[str, int] = {}
    rel_index: dict[str, int] = {}
    seen = set()
    heads, rels, tails = [], [], []
    dups = 0
    nonempty = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            nonempty += 1
            fields = line.split(delimiter)
            if len(fields) != 3:
                raise DataError(
                    f"{path}:{lineno}: expected 3 fields separated by {delimiter!r}, "
                    f"got {len(fields)}"
                )
            h = ent_index.setdefault(fields[0], len(ent_index))
            r = rel_index.setdefault(fields[1], len(rel_index))
            t = ent_index.setdefault(fields[2], len(ent_index))
            if (h, r, t) in seen:
                dups += 1
                continue
            seen.add((h, r, t))
            heads.append(h)
            rels.append(r)
            tails.append(t)
    if nonempty == 0:
        raise DataError(f"{path}: no triples found")
    if dups:
        log.warning("%s: dropped %d duplicate triple line(s)", path, dups)
    return KnowledgeGraph(
        len(ent_index),
        len(rel_index),
        np.array(heads, dtype=np.int64),
        np.array(rels, dtype=np.int64),
        np.array(tails, dtype=np.int64),
        list(ent_index),
        list(rel_index),
        duplicates_dropped=dups,
    )


class ComputationGraph:
    """Pruned L-hop ego-graph around a target pair, in local indices.

    Triples are lexsorted by (src, dst, rel); distinct (src, dst) pairs
    are therefore contiguous, and ``pair_indptr`` delimits each pair's
    triple range. The binary local adjacency lives in ``adj_indptr`` /
    ``adj_indices`` over pairs.
    """

    def __init__(self, nodes, src, rel, dst, head_local, tail_local):
        self.nodes = np.asarray(nodes, dtype=np.int64)
        order = np.lexsort((rel, dst, src))
        self.src = np.asarray(src, dtype=np.int64)[order]
        self.rel = np.asarray(rel, dtype=np.int64)[order]
        self.dst = np.asarray(dst, dtype=np.int64)[order]
        self.head_local = int(head_local)
        self.tail_local = int(tail_local)
        n = len(self.nodes)
        self.local_of_global = {int(g): i for i, g in enumerate(self.nodes)}
        if self.src.size:
            key = self.src * n + self.dst
            boundary = np.flatnonzero(np.diff(key)) + 1
            starts = np.concatenate([[0], boundary])
            self.pair_indptr = np.concatenate([starts, [self.src.size]]).astype(np.int64)
            self.pair_src = self.src[starts]
            self.pair_dst = self.dst[starts]
            self.pair_index = np.repeat(
                np.arange(len(starts), dtype=np.int64), np.diff(self.pair_indptr)
            )
        else:
            self.pair_indptr = np.zeros(1, dtype=np.int64)
            self.pair_src = np.zeros(0, dtype=np.int64)
            self.pair_dst = np.zeros(0, dtype=np.int64)
            self.pair_index = np.zeros(0, dtype=np.int64)
        self.adj_indptr, self.adj_indices = _csr_from_pairs(self.pair_src, self.pair_dst, n)
        self.in_degree = np.bincount(self.dst, minlength=n).astype(np.int64)

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_edges(self):
        return len(self.src)

    @property
    def num_pairs(self):
        return len(self.pair_src)

    @property
    def target_positions(self):
        return (self.head_local, self.tail_local)

    @property
    def global_of_local(self):
        return self.nodes

    @property
    def edges(self):
        return list(zip(self.src.tolist(), self.rel.tolist(), self.dst.tolist()))

    def local_adjacency_dense(self):
        n = self.num_nodes
        a = np.zeros((n, n), dtype=bool)
        a[self.pair_src, self.pair_dst] = True
        return a

    def undirected_degrees(self, alive=None):
        """Distinct-neighbour degree over the binary pair graph, self-loops excluded."""
        n = self.num_nodes
        if alive is None:
            alive = np.ones(n, dtype=bool)
        keep = alive[self.pair_src] & alive[self.pair_dst] & (self.pair_src != self.pair_dst)
        s, d = self.pair_src[keep], self.pair_dst[keep]
        und = np.unique(np.minimum(s, d) * n + np.maximum(s, d))
        deg = np.zeros(n, dtype=np.int64)
        np.add.at(deg, und // n, 1)
        np.add.at(deg, und % n, 1)
        return deg

    def triple_index_of(self, head_local, relation, tail_local):
        """Index of a local triple, or -1 when absent."""
        hit = np.flatnonzero(
            (self.src == head_local) & (self.rel == relation) & (self.dst == tail_local)
        )
        return int(hit[0]) if hit.size else -1

    def without_triples(self, drop_indices) -> "ComputationGraph":
        """Same node set with the given triple rows removed."""
        keep = np.ones(self.num_edges, dtype=bool)
        keep[np.asarray(list(drop_indices), dtype=np.int64)] = False
        return ComputationGraph(
            self.nodes,
            self.src[keep],
            self.rel[keep],
            self.dst[keep],
            self.head_local,
            self.tail_local,
        )

    def subgraph(self, alive) -> "ComputationGraph":
        """Re-indexed graph over the surviving nodes (order preserved)."""
        alive = np.asarray(alive, dtype=bool)
        remap = -np.ones(self.num_nodes, dtype=np.int64)
        remap[alive] = np.arange(alive.sum())
        keep = alive[self.src] & alive[self.dst]
        return ComputationGraph(
            self.nodes[alive],
            remap[self.src[keep]],
            self.rel[keep],
            remap[self.dst[keep]],
            remap[self.head_local],
            remap[self.tail_local],
        )


def extract_computation_graph(
    g: KnowledgeGraph, target: TargetTriple, hops: int, max_nodes: int | None = None
) -> ComputationGraph:
    """Union of the two hop-balls around the target pair, truncated to max_nodes.

    Truncation keeps nodes by ascending (min distance to either endpoint,
    global id); head and tail are always retained. Reachability is
    undirected; stored edges keep their direction.
    """
    if hops < 1:
        raise ContractError("hops must be >= 1")
    if max_nodes is not None and max_nodes < 2:
        raise ContractError("max_nodes must be >= 2")
    target.validate(g)
    dh = g.undirected_distances(target.head, hops)
    dt = g.undirected_distances(target.tail, hops)
    in_h = dh >= 0
    in_t = dt >= 0
    cand = np.flatnonzero(in_h | in_t)
    mind = np.where(
        in_h[cand] & in_t[cand],
        np.minimum(dh[cand], dt[cand]),
        np.where(in_h[cand], dh[cand], dt[cand]),
    )
    order = np.lexsort((cand, mind))
    selected = cand[order]
    if max_nodes is not None and selected.size > max_nodes:
        selected = selected[:max_nodes]
    chosen = set(selected.tolist())
    chosen.add(target.head)
    chosen.add(target.tail)
    nodes = np.array(sorted(chosen), dtype=np.int64)
    member = np.zeros(g.num_entities, dtype=bool)
    member[nodes] = True
    keep = member[g.heads] & member[g.tails]
    local = -np.ones(g.num_entities, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    return ComputationGraph(
        nodes,
        local[g.heads[keep]],
        g.rels[keep],
        local[g.tails[keep]],
        local[target.head],
        local[target.tail],
    )


def full_graph(g: KnowledgeGraph, target: TargetTriple | None = None) -> ComputationGraph:
    """The whole KG as a ComputationGraph (used for model training)."""
    nodes = np.arange(g.num_entities, dtype=np.int64)
    head = target.head if target is not None else 0
    tail = target.tail if target is not None else min(1, g.num_entities - 1)
    return ComputationGraph(nodes, g.heads, g.rels, g.tails, head, tail)


def k_core_prune(gc: ComputationGraph, k: int) -> ComputationGraph:
    """Iteratively delete nodes of undirected degree < k until fixpoint, then
    re-admit the target head and tail (they never leave the output, but do
    not prop up other nodes' degrees while pruning)."""
    if k < 0:
        raise ContractError("k must be >= 0")
    alive = np.ones(gc.num_nodes, dtype=bool)
    while True:
        deg = gc.undirected_degrees(alive)
        drop = alive & (deg < k)
        if not drop.any():
            break
        alive &= ~drop
    alive[gc.head_local] = True
    alive[gc.tail_local] = True
    return gc.subgraph(alive)


def adjacency_power_row(gc: ComputationGraph, start: int, max_len: int):
    """Directed walk counts from `start`: entry k of the l-th vector counts
    length-l walks start->k over the binary pair adjacency. Exact int64
    arithmetic with an overflow guard.
    """
    if not 0 <= start < gc.num_nodes:
        raise ContractError("start index out of range")
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    n = gc.num_nodes
    a = np.zeros(n, dtype=np.int64)
    sel = gc.pair_src == start
    a[gc.pair_dst[sel]] = 1
    rows = [a]
    for _ in range(max_len - 1):
        prev = rows[-1]
        peak = int(prev.max()) if prev.size else 0
        if peak > _INT64_MAX // max(n, 1):
            raise NumericError("walk count would overflow int64")
        rows.append(kernels.walk_step(prev, gc.pair_src, gc.pair_dst, n))
    return rows
