"""GNN encoder + KGE decoder link-prediction model.

The encoder is a relational message-passing network with basis
decomposition: each layer sends, along every stored triple, the source
embedding through the relation's basis-combined weight, optionally scaled
by that edge's mask value, then mean-aggregates incoming messages by
in-degree count (not mask sum) and adds an unmasked self-loop term.
ReLU between layers, identity on the last.

All forward math goes through autodiff ops; with raw-array operands the
ops fall through to plain numpy, so masked and unmasked, differentiable
and value-only paths share one code sequence (and are bit-identical).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, backward, sgd_step
from .errors import ContractError, DataError
from .kgraph import ComputationGraph, KnowledgeGraph, TargetTriple, full_graph

DECODERS = ("transe", "distmult")

CHECKPOINT_MAGIC = b"PLNK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TripleScore:
    raw: float
    probability: float


@dataclass
class ModelConfig:
    dim: int = 16
    layers: int = 2
    bases: int = 2
    decoder: str = "distmult"
    epochs: int = 300
    lr: float = 0.5
    negatives: int = 4
    seed: int = 0


class KgcModel:
    """Entity/relation embeddings plus encoder weights and a decoder tag."""

    def __init__(self, num_entities, num_relations, dim=16, layers=2, bases=2,
                 decoder="distmult", seed=0):
        if decoder not in DECODERS:
            raise ContractError(f"decoder must be one of {DECODERS}, got {decoder!r}")
        if dim < 2:
            raise ContractError("embedding dim must be >= 2")
        self.num_entities = int(num_entities)
        self.num_relations = int(num_relations)
        self.dim = int(dim)
        self.layers = int(layers)
        self.bases = int(bases)
        self.decoder = decoder
        self.final_loss = None
        rng = np.random.default_rng(seed)
        s = ParamStore()
        scale = 1.0 / np.sqrt(dim)
        s.add("ent", rng.normal(0.0, scale, size=(num_entities, dim)))
        s.add("rel", rng.normal(0.0, scale, size=(num_relations, dim)))
        for layer in range(layers):
            s.add(f"self_{layer}", rng.normal(0.0, scale, size=(dim, dim)))
            for b in range(bases):
                s.add(f"basis_{layer}_{b}", rng.normal(0.0, scale, size=(dim, dim)))
            s.add(f"coef_{layer}", rng.normal(0.0, 1.0 / np.sqrt(bases),
                                              size=(num_relations, bases)))
        self.store = s

    @property
    def entity_embeddings(self):
        return self.store.params["ent"]

    @property
    def relation_embeddings(self):
        return self.store.params["rel"]

    def tensor_names(self):
        return self.store.names()


def _as_pair_values(mask, gc: ComputationGraph):
    """Accept an EdgeScoreMatrix-like object or a raw per-pair vector."""
    values = getattr(mask, "values", mask)
    if hasattr(mask, "pair_src"):
        if len(mask.pair_src) != gc.num_pairs or not (
            np.array_equal(mask.pair_src, gc.pair_src)
            and np.array_equal(mask.pair_dst, gc.pair_dst)
        ):
            raise ContractError("mask support does not match the computation graph")
    vals = ad._val(values)
    if np.shape(vals) != (gc.num_pairs,):
        raise ContractError(
            f"mask has {np.shape(vals)} values for {gc.num_pairs} edge positions"
        )
    return values


def encode_operands(model: KgcModel, gc: ComputationGraph, mask=None, tape: Tape | None = None,
                    operands=None):
    """Message passing over gc; returns the (n, d) node-embedding matrix.

    `operands` maps parameter names to Nodes (training) or is None, in
    which case the model's raw arrays are used (frozen weights). `mask`
    may be an EdgeScoreMatrix, a per-pair vector/Node, or None.
    """
    p = operands if operands is not None else model.store.params
    mask_vec = None if mask is None else _as_pair_values(mask, gc)
    n = gc.num_nodes
    inv_deg = (1.0 / np.maximum(gc.in_degree, 1)).reshape(n, 1)
    h = ad.gather(p["ent"], gc.nodes)
    if mask_vec is not None and gc.num_edges:
        edge_mask = ad.reshape(ad.gather(mask_vec, gc.pair_index), (gc.num_edges, 1))
    else:
        edge_mask = None
    for layer in range(model.layers):
        self_term = ad.matmul(h, p[f"self_{layer}"])
        if gc.num_edges:
            hs = ad.gather(h, gc.src)
            coef = ad.gather(p[f"coef_{layer}"], gc.rel)
            msg = None
            for b in range(model.bases):
                mb = ad.matmul(hs, p[f"basis_{layer}_{b}"])
                cb = ad.reshape(gather_col(coef, b), (gc.num_edges, 1))
                term = ad.mul(mb, cb)
                msg = term if msg is None else ad.add(msg, term)
            if edge_mask is not None:
                msg = ad.mul(msg, edge_mask)
            agg = ad.scatter_add(msg, gc.dst, n)
            agg = ad.mul(agg, inv_deg)
            h = ad.add(self_term, agg)
        else:
            h = self_term
        if layer < model.layers - 1:
            h = ad.relu(h)
    return h


def gather_col(a, j):
    """Column j of a 2-D operand as a 1-D vector."""
    va = ad._val(a)
    out = va[:, j]
    if not isinstance(a, ad.Node):
        return out

    def bw(g):
        gz = np.zeros_like(va)
        gz[:, j] = g
        return [gz]

    return ad.Node(a.tape, out, (a,), bw, "gather_col")


def encode(model: KgcModel, gc: ComputationGraph, mask=None):
    """Value-only forward pass (frozen weights); returns an (n, d) array."""
    return ad._val(encode_operands(model, gc, mask))


def decoder_raw(decoder, h, r, t):
    """Decoder score for single vectors (operands may be Nodes or arrays)."""
    if decoder == "transe":
        return ad.neg(ad.norm(ad.sub(ad.add(h, r), t)))
    if decoder == "distmult":
        return ad.sumall(ad.mul(ad.mul(h, r), t))
    raise ContractError(f"unknown decoder {decoder!r}")


def decoder_raw_batch(decoder, H, R, T):
    """Row-wise decoder scores for (E, d) stacks."""
    if decoder == "transe":
        x = ad.sub(ad.add(H, R), T)
        return ad.neg(ad.powc(ad.sum_rows(ad.mul(x, x)), 0.5))
    if decoder == "distmult":
        return ad.sum_rows(ad.mul(ad.mul(H, R), T))
    raise ContractError(f"unknown decoder {decoder!r}")


def score(model: KgcModel, h_emb, r_emb, t_emb) -> TripleScore:
    """TransE: -||h + r - t||; DistMult: sum(h*r*t); probability = sigmoid."""
    for v in (h_emb, r_emb, t_emb):
        if np.shape(v) != (model.dim,):
            raise ContractError("embedding dimension mismatch")
    raw = decoder_raw(model.decoder, np.asarray(h_emb), np.asarray(r_emb), np.asarray(t_emb))
    return TripleScore(float(raw), float(ad._val(ad.sigmoid(raw))))


def target_score_nodes(model: KgcModel, gc: ComputationGraph, mask, target: TargetTriple):
    """(raw, prob) for the target under a masked forward; Node-valued when
    the mask is a Node, plain arrays otherwise."""
    if target.head not in gc.local_of_global or target.tail not in gc.local_of_global:
        raise ContractError("target endpoints are not present in the computation graph")
    H = encode_operands(model, gc, mask)
    i = gc.local_of_global[target.head]
    k = gc.local_of_global[target.tail]
    h = ad.reshape(ad.gather(H, np.array([i])), (model.dim,))
    t = ad.reshape(ad.gather(H, np.array([k])), (model.dim,))
    r = model.relation_embeddings[target.relation]
    raw = decoder_raw(model.decoder, h, r, t)
    return raw, ad.sigmoid(raw)


def score_target_masked(model: KgcModel, gc: ComputationGraph, mask,
                        target: TargetTriple) -> TripleScore:
    raw, prob = target_score_nodes(model, gc, mask, target)
    return TripleScore(float(ad._val(raw)), float(ad._val(prob)))


def rank_target(model: KgcModel, gc: ComputationGraph, target: TargetTriple,
                mask=None) -> int:
    """Raw (unfiltered) rank of the true tail among all gc nodes except the
    head, with ties counted against the true tail."""
    if target.head not in gc.local_of_global or target.tail not in gc.local_of_global:
        raise ContractError("target endpoints are not present in the computation graph")
    H = encode(model, gc, mask)
    i = gc.local_of_global[target.head]
    k = gc.local_of_global[target.tail]
    h = H[i]
    r = model.relation_embeddings[target.relation]
    true_raw = score(model, h, r, H[k]).raw
    ahead = 0
    for cand in range(gc.num_nodes):
        if cand == i or cand == k:
            continue
        if score(model, h, r, H[cand]).raw >= true_raw:
            ahead += 1
    return ahead + 1


def train_kgc(g: KnowledgeGraph, config: ModelConfig) -> KgcModel:
    """Binary cross-entropy training with uniform head/tail corruption.

    Full-batch: every epoch scores all positives plus `negatives` fresh
    corruptions per positive. Deterministic under config.seed; the final
    epoch's loss is stored on the returned model.
    """
    if g.num_triples == 0:
        raise ContractError("cannot train on an empty graph")
    model = KgcModel(g.num_entities, g.num_relations, dim=config.dim, layers=config.layers,
                     bases=config.bases, decoder=config.decoder, seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    gc = full_graph(g)
    n_pos = g.num_triples
    for _ in range(config.epochs):
        tape = Tape()
        operands = {name: tape.param(model.store, name) for name in model.store.params}
        H = encode_operands(model, gc, None, operands=operands)
        neg_h = np.repeat(g.heads, config.negatives)
        neg_r = np.repeat(g.rels, config.negatives)
        neg_t = np.repeat(g.tails, config.negatives)
        corrupt_head = rng.random(len(neg_h)) < 0.5
        repl = rng.integers(0, g.num_entities, size=len(neg_h))
        neg_h = np.where(corrupt_head, repl, neg_h)
        neg_t = np.where(corrupt_head, neg_t, repl)
        all_h = np.concatenate([g.heads, neg_h])
        all_r = np.concatenate([g.rels, neg_r])
        all_t = np.concatenate([g.tails, neg_t])
        raws = decoder_raw_batch(
            model.decoder,
            ad.gather(H, all_h),
            ad.gather(operands["rel"], all_r),
            ad.gather(H, all_t),
        )
        probs = ad.sigmoid(raws)
        p_pos = ad.gather(probs, np.arange(n_pos))
        p_neg = ad.gather(probs, np.arange(n_pos, len(all_h)))
        # positives and negatives weighted equally regardless of the ratio
        loss = ad.add(
            ad.mul(ad.sumall(ad.neg(ad.log(p_pos))), 0.5 / n_pos),
            ad.mul(ad.sumall(ad.neg(ad.log(ad.sub(1.0, p_neg)))), 0.5 / (len(all_h) - n_pos)),
        )
        model.store.zero_grads()
        backward(tape, loss)
        model.final_loss = float(ad._val(loss))
        sgd_step(model.store, config.lr)
    return model


# ---------------------------------------------------------------------------
# checkpoint format: magic "PLNK", u16 version, u32 JSON length, JSON
# metadata, then little-endian float32 tensors in the declared order.


def save_checkpoint(model: KgcModel, g: KnowledgeGraph, path):
    ent_hash, rel_hash = g.vocab_hashes()
    meta = {
        "dim": model.dim,
        "layers": model.layers,
        "bases": model.bases,
        "decoder": model.decoder,
        "num_entities": model.num_entities,
        "num_relations": model.num_relations,
        "entity_vocab_sha256": ent_hash,
        "relation_vocab_sha256": rel_hash,
        "tensors": [
            {"name": name, "shape": list(model.store.params[name].shape)}
            for name in model.tensor_names()
        ],
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for name in model.tensor_names():
        buf.write(model.store.params[name].astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, g: KnowledgeGraph) -> KgcModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", data, 6)
    meta = json.loads(data[10 : 10 + meta_len].decode())
    ent_hash, rel_hash = g.vocab_hashes()
    if meta["entity_vocab_sha256"] != ent_hash or meta["relation_vocab_sha256"] != rel_hash:
        raise DataError(f"{path}: checkpoint vocabulary does not match the dataset")
    model = KgcModel(
        meta["num_entities"], meta["num_relations"], dim=meta["dim"], layers=meta["layers"],
        bases=meta["bases"], decoder=meta["decoder"],
    )
    offset = 10 + meta_len
    for spec in meta["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        model.store.params[spec["name"]][...] = arr.reshape(shape).astype(np.float64)
    return model
