"""Training loop, classifier fit, inductive scoring, ranking, checkpoints.

Training is two-stage. First the encoders and the discriminator are fit
jointly: each step draws a batch of relation-network nodes, embeds every
node's triple, runs the node-level message-passing stack for summary
embeddings and the neighborhood-level stack over the batched ego graphs for
evidence embeddings, and takes one Adam step on the selected objective
(mutual-information estimators score evidence/summary pairs through the
discriminator; the margin baseline scores corrupted triples through the
classifier). Second, with the encoder frozen, a logistic read-out is fit on
node embeddings against seeded corrupted triples.

Inference inserts a scratch node for the query triple into the relation
network, re-encodes its k-hop neighborhood (existing node features come from
a precomputed cache, and each layer only produces the rows later layers
need), and reads the classifier probability. Ranking wraps that scoring
either over all candidate relations or over a seeded sample of candidate
tails.
"""

import dataclasses
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kg, layers, objectives, relnet, rng
from . import tensor
from .tensor import Tensor


class UnknownRelation(ValueError):
    pass


class EmptyEval(ValueError):
    pass


class TrainingFailure(RuntimeError):
    pass


class BadMagic(ValueError):
    pass


class UnsupportedVersion(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


CHECKPOINT_MAGIC = b"NORN"
CHECKPOINT_VERSION = 1

# networks up to this size use full-graph message passing for the summary
# embeddings; larger ones fall back to the merged k-hop subgraph of the batch
_FULL_GRAPH_LIMIT = 5000
_CLASSIFIER_STEPS = 500
_CLASSIFIER_LR = 0.05
_CORRUPT_TRIES = 64
_EMBED_CHUNK = 512


def _parse_bool(value):
    if value == "true":
        return True
    if value == "false":
        return False
    raise ValueError(f"expected true/false, got {value!r}")


@dataclass
class TrainConfig:
    """Everything a training run depends on; serialized into checkpoints."""

    dim: int = 100
    gnn: layers.MpLayerKind = layers.MpLayerKind.GAT
    depth: int = 2
    estimator: objectives.MiEstimatorKind = objectives.MiEstimatorKind.JSD
    combiner: layers.CombinerKind = layers.CombinerKind.BILSTM
    mask: relnet.PatternMask = field(default_factory=relnet.PatternMask)
    degree_cap: int | None = None
    learning_rate: float = 0.005
    batch_size: int = 256
    epochs: int = 50
    margin: float = 0.5
    seed: int = 0
    tie_omega_psi: bool = False
    jsd_as_printed: bool = False

    def __post_init__(self):
        self.gnn = layers.MpLayerKind(self.gnn)
        self.estimator = objectives.MiEstimatorKind(self.estimator)
        self.combiner = layers.CombinerKind(self.combiner)
        if isinstance(self.mask, str):
            self.mask = relnet.PatternMask.from_codes(self.mask)

    def validate(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.combiner == layers.CombinerKind.BILSTM and self.dim % 2:
            raise ValueError("the bilstm combiner needs an even dim")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.margin <= 1.0:
            raise ValueError("margin must lie in [0, 1]")
        if self.degree_cap is not None and self.degree_cap < 1:
            raise ValueError("degree_cap must be >= 1 when set")
        return self

    def to_kv(self):
        """String key/value form, the config half of the checkpoint text
        block and the grammar of CLI config files. Inverse of from_kv."""
        return {
            "dim": str(self.dim),
            "gnn": self.gnn.value,
            "depth": str(self.depth),
            "estimator": self.estimator.value,
            "combiner": self.combiner.value,
            "mask": self.mask.to_codes(),
            "degree_cap": "" if self.degree_cap is None else str(self.degree_cap),
            "learning_rate": repr(float(self.learning_rate)),
            "batch_size": str(self.batch_size),
            "epochs": str(self.epochs),
            "margin": repr(float(self.margin)),
            "seed": str(self.seed),
            "tie_omega_psi": "true" if self.tie_omega_psi else "false",
            "jsd_as_printed": "true" if self.jsd_as_printed else "false",
        }

    @staticmethod
    def from_kv(items):
        parsers = {
            "dim": int,
            "gnn": layers.MpLayerKind,
            "depth": int,
            "estimator": objectives.MiEstimatorKind,
            "combiner": layers.CombinerKind,
            "mask": relnet.PatternMask.from_codes,
            "degree_cap": lambda v: None if v in ("", "none") else int(v),
            "learning_rate": float,
            "batch_size": int,
            "epochs": int,
            "margin": float,
            "seed": int,
            "tie_omega_psi": _parse_bool,
            "jsd_as_printed": _parse_bool,
        }
        cfg = TrainConfig()
        for key, value in items.items():
            parse = parsers.get(key)
            if parse is None:
                raise ValueError(f"unknown config key {key!r}")
            try:
                setattr(cfg, key, parse(value))
            except ValueError as exc:
                raise ValueError(f"bad value for {key}: {value!r}") from exc
        return cfg.validate()


@dataclass
class Model:
    """All parameter tensors of one run, grouped by role."""

    cfg: TrainConfig
    entity_emb: Tensor       # frozen: requires_grad stays False
    relation_emb: Tensor
    combiner: object         # BiLstmParams, or a [3f, f] projection Tensor
    psi: layers.GnnStack     # node-summary stack
    omega: layers.GnnStack   # ego-evidence stack; psi itself when tied
    disc: objectives.DiscriminatorParams
    clf_w: Tensor
    clf_b: Tensor

    @staticmethod
    def create(cfg, kg_graph):
        cfg.validate()
        tables = kg.init_embeddings(kg_graph, cfg.dim, cfg.seed)
        gen = rng.substream(cfg.seed, "init", 1)
        if cfg.combiner == layers.CombinerKind.BILSTM:
            combiner = layers.BiLstmParams.create(cfg.dim, gen)
        else:
            combiner = Tensor(
                tensor.xavier_normal(gen, (3 * cfg.dim, cfg.dim), 3 * cfg.dim, cfg.dim),
                requires_grad=True)
        psi = layers.GnnStack.create(cfg.gnn, cfg.depth, cfg.dim,
                                     rng.substream(cfg.seed, "init", 2))
        omega = psi if cfg.tie_omega_psi else layers.GnnStack.create(
            cfg.gnn, cfg.depth, cfg.dim, rng.substream(cfg.seed, "init", 3))
        disc = objectives.DiscriminatorParams.create(
            cfg.dim, rng.substream(cfg.seed, "init", 4))
        return Model(cfg, tables.entity_emb, tables.relation_emb, combiner,
                     psi, omega, disc,
                     Tensor(np.zeros((cfg.dim, 1)), requires_grad=True),
                     Tensor(np.zeros(1), requires_grad=True))

    def named_tensors(self):
        out = {"entity_emb": self.entity_emb, "relation_emb": self.relation_emb}
        if isinstance(self.combiner, layers.BiLstmParams):
            out.update(self.combiner.named_params("combiner"))
        else:
            out["combiner.proj"] = self.combiner
        out.update(self.psi.named_params("psi"))
        if self.omega is not self.psi:
            out.update(self.omega.named_params("omega"))
        out.update(self.disc.named_params("disc"))
        out["clf.w"] = self.clf_w
        out["clf.b"] = self.clf_b
        return out

    def trainable_params(self):
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def to_checkpoint(self, kg_graph):
        tensors = {name: t.data.copy() for name, t in self.named_tensors().items()}
        return Checkpoint(CHECKPOINT_VERSION, self.cfg, tensors,
                          list(kg_graph.entity_names), list(kg_graph.relation_names))

    @staticmethod
    def from_checkpoint(ckpt):
        if ckpt.version != CHECKPOINT_VERSION:
            raise UnsupportedVersion(
                f"checkpoint format {ckpt.version}, supported: {CHECKPOINT_VERSION}")
        vocab = kg.KnowledgeGraph(list(ckpt.entities), list(ckpt.relations), [])
        model = Model.create(ckpt.cfg, vocab)
        named = model.named_tensors()
        if set(named) != set(ckpt.tensors):
            odd = sorted(set(named) ^ set(ckpt.tensors))
            raise ValueError(f"checkpoint tensors do not match the config: {odd}")
        for name, t in named.items():
            arr = ckpt.tensors[name]
            if tuple(arr.shape) != tuple(t.data.shape):
                raise ValueError(
                    f"tensor {name}: shape {arr.shape}, expected {t.data.shape}")
            t.data = np.array(arr, dtype=np.float64)
        return model


@dataclass(eq=False)
class Checkpoint:
    version: int
    cfg: TrainConfig
    tensors: dict        # name -> float64 ndarray, insertion order preserved
    entities: list
    relations: list


# ---------------------------------------------------------------------------
# Training.

@dataclass
class _TrainState:
    """Per-run caches: the network, its propagation view, and all ego graphs."""

    kg_graph: object
    net: relnet.RelationNetwork
    net_prop: layers.PropGraph
    egos: list
    ego_props: list
    heads: np.ndarray
    rels: np.ndarray
    tails: np.ndarray
    known: set
    full_graph: bool

    @staticmethod
    def build(kg_graph, cfg):
        net = relnet.build_relation_network(kg_graph, cfg.mask, cfg.degree_cap,
                                            cfg.seed)
        heads, rels, tails = kg_graph.triple_arrays()
        egos = [relnet.ego_graph(net, v, cfg.depth) for v in range(net.num_nodes)]
        props = [layers.PropGraph.from_ego(e) for e in egos]
        return _TrainState(kg_graph, net, layers.PropGraph.from_relnet(net),
                           egos, props, heads, rels, tails,
                           kg_graph.triple_set(),
                           net.num_nodes <= _FULL_GRAPH_LIMIT)


def _node_features(model, heads, rels, tails):
    """Combined per-triple features from the (frozen) entity and relation
    tables; one row per input id triple."""
    e_h = tensor.gather_rows(model.entity_emb, np.asarray(heads, dtype=np.int64))
    e_r = tensor.gather_rows(model.relation_emb, np.asarray(rels, dtype=np.int64))
    e_t = tensor.gather_rows(model.entity_emb, np.asarray(tails, dtype=np.int64))
    if model.cfg.combiner == layers.CombinerKind.BILSTM:
        return layers.bilstm_encode(e_h, e_r, e_t, model.combiner)
    return layers.concat_encode(e_h, e_r, e_t, model.combiner)


def _starts(egos):
    sizes = [e.num_nodes for e in egos]
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)


def _corrupt_triples(state, node_ids, gen):
    """One corrupted counterpart per node: replace head or tail uniformly,
    resampling while the result is a known triple (bounded tries, so a
    saturated toy graph degrades to an unfiltered sample instead of hanging)."""
    n_ent = state.kg_graph.num_entities
    out = []
    for v in node_ids:
        t = state.kg_graph.triples[int(v)]
        for _ in range(_CORRUPT_TRIES):
            if int(gen.integers(2)) == 0:
                cand = kg.Triple(int(gen.integers(n_ent)), t.rel, t.tail)
            else:
                cand = kg.Triple(t.head, t.rel, int(gen.integers(n_ent)))
            if (cand.head, cand.rel, cand.tail) not in state.known:
                break
        out.append(cand)
    return out


def _inserted_psi(model, state, triples, x_all=None):
    """Summary embeddings of scratch nodes for `triples`, one insertion each.

    Features of existing neighborhood members are taken from x_all when the
    caller already built the full feature matrix, otherwise recomputed for
    the unique members only. Differentiable; returns a [len(triples), f]
    Tensor of center rows.
    """
    b = len(triples)
    egos = []
    for tr in triples:
        net2, nid = relnet.insert_node(state.net, tr, state.kg_graph)
        egos.append(relnet.ego_graph(net2, nid, model.cfg.depth))
    x_new = _node_features(model,
                           np.array([t.head for t in triples], dtype=np.int64),
                           np.array([t.rel for t in triples], dtype=np.int64),
                           np.array([t.tail for t in triples], dtype=np.int64))
    exist = np.unique(np.concatenate([e.nodes[1:] for e in egos])).astype(np.int64)
    parts = []
    for i, e in enumerate(egos):
        r = np.empty(e.num_nodes, dtype=np.int64)
        r[0] = i                                    # center row in x_new
        r[1:] = b + np.searchsorted(exist, e.nodes[1:])
        parts.append(r)
    gidx = np.concatenate(parts)
    if x_all is not None:
        x_exist = tensor.gather_rows(x_all, exist)
    else:
        x_exist = _node_features(model, state.heads[exist], state.rels[exist],
                                 state.tails[exist])
    feats = tensor.gather_rows(tensor.concat([x_new, x_exist], axis=0), gidx)
    union = layers.PropGraph.union([layers.PropGraph.from_ego(e) for e in egos])
    h = layers.mp_forward(model.psi, union, feats)
    return tensor.gather_rows(h, _starts(egos))


def _naive_ns_batch(model, state, batch, x_batch, x_all, gen):
    corrupted = _corrupt_triples(state, batch, gen)
    x_neg = _inserted_psi(model, state, corrupted, x_all)
    pos_p = tensor.sigmoid(x_batch @ model.clf_w + model.clf_b)
    neg_p = tensor.sigmoid(x_neg @ model.clf_w + model.clf_b)
    return objectives.naive_ns_loss(tensor.reshape(pos_p, (-1,)),
                                    tensor.reshape(neg_p, (-1,)),
                                    model.cfg.margin)


def _batch_loss(model, state, batch, neg_gen):
    """Loss of one batch of relation-network nodes, recorded on the active
    tape. neg_gen drives every random draw of the step (negative pairing or
    corruption), already split per (epoch, batch)."""
    cfg = model.cfg
    b = len(batch)
    batch = np.asarray(batch, dtype=np.int64)
    egos = [state.egos[int(v)] for v in batch]
    props = [state.ego_props[int(v)] for v in batch]
    union = layers.PropGraph.union(props)
    members = np.concatenate([e.nodes for e in egos])
    starts = _starts(egos)

    x_all = None
    if state.full_graph:
        x_all = _node_features(model, state.heads, state.rels, state.tails)
        h_psi = layers.mp_forward(model.psi, state.net_prop, x_all)
        x_batch = tensor.gather_rows(h_psi, batch)
        feats = tensor.gather_rows(x_all, members)
    else:
        uniq, inv = np.unique(members, return_inverse=True)
        x_uniq = _node_features(model, state.heads[uniq], state.rels[uniq],
                                state.tails[uniq])
        feats = tensor.gather_rows(x_uniq, inv.astype(np.int64))
        h_union = layers.mp_forward(model.psi, union, feats)
        x_batch = tensor.gather_rows(h_union, starts)

    if cfg.estimator == objectives.MiEstimatorKind.NAIVE_NS:
        return _naive_ns_batch(model, state, batch, x_batch, x_all, neg_gen)

    h_om = layers.mp_forward(model.omega, union, feats)
    edge_p = np.concatenate([e.edge_p + s for e, s in zip(egos, starts)])
    edge_q = np.concatenate([e.edge_q + s for e, s in zip(egos, starts)])
    owner = np.repeat(np.arange(b, dtype=np.int64),
                      [e.num_edges for e in egos])

    if cfg.estimator == objectives.MiEstimatorKind.JSD:
        h_p = tensor.gather_rows(h_om, edge_p)
        h_q = tensor.gather_rows(h_om, edge_q)
        rows = tensor.concat([h_p, h_q, tensor.gather_rows(x_batch, owner)], axis=1)
        t_pos = tensor.scatter_add_rows(
            objectives.edge_log_scores(rows, model.disc), owner, b)
        sigma = objectives.pair_negatives(b, neg_gen, cfg.estimator)
        # sigma[a] names the ego graph paired with anchor a, so the edges of
        # ego o carry the summary of anchor argsort(sigma)[o]
        anchor = np.argsort(sigma)[owner]
        rows_n = tensor.concat([h_p, h_q, tensor.gather_rows(x_batch, anchor)], axis=1)
        t_neg = tensor.scatter_add_rows(
            objectives.edge_log_scores(rows_n, model.disc), anchor, b)
        return -objectives.jsd_mi(t_pos, t_neg, as_printed=cfg.jsd_as_printed)

    # infonce: score every (anchor, ego) pair, diagonal positive. The edge
    # list is tiled per anchor, so cost grows with b * total ego edges.
    n_e = len(edge_p)
    anchor_rep = np.repeat(np.arange(b, dtype=np.int64), n_e)
    rows = tensor.concat([
        tensor.gather_rows(h_om, np.tile(edge_p, b)),
        tensor.gather_rows(h_om, np.tile(edge_q, b)),
        tensor.gather_rows(x_batch, anchor_rep),
    ], axis=1)
    seg = anchor_rep * b + np.tile(owner, b)
    t_all = tensor.scatter_add_rows(
        objectives.edge_log_scores(rows, model.disc), seg, b * b)
    ar = np.arange(b, dtype=np.int64)
    pos = tensor.reshape(tensor.gather_rows(t_all, ar * b + ar), (-1,))
    off = np.arange(b * b, dtype=np.int64).reshape(b, b)[~np.eye(b, dtype=bool)]
    neg = tensor.reshape(tensor.gather_rows(t_all, off), (b, b - 1))
    return -objectives.infonce_mi(pos, neg)


def train(kg_graph, cfg, on_epoch=None):
    """Fit a model on `kg_graph` and return its checkpoint.

    on_epoch, when given, receives (epoch index starting at 1, mean batch
    loss weighted by batch size). Fully deterministic in (kg_graph, cfg).
    """
    cfg.validate()
    if kg_graph.num_triples == 0:
        raise kg.EmptyTrainGraph("cannot train on an empty graph")
    model = Model.create(cfg, kg_graph)
    state = _TrainState.build(kg_graph, cfg)
    opt = tensor.Adam(model.trainable_params(), lr=cfg.learning_rate)
    n = state.net.num_nodes
    for epoch in range(cfg.epochs):
        order = rng.substream(cfg.seed, "shuffle", epoch).permutation(n)
        total, seen, batch_index = 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            if len(batch) < 2:
                continue    # cannot pair in-batch negatives
            neg_gen = rng.substream(cfg.seed, "negatives", epoch, batch_index)
            batch_index += 1
            with tensor.tape() as tp:
                loss = _batch_loss(model, state, batch, neg_gen)
            if not np.isfinite(loss.data):
                raise TrainingFailure(f"non-finite loss in epoch {epoch + 1}")
            tensor.backward(loss, tp)
            opt.step()
            opt.zero_grad()
            total += float(loss.data) * len(batch)
            seen += len(batch)
        if on_epoch is not None:
            on_epoch(epoch + 1, total / max(seen, 1))
    train_classifier(model, state)
    return model.to_checkpoint(kg_graph)


def _embed_all_nodes(model, state):
    """Summary embeddings of every network node, detached [N, f] array."""
    if state.full_graph:
        x_all = _node_features(model, state.heads, state.rels, state.tails)
        return layers.mp_forward(model.psi, state.net_prop, x_all).data
    n = state.net.num_nodes
    out = np.empty((n, model.cfg.dim))
    for s in range(0, n, _EMBED_CHUNK):
        ids = np.arange(s, min(s + _EMBED_CHUNK, n))
        egos = [state.egos[int(v)] for v in ids]
        union = layers.PropGraph.union([state.ego_props[int(v)] for v in ids])
        members = np.concatenate([e.nodes for e in egos])
        uniq, inv = np.unique(members, return_inverse=True)
        x_uniq = _node_features(model, state.heads[uniq], state.rels[uniq],
                                state.tails[uniq])
        feats = tensor.gather_rows(x_uniq, inv.astype(np.int64))
        h = layers.mp_forward(model.psi, union, feats)
        out[ids] = tensor.gather_rows(h, _starts(egos)).data
    return out


def train_classifier(model, state, steps=_CLASSIFIER_STEPS, lr=_CLASSIFIER_LR):
    """Fit the logistic read-out on the frozen encoder.

    Positives are the summary embeddings of all network nodes; negatives are
    embeddings of one seeded corrupted triple per node, inserted as scratch
    nodes. Binary cross-entropy, plain Adam on (w, b) only.
    """
    gen = rng.substream(model.cfg.seed, "classifier")
    pos = _embed_all_nodes(model, state)
    corrupted = _corrupt_triples(state, range(state.net.num_nodes), gen)
    neg = np.empty((len(corrupted), model.cfg.dim))
    for s in range(0, len(corrupted), _EMBED_CHUNK):
        chunk = corrupted[s:s + _EMBED_CHUNK]
        neg[s:s + len(chunk)] = _inserted_psi(model, state, chunk).data
    x = Tensor(np.concatenate([pos, neg], axis=0))
    y = Tensor(np.concatenate([np.ones((len(pos), 1)),
                               np.zeros((len(neg), 1))], axis=0))
    opt = tensor.Adam([model.clf_w, model.clf_b], lr=lr)
    for _ in range(steps):
        with tensor.tape() as tp:
            z = x @ model.clf_w + model.clf_b
            loss = (tensor.softplus(z) - y * z).mean()    # BCE with logits
        tensor.backward(loss, tp)
        opt.step()
        opt.zero_grad()
    return model.clf_w, model.clf_b


# ---------------------------------------------------------------------------
# Inference and ranking.

class RankingMode(str, Enum):
    RELATIONS = "relations"
    TAILS = "tails"


@dataclass
class EvalReport:
    mrr: float
    hit1: float
    hit3: float
    n: int
    ranks: list = field(default_factory=list, repr=False)

    def to_kv(self):
        return (f"mrr={self.mrr!r}\nhit1={self.hit1!r}\n"
                f"hit3={self.hit3!r}\nn={self.n}\n")

    def table(self):
        rows = [("mrr", f"{self.mrr:.4f}"), ("hit1", f"{self.hit1:.4f}"),
                ("hit3", f"{self.hit3:.4f}"), ("n", str(self.n))]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def rank_from_scores(scores, true_index):
    """Rank of the true candidate, averaging over its tie group."""
    s = np.asarray(scores, dtype=np.float64)
    st = s[true_index]
    return 1.0 + int(np.sum(s > st)) + 0.5 * (int(np.sum(s == st)) - 1)


def aggregate_metrics(ranks):
    r = np.asarray(list(ranks), dtype=np.float64)
    if r.size == 0:
        raise EmptyEval("no ranked queries")
    return EvalReport(mrr=float(np.mean(1.0 / r)),
                      hit1=float(np.mean(r <= 1.0)),
                      hit3=float(np.mean(r <= 3.0)),
                      n=int(r.size),
                      ranks=[float(x) for x in r])


def _extend_entities(model, kg_graph):
    """A read-only view of `model` whose entity table covers kg_graph's
    vocabulary; entities past the trained table get frozen seeded rows."""
    have = model.entity_emb.shape[0]
    need = kg_graph.num_entities
    if need <= have:
        return model
    gen = rng.substream(model.cfg.seed, "eval", 0)
    extra = tensor.xavier_normal(gen, (need - have, model.cfg.dim),
                                 model.cfg.dim, model.cfg.dim)
    table = Tensor(np.concatenate([model.entity_emb.data, extra]),
                   requires_grad=False)
    return dataclasses.replace(model, entity_emb=table)


@dataclass
class InferenceContext:
    """Per-(checkpoint, network) caches shared by every query.

    x_nodes holds the combined features of all existing network nodes; the
    one-time cost of building it is amortized over the query stream and is
    excluded from per-query cost accounting.
    """

    model: Model
    kg_graph: object
    net: relnet.RelationNetwork
    x_nodes: np.ndarray

    @staticmethod
    def build(ckpt, net, kg_graph):
        model = ckpt if isinstance(ckpt, Model) else Model.from_checkpoint(ckpt)
        model = _extend_entities(model, kg_graph)
        if net.num_nodes != kg_graph.num_triples:
            raise ValueError("relation network does not match the triple store")
        heads, rels, tails = kg_graph.triple_arrays()
        x_nodes = _node_features(model, heads, rels, tails).data
        return InferenceContext(model, kg_graph, net, x_nodes)


def _query_parts(ctx, head, tail):
    """Scratch insertion for a (head, ?, tail) query; links are relation-
    independent, so one insertion serves every candidate relation."""
    net2, nid = relnet.insert_node(ctx.net, kg.Triple(head, 0, tail), ctx.kg_graph)
    ego = relnet.ego_graph(net2, nid, ctx.model.cfg.depth)
    return ego, layers.PropGraph.from_ego(ego)


def _score_ego(ctx, ego, prop, center_feat):
    """Classifier probability for a scratch node with features `center_feat`
    ([1, f]); layer l only produces the rows within distance depth-1-l."""
    cfg = ctx.model.cfg
    feats = np.empty((ego.num_nodes, cfg.dim))
    feats[0] = center_feat.data.reshape(-1)
    if ego.num_nodes > 1:
        feats[1:] = ctx.x_nodes[ego.nodes[1:]]
    need = [int(ego.hop_offsets[cfg.depth - 1 - li]) for li in range(cfg.depth)]
    h = layers.mp_forward(ctx.model.psi, prop, feats, need_counts=need)
    return float(tensor.sigmoid(h @ ctx.model.clf_w + ctx.model.clf_b).item())


def _score_query(ctx, triple):
    ego, prop = _query_parts(ctx, triple.head, triple.tail)
    feat = _node_features(ctx.model,
                          np.array([triple.head], dtype=np.int64),
                          np.array([triple.rel], dtype=np.int64),
                          np.array([triple.tail], dtype=np.int64))
    return _score_ego(ctx, ego, prop, feat)


def score_triple(ckpt, net, kg_graph, triple):
    """Probability that `triple` holds. Entities may be unseen (their rows
    come from the frozen table, extended deterministically if the vocabulary
    outgrew the checkpoint); the base network is never mutated."""
    ctx = InferenceContext.build(ckpt, net, kg_graph)
    if not 0 <= triple.rel < ctx.model.relation_emb.shape[0]:
        raise UnknownRelation(f"relation id {triple.rel} is not in the vocabulary")
    if not (0 <= triple.head < ctx.model.entity_emb.shape[0]
            and 0 <= triple.tail < ctx.model.entity_emb.shape[0]):
        raise ValueError("entity id outside the vocabulary")
    return _score_query(ctx, triple)


def evaluate(ckpt, net, kg_graph, eval_triples, mode=RankingMode.RELATIONS,
             seed=0):
    """Rank the true candidate of every eval triple and aggregate metrics.

    relations mode scores all candidate relations per (head, tail) query;
    tails mode scores the true tail against a seeded filtered sample of at
    most 100 candidate tails. Read-only and deterministic in its arguments.
    """
    eval_triples = list(eval_triples)
    if not eval_triples:
        raise EmptyEval("no queries to rank")
    mode = RankingMode(mode)
    ctx = InferenceContext.build(ckpt, net, kg_graph)
    n_rel = ctx.model.relation_emb.shape[0]
    for q in eval_triples:
        if not 0 <= q.rel < n_rel:
            raise UnknownRelation(f"relation id {q.rel} is not in the vocabulary")

    ranks = []
    if mode is RankingMode.RELATIONS:
        for q in eval_triples:
            ego, prop = _query_parts(ctx, q.head, q.tail)
            cand = _node_features(ctx.model,
                                  np.full(n_rel, q.head, dtype=np.int64),
                                  np.arange(n_rel, dtype=np.int64),
                                  np.full(n_rel, q.tail, dtype=np.int64))
            scores = [_score_ego(ctx, ego, prop, Tensor(cand.data[r:r + 1]))
                      for r in range(n_rel)]
            ranks.append(rank_from_scores(scores, q.rel))
    else:
        known = ctx.kg_graph.triple_set()
        known |= {(q.head, q.rel, q.tail) for q in eval_triples}
        for qi, q in enumerate(eval_triples):
            gen = rng.substream(seed, "eval", qi + 1)
            pool = np.array([t2 for t2 in range(ctx.kg_graph.num_entities)
                             if t2 != q.tail and (q.head, q.rel, t2) not in known],
                            dtype=np.int64)
            if len(pool) > 100:
                pool = pool[gen.choice(len(pool), size=100, replace=False)]
            tails = np.concatenate([[q.tail], pool]).astype(np.int64)
            cand = _node_features(ctx.model,
                                  np.full(len(tails), q.head, dtype=np.int64),
                                  np.full(len(tails), q.rel, dtype=np.int64),
                                  tails)
            scores = []
            for ci, t2 in enumerate(tails):
                ego, prop = _query_parts(ctx, q.head, int(t2))
                scores.append(_score_ego(ctx, ego, prop, Tensor(cand.data[ci:ci + 1])))
            ranks.append(rank_from_scores(scores, 0))
    return aggregate_metrics(ranks)


# ---------------------------------------------------------------------------
# Inference cost model.

def estimate_inference_cost(cfg, stats, batch):
    """Predicted multiply-accumulates for scoring `batch` triples: the
    per-query sum of combiner, aggregation, and transform terms, using the
    network's mean degree for the receptive-field size."""
    f = float(cfg.dim)
    d = float(stats.mean_degree)
    return float(batch) * (3.0 * f * f + (d ** cfg.depth) * f + cfg.depth * f * f)


def measure_inference_macs(ctx, triples):
    """Actual multiply-accumulate count for scoring `triples` against a
    prebuilt context (whose one-time feature cache is not counted)."""
    with tensor.count_macs() as counter:
        for tr in triples:
            _score_query(ctx, tr)
    return counter.total


# ---------------------------------------------------------------------------
# Checkpoint serialization.

class _Cursor:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise TruncatedFile(
                f"checkpoint ends {self.pos + n - len(self.blob)} bytes early")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def remaining(self):
        return len(self.blob) - self.pos


def checkpoint_bytes(ckpt):
    out = [CHECKPOINT_MAGIC,
           struct.pack("<I", ckpt.version),
           struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    kv = ckpt.cfg.to_kv()
    kv["entities"] = "\t".join(ckpt.entities)
    kv["relations"] = "\t".join(ckpt.relations)
    text = "".join(f"{k}={v}\n" for k, v in kv.items()).encode("utf-8")
    out.append(struct.pack("<Q", len(text)))
    out.append(text)
    return b"".join(out)


def checkpoint_from_bytes(blob):
    cur = _Cursor(blob)
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise BadMagic("not a checkpoint file")
    version = struct.unpack("<I", cur.take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(
            f"checkpoint format {version}, supported: {CHECKPOINT_VERSION}")
    count = struct.unpack("<I", cur.take(4))[0]
    tensors = {}
    for _ in range(count):
        nlen = struct.unpack("<H", cur.take(2))[0]
        name = cur.take(nlen).decode("utf-8")
        rank = struct.unpack("<B", cur.take(1))[0]
        dims = struct.unpack(f"<{rank}Q", cur.take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(cur.take(8 * n), dtype="<f8")
        tensors[name] = arr.reshape(dims).astype(np.float64)
    klen = struct.unpack("<Q", cur.take(8))[0]
    text = cur.take(klen).decode("utf-8")
    if cur.remaining():
        raise ValueError(f"{cur.remaining()} trailing bytes after the payload")
    kv = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed checkpoint metadata line {line!r}")
        key, value = line.split("=", 1)
        kv[key] = value
    entities = kv.pop("entities", "")
    relations = kv.pop("relations", "")
    cfg = TrainConfig.from_kv(kv)
    return Checkpoint(version, cfg, tensors,
                      entities.split("\t") if entities else [],
                      relations.split("\t") if relations else [])


def save_checkpoint(ckpt, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
