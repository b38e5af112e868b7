"""Message-passing layers under one convolution framework, plus combiners.

Every layer is an instance of X <- act(C @ X @ f), where C is a convolution
matrix over the closed neighborhood (A + I) and f a per-layer transform:

  kind   C                          f
  gcn    D^-1/2 (A+I) D^-1/2        weight matrix
  sage   D^-1 (A+I)                 weight matrix
  gin    A+I                        two-layer MLP
  sgc    D^-1/2 (A+I) D^-1/2        identity
  gat    (A+I) * attention(X)       weight matrix (attention over its output)

D is the closed-neighborhood degree matrix. The fixed four depend only on
structure; GAT recomputes C from each layer's input features. The GAT
attention logit is [theta x_i || theta x_j] . a with no extra nonlinearity
inside the logit, single head.

Sparse evaluation runs on edge lists (gather, weight, scatter-add), which
matches the dense matrices exactly; conv_matrix exists for small graphs,
oracles, and the influence verifier. Subgraph views carry their parent
network's degrees so both evaluations agree on normalization.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import relnet
from . import tensor
from .tensor import Tensor


class AsymmetricAdjacency(ValueError):
    pass


class MissingFeatures(ValueError):
    pass


class MpLayerKind(str, Enum):
    GCN = "gcn"
    SAGE = "sage"
    GIN = "gin"
    SGC = "sgc"
    GAT = "gat"


class CombinerKind(str, Enum):
    BILSTM = "bilstm"
    CONCAT = "concat"


FIXED_KINDS = (MpLayerKind.GCN, MpLayerKind.SAGE, MpLayerKind.GIN, MpLayerKind.SGC)


@dataclass
class PropGraph:
    """Directed edge-list view for sparse message passing.

    Edges include one self-loop per node and both directions of every
    undirected edge; (src, dst) pairs are lexsorted by (dst, src) so the
    incoming edges of each node are contiguous, which segment_softmax needs.
    closed_degree is deg+1 per node, taken from the parent graph when this
    is a subgraph view.
    """
    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    closed_degree: np.ndarray
    _coeff_cache: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def _finish(n, src, dst, closed_degree):
        src = np.concatenate([src, np.arange(n, dtype=np.int64)])
        dst = np.concatenate([dst, np.arange(n, dtype=np.int64)])
        order = np.lexsort((src, dst))
        return PropGraph(n, src[order], dst[order],
                         np.asarray(closed_degree, dtype=np.float64))

    @staticmethod
    def from_relnet(net):
        n = net.num_nodes
        dst = np.repeat(np.arange(n, dtype=np.int64), net.degrees())
        return PropGraph._finish(n, net.neighbors.astype(np.int64), dst,
                                 net.degrees() + 1)

    @staticmethod
    def from_ego(ego):
        src = np.concatenate([ego.edge_p, ego.edge_q])
        dst = np.concatenate([ego.edge_q, ego.edge_p])
        return PropGraph._finish(ego.num_nodes, src, dst, ego.closed_degree)

    @staticmethod
    def from_dense(adj):
        adj = np.asarray(adj, dtype=np.float64)
        _check_adjacency(adj)
        i, j = np.nonzero(adj)  # row i aggregates from column j
        return PropGraph._finish(adj.shape[0], j.astype(np.int64),
                                 i.astype(np.int64), adj.sum(axis=1) + 1)

    @staticmethod
    def union(parts):
        """Block-diagonal union; node blocks follow input order."""
        n = 0
        srcs, dsts, degs = [], [], []
        for pg in parts:
            srcs.append(pg.src + n)
            dsts.append(pg.dst + n)
            degs.append(pg.closed_degree)
            n += pg.num_nodes
        # parts are already sorted and blocks are disjoint ascending
        return PropGraph(n, np.concatenate(srcs), np.concatenate(dsts),
                         np.concatenate(degs))

    def fixed_coeff(self, kind):
        """Per-edge aggregation weight for the structure-only families."""
        hit = self._coeff_cache.get(kind)
        if hit is not None:
            return hit
        d = self.closed_degree
        if kind in (MpLayerKind.GCN, MpLayerKind.SGC):
            c = 1.0 / np.sqrt(d[self.dst] * d[self.src])
        elif kind == MpLayerKind.SAGE:
            c = 1.0 / d[self.dst]
        elif kind == MpLayerKind.GIN:
            c = np.ones(len(self.src))
        else:
            raise ValueError(f"no fixed coefficients for {kind}")
        self._coeff_cache[kind] = c
        return c


def as_prop_graph(graph):
    if isinstance(graph, PropGraph):
        return graph
    if isinstance(graph, relnet.RelationNetwork):
        return PropGraph.from_relnet(graph)
    if isinstance(graph, relnet.EgoGraph):
        return PropGraph.from_ego(graph)
    return PropGraph.from_dense(graph)


def _check_adjacency(adj):
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise AsymmetricAdjacency(f"adjacency must be square, got {adj.shape}")
    if not np.array_equal(adj, adj.T):
        raise AsymmetricAdjacency("adjacency is not symmetric")
    if np.any(np.diag(adj) != 0):
        raise AsymmetricAdjacency("adjacency must have a zero diagonal")


def conv_matrix(kind, adjacency, features=None, theta=None, att=None):
    """Dense convolution matrix of one layer.

    For GAT, `features` (the layer input X), `theta`, and `att` are
    required; attention is a per-row softmax of exp([theta x_i || theta x_j]
    . a) over the closed neighborhood of i.
    """
    adj = np.asarray(adjacency, dtype=np.float64)
    _check_adjacency(adj)
    n = adj.shape[0]
    a_tilde = adj + np.eye(n)
    d_tilde = a_tilde.sum(axis=1)

    if kind in (MpLayerKind.GCN, MpLayerKind.SGC):
        inv_sqrt = 1.0 / np.sqrt(d_tilde)
        return inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]
    if kind == MpLayerKind.SAGE:
        return a_tilde / d_tilde[:, None]
    if kind == MpLayerKind.GIN:
        return a_tilde
    if kind == MpLayerKind.GAT:
        if features is None:
            raise MissingFeatures("GAT needs node features")
        if theta is None or att is None:
            raise MissingFeatures("GAT needs theta and attention parameters")
        x = np.asarray(features, dtype=np.float64)
        th = theta.data if isinstance(theta, Tensor) else np.asarray(theta)
        a = att.data if isinstance(att, Tensor) else np.asarray(att)
        a = a.reshape(-1)
        f = th.shape[1]
        z = x @ th
        logits = (z @ a[:f])[:, None] + (z @ a[f:])[None, :]
        neg = np.full((n, n), -np.inf)
        masked = np.where(a_tilde > 0, logits, neg)
        masked -= masked.max(axis=1, keepdims=True)
        e = np.where(a_tilde > 0, np.exp(masked), 0.0)
        return e / e.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown layer kind {kind}")


def _xavier_tensor(gen, shape, fan_in, fan_out):
    return Tensor(tensor.xavier_normal(gen, shape, fan_in, fan_out),
                  requires_grad=True)


@dataclass
class GnnStack:
    """A depth-k stack of one layer kind with per-layer parameters.

    activation applies between layers; the last layer's output is linear.
    "identity" everywhere makes the whole stack linear, which the influence
    verifier relies on.
    """
    kind: MpLayerKind
    depth: int
    dim: int
    activation: str
    layers: list

    @staticmethod
    def create(kind, depth, dim, gen, activation="relu"):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation}")
        kind = MpLayerKind(kind)
        layers = []
        for _ in range(depth):
            if kind in (MpLayerKind.GCN, MpLayerKind.SAGE):
                layers.append({"w": _xavier_tensor(gen, (dim, dim), dim, dim)})
            elif kind == MpLayerKind.GIN:
                layers.append({
                    "w1": _xavier_tensor(gen, (dim, dim), dim, dim),
                    "w2": _xavier_tensor(gen, (dim, dim), dim, dim),
                })
            elif kind == MpLayerKind.SGC:
                layers.append({})
            else:
                layers.append({
                    "theta": _xavier_tensor(gen, (dim, dim), dim, dim),
                    "att": _xavier_tensor(gen, (2 * dim, 1), 2 * dim, 1),
                })
        return GnnStack(kind, depth, dim, activation, layers)

    def named_params(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, t in layer.items():
                out[f"{prefix}.l{i}.{name}"] = t
        return out

    def param_list(self):
        return [t for layer in self.layers for t in layer.values()]

    def _act(self, x):
        return tensor.relu(x) if self.activation == "relu" else x


def mp_forward(stack, graph, x, need_counts=None):
    """Run the stack over a graph.

    x: Tensor or array of node features, one row per node. need_counts, when
    given, lists how many leading rows each layer must produce (node lists
    from ego extraction put nearer nodes first); trailing rows are dropped
    from the computation. The retained rows see exactly the same messages,
    so they agree with the full run to rounding (kernel selection inside the
    matmul may differ with the operand shape). Returns the final feature
    rows (all nodes, or need_counts[-1] rows).
    """
    pg = as_prop_graph(graph)
    x = tensor.astensor(x)
    if x.ndim != 2 or x.shape[0] != pg.num_nodes:
        raise tensor.ShapeMismatch("mp_forward", x.shape, (pg.num_nodes, -1))
    if need_counts is not None and len(need_counts) != stack.depth:
        raise ValueError("need_counts must have one entry per layer")

    src, dst = pg.src, pg.dst
    for li, layer in enumerate(stack.layers):
        if need_counts is None:
            n_out, e_src, e_dst = pg.num_nodes, src, dst
        else:
            n_out = int(need_counts[li])
            # edges are sorted by dst, so the block feeding rows < n_out
            # is a prefix
            cut = int(np.searchsorted(dst, n_out, side="left"))
            e_src, e_dst = src[:cut], dst[:cut]

        if stack.kind == MpLayerKind.GAT:
            z = x @ layer["theta"]
            s1 = z @ tensor.slice_axis(layer["att"], 0, 0, stack.dim)
            s2 = z @ tensor.slice_axis(layer["att"], 0, stack.dim, 2 * stack.dim)
            logits = tensor.reshape(
                tensor.gather_rows(s1, e_dst) + tensor.gather_rows(s2, e_src), (-1,))
            alpha = tensor.reshape(tensor.segment_softmax(logits, e_dst), (-1, 1))
            msgs = alpha * tensor.gather_rows(z, e_src)
            out = tensor.scatter_add_rows(msgs, e_dst, n_out)
        else:
            msgs = tensor.gather_rows(x, e_src)
            if stack.kind != MpLayerKind.GIN:  # GIN coefficients are all one
                coeff = pg.fixed_coeff(stack.kind)
                if need_counts is not None:
                    coeff = coeff[:len(e_src)]
                msgs = Tensor(coeff[:, None]) * msgs
            agg = tensor.scatter_add_rows(msgs, e_dst, n_out)
            if stack.kind in (MpLayerKind.GCN, MpLayerKind.SAGE):
                out = agg @ layer["w"]
            elif stack.kind == MpLayerKind.GIN:
                # the MLP's inner activation follows the stack activation so
                # identity mode keeps the whole stack linear
                out = stack._act(agg @ layer["w1"]) @ layer["w2"]
            else:
                out = agg
        x = stack._act(out) if li < stack.depth - 1 else out
    return x


# ---------------------------------------------------------------------------
# Triple combiners: map (e_h, e_r, e_t) rows to one f-wide feature row.

@dataclass
class LstmCellParams:
    wx: Tensor  # input width f  -> 4 gate blocks (i, f, g, o)
    wh: Tensor  # hidden width h -> 4 gate blocks
    b: Tensor


@dataclass
class BiLstmParams:
    fw: LstmCellParams
    bw: LstmCellParams
    dim: int

    @staticmethod
    def create(dim, gen):
        if dim % 2 != 0:
            raise ValueError("bilstm needs an even feature width")
        h = dim // 2

        def cell():
            return LstmCellParams(
                wx=_xavier_tensor(gen, (dim, 4 * h), dim, 4 * h),
                wh=_xavier_tensor(gen, (h, 4 * h), h, 4 * h),
                b=Tensor(np.zeros(4 * h), requires_grad=True),
            )

        return BiLstmParams(cell(), cell(), dim)

    def named_params(self, prefix):
        out = {}
        for tag, cell in (("fw", self.fw), ("bw", self.bw)):
            out[f"{prefix}.{tag}.wx"] = cell.wx
            out[f"{prefix}.{tag}.wh"] = cell.wh
            out[f"{prefix}.{tag}.b"] = cell.b
        return out

    def param_list(self):
        return [self.fw.wx, self.fw.wh, self.fw.b,
                self.bw.wx, self.bw.wh, self.bw.b]


def _lstm_final_hidden(cell, steps, hdim):
    """Run one LSTM direction over `steps` ([B, f] rows each) and return the
    final hidden state [B, hdim]. Gate block order is i, f, g, o."""
    batch = steps[0].shape[0]
    h = Tensor(np.zeros((batch, hdim)))
    c = Tensor(np.zeros((batch, hdim)))
    for x in steps:
        gates = x @ cell.wx + h @ cell.wh + cell.b
        i = tensor.sigmoid(tensor.slice_axis(gates, 1, 0, hdim))
        f = tensor.sigmoid(tensor.slice_axis(gates, 1, hdim, 2 * hdim))
        g = tensor.tanh(tensor.slice_axis(gates, 1, 2 * hdim, 3 * hdim))
        o = tensor.sigmoid(tensor.slice_axis(gates, 1, 3 * hdim, 4 * hdim))
        c = f * c + i * g
        h = o * tensor.tanh(c)
    return h


def bilstm_encode(e_h, e_r, e_t, params):
    """Bidirectional LSTM over the 3-step sequence (e_h, e_r, e_t).

    Accepts [f] vectors or [B, f] batches. Output concatenates the final
    hidden states of the forward and backward passes, width f.
    """
    single = tensor.astensor(e_h).ndim == 1
    steps = []
    for v in (e_h, e_r, e_t):
        v = tensor.astensor(v)
        steps.append(tensor.reshape(v, (1, -1)) if v.ndim == 1 else v)
    widths = {s.shape[1] for s in steps} | {params.dim}
    if len(widths) != 1:
        raise tensor.ShapeMismatch("bilstm_encode", *(s.shape for s in steps))
    hdim = params.dim // 2
    h_fw = _lstm_final_hidden(params.fw, steps, hdim)
    h_bw = _lstm_final_hidden(params.bw, steps[::-1], hdim)
    out = tensor.concat([h_fw, h_bw], axis=1)
    return tensor.reshape(out, (-1,)) if single else out


def concat_encode(e_h, e_r, e_t, projection):
    """Concatenation ablation: [e_h || e_r || e_t] @ projection (3f x f)."""
    single = tensor.astensor(e_h).ndim == 1
    steps = []
    for v in (e_h, e_r, e_t):
        v = tensor.astensor(v)
        steps.append(tensor.reshape(v, (1, -1)) if v.ndim == 1 else v)
    cat = tensor.concat(steps, axis=1)
    if cat.shape[1] != projection.shape[0]:
        raise tensor.ShapeMismatch("concat_encode", cat.shape, projection.shape)
    out = cat @ projection
    return tensor.reshape(out, (-1,)) if single else out
