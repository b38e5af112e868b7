"""Infomax training objective: discriminator, MI estimators, negatives.

A node's evidence score T sums, over the undirected edges (p, q) of its ego
graph, the log-output of a small discriminator applied to [h_p || h_q || x],
where h are ego-node embeddings from one encoder and x the node embedding
from the other. Each edge contributes once, ordered (smaller local id,
larger local id). log(sigmoid(s)) is computed as -softplus(-s), so scores
are finite and strictly negative for any finite input; an edgeless ego graph
scores exactly zero.

Estimators over batched scores:
  jsd      mean(-softplus(-T_pos)) - mean(softplus(T_neg))
  infonce  mean(T_pos - logsumexp(T_neg per anchor))
  naive-ns margin ranking on classifier outputs for true vs corrupted triples

The trainer maximizes the estimator (minimizes its negation). The printed
form of the JSD objective in the source material flips the sign of the
negative term, which rewards high scores on negatives; `as_printed=True`
reproduces that variant for inspection but the standard bound is the
default.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import rng as rng_mod
from . import tensor
from .tensor import Tensor


class EmptyBatch(ValueError):
    pass


class BatchTooSmall(ValueError):
    pass


class MiEstimatorKind(str, Enum):
    JSD = "jsd"
    INFONCE = "infonce"
    NAIVE_NS = "naive-ns"


@dataclass
class DiscriminatorParams:
    """3f -> f (ReLU) -> 1, read through a sigmoid."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(dim, gen):
        return DiscriminatorParams(
            w1=Tensor(tensor.xavier_normal(gen, (3 * dim, dim), 3 * dim, dim),
                      requires_grad=True),
            b1=Tensor(np.zeros(dim), requires_grad=True),
            w2=Tensor(tensor.xavier_normal(gen, (dim, 1), dim, 1),
                      requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True),
        )

    def named_params(self, prefix):
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}

    def param_list(self):
        return [self.w1, self.b1, self.w2, self.b2]


def discriminator_logits(rows, params):
    """Pre-sigmoid scores for [h_p || h_q || x] rows, shape [n, 1]."""
    rows = tensor.astensor(rows)
    if rows.ndim != 2 or rows.shape[1] != params.w1.shape[0]:
        raise tensor.ShapeMismatch("discriminator_logits", rows.shape,
                                   params.w1.shape)
    hidden = tensor.relu(rows @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def edge_log_scores(rows, params):
    """log(sigmoid(logit)) per row, the stable -softplus(-logit) form."""
    return -tensor.softplus(-discriminator_logits(rows, params))


def discriminator_score(ego, ego_embeddings, x_v, params):
    """Evidence score T for one node: sum of edge log-scores of its ego
    graph. Returns a scalar Tensor (zero for an edgeless ego graph)."""
    emb = tensor.astensor(ego_embeddings)
    x = tensor.astensor(x_v)
    if x.ndim == 1:
        x = tensor.reshape(x, (1, -1))
    if emb.shape[0] != ego.num_nodes or emb.shape[1] != x.shape[1]:
        raise tensor.ShapeMismatch("discriminator_score", emb.shape, x.shape)
    if ego.num_edges == 0:
        return Tensor(np.zeros(()))
    rows = tensor.concat([
        tensor.gather_rows(emb, ego.edge_p),
        tensor.gather_rows(emb, ego.edge_q),
        tensor.broadcast_rows(x, ego.num_edges),
    ], axis=1)
    return edge_log_scores(rows, params).sum()


def _as_score_tensor(scores):
    t = tensor.astensor(scores)
    if t.size == 0:
        raise EmptyBatch("no scores")
    return tensor.reshape(t, (-1,)) if t.ndim != 1 else t


def jsd_mi(pos_scores, neg_scores, as_printed=False):
    """Jensen-Shannon MI estimate from positive and negative T scores."""
    pos = _as_score_tensor(pos_scores)
    neg = _as_score_tensor(neg_scores)
    pos_term = (-tensor.softplus(-pos)).mean()
    neg_term = (-tensor.softplus(neg)).mean() if as_printed \
        else tensor.softplus(neg).mean()
    return pos_term - neg_term


def infonce_mi(pos_scores, neg_scores):
    """InfoNCE MI estimate.

    pos_scores: [B] anchor scores against their own ego graphs; neg_scores:
    [B, m] scores against m mismatched ego graphs each.
    """
    pos = _as_score_tensor(pos_scores)
    neg = tensor.astensor(neg_scores)
    if neg.ndim != 2 or neg.shape[0] != pos.shape[0]:
        raise tensor.ShapeMismatch("infonce_mi", pos.shape, neg.shape)
    if neg.shape[1] < 1:
        raise BatchTooSmall("each anchor needs at least one negative")
    lse = tensor.reshape(tensor.logsumexp_rows(neg), (-1,))
    return (pos - lse).mean()


def pair_negatives(batch_size, seed, kind):
    """Negative pairing for one batch.

    JSD: a seeded derangement (single-cycle shuffle, so no anchor keeps its
    own ego graph), returned as an index array sigma with sigma[i] != i.
    InfoNCE: all other batch members, returned as a [B, B-1] index matrix.
    `seed` may be an integer or an already-split Generator.
    """
    b = int(batch_size)
    if b < 2:
        raise BatchTooSmall(f"batch of {b} cannot pair negatives")
    kind = MiEstimatorKind(kind)
    if kind == MiEstimatorKind.INFONCE:
        grid = np.tile(np.arange(b, dtype=np.int64), (b, 1))
        keep = ~np.eye(b, dtype=bool)
        return grid[keep].reshape(b, b - 1)
    gen = seed if isinstance(seed, np.random.Generator) \
        else rng_mod.substream(seed, "negatives")
    sigma = np.arange(b, dtype=np.int64)
    # single-cycle shuffle: every index moves, giving a derangement
    for i in range(b - 1, 0, -1):
        j = int(gen.integers(0, i))
        sigma[i], sigma[j] = sigma[j], sigma[i]
    return sigma


def naive_ns_loss(pos_scores, neg_scores, margin):
    """Margin ranking loss mean(max(0, margin - pos + neg)) over 1:1 pairs."""
    pos = _as_score_tensor(pos_scores)
    neg = _as_score_tensor(neg_scores)
    if pos.shape != neg.shape:
        raise tensor.ShapeMismatch("naive_ns_loss", pos.shape, neg.shape)
    return tensor.relu(Tensor(np.full(pos.shape, float(margin))) - pos + neg).mean()
