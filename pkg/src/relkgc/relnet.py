"""Triple-level relation network: build, insert, ego-graph extraction.

Each knowledge-graph triple becomes one node. Two nodes are linked when
their triples share an entity under an enabled linking pattern:

  head-head  the entity is the head of both triples
  tail-tail  the entity is the tail of both triples
  head-tail  the entity is the tail of one and the head of the other

Edges are undirected and deduplicated: two triples sharing entities under
several patterns get a single edge carrying a pattern bitset, with the
first-generated pattern kept as the display label. Generation order is
entities ascending, and per entity head-head, tail-tail, head-tail.
"""

from collections import deque
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import rng as rng_mod


class InvalidNode(ValueError):
    pass


class LinkPattern(IntEnum):
    HEAD_HEAD = 0
    TAIL_TAIL = 1
    HEAD_TAIL = 2


PATTERN_BIT = {
    LinkPattern.HEAD_HEAD: 1,
    LinkPattern.TAIL_TAIL: 2,
    LinkPattern.HEAD_TAIL: 4,
}

PATTERN_CODE = {
    LinkPattern.HEAD_HEAD: "HH",
    LinkPattern.TAIL_TAIL: "TT",
    LinkPattern.HEAD_TAIL: "HT",
}

CODE_PATTERN = {v: k for k, v in PATTERN_CODE.items()}


@dataclass(frozen=True)
class PatternMask:
    include_head_head: bool = True
    include_tail_tail: bool = True
    include_head_tail: bool = True

    def enables(self, pattern):
        return (self.include_head_head, self.include_tail_tail,
                self.include_head_tail)[int(pattern)]

    @staticmethod
    def from_codes(text):
        """Parse a mask like "HH,TT,HT"; empty string means no patterns."""
        codes = {c.strip().upper() for c in text.split(",") if c.strip()}
        unknown = codes - set(CODE_PATTERN)
        if unknown:
            raise ValueError(f"unknown pattern codes: {sorted(unknown)}")
        return PatternMask("HH" in codes, "TT" in codes, "HT" in codes)

    def to_codes(self):
        codes = []
        for pat in LinkPattern:
            if self.enables(pat):
                codes.append(PATTERN_CODE[pat])
        return ",".join(codes)


@dataclass
class RelationNetwork:
    """Undirected graph over triples in CSR form.

    neighbors/edge_pattern/edge_bits are parallel arrays over directed edge
    slots; both directions of an edge carry the same label and bitset.
    Neighbor lists are sorted ascending. Immutable once built.
    """
    node_to_triple: np.ndarray
    row_offsets: np.ndarray
    neighbors: np.ndarray
    edge_pattern: np.ndarray
    edge_bits: np.ndarray
    mask: PatternMask
    degree_cap: int | None
    build_seed: int

    @property
    def num_nodes(self):
        return len(self.node_to_triple)

    @property
    def num_edges(self):
        return len(self.neighbors) // 2

    def degree(self, v):
        return int(self.row_offsets[v + 1] - self.row_offsets[v])

    def degrees(self):
        return np.diff(self.row_offsets)

    def neighbors_of(self, v):
        lo, hi = self.row_offsets[v], self.row_offsets[v + 1]
        return self.neighbors[lo:hi]

    def edge_slots_of(self, v):
        lo, hi = self.row_offsets[v], self.row_offsets[v + 1]
        return slice(int(lo), int(hi))

    def undirected_edges(self):
        """Yield (u, v, pattern, bits) with u < v, ascending."""
        for u in range(self.num_nodes):
            lo, hi = int(self.row_offsets[u]), int(self.row_offsets[u + 1])
            for k in range(lo, hi):
                v = int(self.neighbors[k])
                if u < v:
                    yield u, v, LinkPattern(int(self.edge_pattern[k])), int(self.edge_bits[k])


def _pair_patterns(kg, mask):
    """Generate (u, v, pattern) for every triple pair sharing an entity.

    Order: entities ascending; per entity head-head, then tail-tail, then
    head-tail. This order defines the first-pattern-wins display label.
    """
    for e in range(kg.num_entities):
        heads = kg.head_incidence[e]
        tails = kg.tail_incidence[e]
        if mask.include_head_head:
            for i in range(len(heads)):
                for j in range(i + 1, len(heads)):
                    yield heads[i], heads[j], LinkPattern.HEAD_HEAD
        if mask.include_tail_tail:
            for i in range(len(tails)):
                for j in range(i + 1, len(tails)):
                    yield tails[i], tails[j], LinkPattern.TAIL_TAIL
        if mask.include_head_tail:
            for t1 in tails:
                for t2 in heads:
                    if t1 != t2:
                        yield t1, t2, LinkPattern.HEAD_TAIL


def _edges_to_csr(num_nodes, edge_map, node_to_triple, mask, degree_cap, seed):
    deg = np.zeros(num_nodes, dtype=np.int64)
    for (u, v) in edge_map:
        deg[u] += 1
        deg[v] += 1
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(deg, out=offsets[1:])
    nbr = np.empty(offsets[-1], dtype=np.int64)
    pat = np.empty(offsets[-1], dtype=np.uint8)
    bits = np.empty(offsets[-1], dtype=np.uint8)
    cursor = offsets[:-1].copy()
    # edge_map iterates in insertion order; fill then sort each row
    for (u, v), (label, b) in edge_map.items():
        for a, c in ((u, v), (v, u)):
            k = cursor[a]
            nbr[k] = c
            pat[k] = int(label)
            bits[k] = b
            cursor[a] += 1
    for v in range(num_nodes):
        lo, hi = offsets[v], offsets[v + 1]
        order = np.argsort(nbr[lo:hi], kind="stable")
        nbr[lo:hi] = nbr[lo:hi][order]
        pat[lo:hi] = pat[lo:hi][order]
        bits[lo:hi] = bits[lo:hi][order]
    return RelationNetwork(node_to_triple, offsets, nbr, pat, bits,
                           mask, degree_cap, seed)


def _apply_degree_cap(edge_map, num_nodes, cap, gen):
    """Per-node seeded sampling of at most `cap` incident edges, then union:
    an edge survives when either endpoint kept it."""
    incident = [[] for _ in range(num_nodes)]
    for key in edge_map:
        u, v = key
        incident[u].append(key)
        incident[v].append(key)
    kept = set()
    for v in range(num_nodes):
        edges = incident[v]
        if len(edges) <= cap:
            kept.update(edges)
        else:
            idx = gen.choice(len(edges), size=cap, replace=False)
            kept.update(edges[i] for i in sorted(idx.tolist()))
    return {k: edge_map[k] for k in edge_map if k in kept}


def build_relation_network(kg, mask=None, degree_cap=None, seed=0):
    """Build the relation network of `kg` under a pattern mask.

    With degree_cap set, nodes over the cap keep a seeded sample of their
    edges and the edge set is re-symmetrized by union, so capped builds are
    approximations (a neighbor of a capped hub may still keep the edge).
    """
    if kg.num_triples == 0:
        raise ValueError("empty knowledge graph")
    mask = mask if mask is not None else PatternMask()

    edge_map = {}
    for u, v, pattern in _pair_patterns(kg, mask):
        key = (u, v) if u < v else (v, u)
        hit = edge_map.get(key)
        if hit is None:
            edge_map[key] = (pattern, PATTERN_BIT[pattern])
        else:
            edge_map[key] = (hit[0], hit[1] | PATTERN_BIT[pattern])

    if degree_cap is not None:
        if degree_cap < 1:
            raise ValueError("degree_cap must be >= 1")
        gen = rng_mod.substream(seed, "relnet")
        edge_map = _apply_degree_cap(edge_map, kg.num_triples, degree_cap, gen)

    node_to_triple = np.arange(kg.num_triples, dtype=np.int64)
    return _edges_to_csr(kg.num_triples, edge_map, node_to_triple,
                         mask, degree_cap, seed)


def _insert_links(net, triple, kg):
    """Links from a new triple node to existing nodes, in generation order
    (head entity then tail entity; per entity the pattern order of the
    builder). Unknown entity ids contribute nothing."""
    mask = net.mask
    links = {}

    def touch(other, pattern):
        hit = links.get(other)
        if hit is None:
            links[other] = (pattern, PATTERN_BIT[pattern])
        else:
            links[other] = (hit[0], hit[1] | PATTERN_BIT[pattern])

    def incidence(entity):
        if 0 <= entity < kg.num_entities:
            return kg.head_incidence[entity], kg.tail_incidence[entity]
        return (), ()

    h_heads, h_tails = incidence(triple.head)
    t_heads, t_tails = incidence(triple.tail)
    if mask.include_head_head:
        for other in h_heads:
            touch(other, LinkPattern.HEAD_HEAD)
    if mask.include_tail_tail:
        for other in t_tails:
            touch(other, LinkPattern.TAIL_TAIL)
    if mask.include_head_tail:
        # new node's head equals an existing tail, or its tail an existing head
        for other in h_tails:
            touch(other, LinkPattern.HEAD_TAIL)
        for other in t_heads:
            touch(other, LinkPattern.HEAD_TAIL)
    return links


def insert_node(net, triple, kg):
    """Append one node for `triple` and link it per the network's mask.

    Returns (new_network, new_node_id). The input network is untouched; the
    result is a fresh view sharing no mutable state, so scoring can insert
    scratch nodes freely. The degree cap, when set, applies to the new node
    only.
    """
    links = _insert_links(net, triple, kg)
    new_id = net.num_nodes

    keys = list(links.keys())
    if net.degree_cap is not None and len(keys) > net.degree_cap:
        gen = rng_mod.substream(net.build_seed, "relnet", new_id)
        idx = gen.choice(len(keys), size=net.degree_cap, replace=False)
        keys = [keys[i] for i in sorted(idx.tolist())]
    kept = set(keys)
    keys_sorted = sorted(keys)

    old_deg = np.diff(net.row_offsets)
    extra = np.zeros(new_id + 1, dtype=np.int64)
    for v in keys:
        extra[v] = 1
    extra[new_id] = len(keys)
    new_deg = np.concatenate([old_deg, [0]]) + extra

    offsets = np.zeros(new_id + 2, dtype=np.int64)
    np.cumsum(new_deg, out=offsets[1:])
    total = int(offsets[-1])
    nbr = np.empty(total, dtype=np.int64)
    pat = np.empty(total, dtype=np.uint8)
    bits = np.empty(total, dtype=np.uint8)

    for v in range(new_id):
        lo, hi = int(net.row_offsets[v]), int(net.row_offsets[v + 1])
        nlo = int(offsets[v])
        n = hi - lo
        nbr[nlo:nlo + n] = net.neighbors[lo:hi]
        pat[nlo:nlo + n] = net.edge_pattern[lo:hi]
        bits[nlo:nlo + n] = net.edge_bits[lo:hi]
        if v in kept:
            label, b = links[v]
            nbr[nlo + n] = new_id      # new id sorts after all old neighbors
            pat[nlo + n] = int(label)
            bits[nlo + n] = b

    lo = int(offsets[new_id])
    for i, v in enumerate(keys_sorted):
        label, b = links[v]
        nbr[lo + i] = v
        pat[lo + i] = int(label)
        bits[lo + i] = b

    node_to_triple = np.concatenate([net.node_to_triple, [-1]])
    new_net = RelationNetwork(node_to_triple, offsets, nbr, pat, bits,
                              net.mask, net.degree_cap, net.build_seed)
    return new_net, new_id


@dataclass
class EgoGraph:
    """Depth-k neighborhood of a node, BFS order with ascending tie-break.

    nodes[0] is the center. hop_offsets[d] counts nodes within distance d,
    so prefixes of the node list are exactly the distance balls; message
    passing uses this to compute only the rows a given layer needs.
    closed_degree holds parent-network degree + 1 per member, so degree
    normalization inside the subgraph matches the full network.
    """
    center: int
    nodes: np.ndarray
    edge_p: np.ndarray        # local index, < edge_q
    edge_q: np.ndarray
    edge_pattern: np.ndarray
    edge_bits: np.ndarray
    depth: int
    hop_offsets: np.ndarray
    closed_degree: np.ndarray

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def num_edges(self):
        return len(self.edge_p)

    def edges(self):
        """Edge list view as (p, q, LinkPattern) tuples, p < q locally."""
        return [(int(p), int(q), LinkPattern(int(c)))
                for p, q, c in zip(self.edge_p, self.edge_q, self.edge_pattern)]


def ego_graph(net, center, k):
    """Extract the induced subgraph on all nodes within k hops of center."""
    if not 0 <= center < net.num_nodes:
        raise InvalidNode(f"node {center} outside [0, {net.num_nodes})")
    if k < 0:
        raise ValueError("k must be >= 0")

    local = {center: 0}
    nodes = [center]
    hop_offsets = [1]
    frontier = deque([(center, 0)])
    while frontier:
        v, d = frontier.popleft()
        if d == k:
            break
        for w in net.neighbors_of(v):
            w = int(w)
            if w not in local:
                local[w] = len(nodes)
                nodes.append(w)
                frontier.append((w, d + 1))
        if not frontier or frontier[0][1] > d:
            hop_offsets.append(len(nodes))
    while len(hop_offsets) < k + 1:
        hop_offsets.append(len(nodes))

    nodes_arr = np.asarray(nodes, dtype=np.int64)
    e_p, e_q, e_pat, e_bits = [], [], [], []
    for p, v in enumerate(nodes):
        sl = net.edge_slots_of(v)
        for w, c, b in zip(net.neighbors[sl], net.edge_pattern[sl], net.edge_bits[sl]):
            q = local.get(int(w))
            if q is not None and q > p:
                e_p.append(p)
                e_q.append(q)
                e_pat.append(int(c))
                e_bits.append(int(b))

    degs = np.diff(net.row_offsets)
    return EgoGraph(
        center=center,
        nodes=nodes_arr,
        edge_p=np.asarray(e_p, dtype=np.int64),
        edge_q=np.asarray(e_q, dtype=np.int64),
        edge_pattern=np.asarray(e_pat, dtype=np.uint8),
        edge_bits=np.asarray(e_bits, dtype=np.uint8),
        depth=k,
        hop_offsets=np.asarray(hop_offsets[:k + 1], dtype=np.int64),
        closed_degree=degs[nodes_arr] + 1,
    )


@dataclass
class NetworkStats:
    num_nodes: int
    num_edges: int
    pattern_counts: dict
    mean_degree: float
    max_degree: int


def network_stats(net):
    """Summary counts. Pattern counts are by bitset membership, so an edge
    carrying several patterns is counted under each."""
    counts = {pat: 0 for pat in LinkPattern}
    seen = 0
    for _u, _v, _label, bits in net.undirected_edges():
        seen += 1
        for pat, bit in PATTERN_BIT.items():
            if bits & bit:
                counts[pat] += 1
    degs = net.degrees()
    n = net.num_nodes
    return NetworkStats(
        num_nodes=n,
        num_edges=seen,
        pattern_counts=counts,
        mean_degree=float(2.0 * seen / n) if n else 0.0,
        max_degree=int(degs.max()) if n else 0,
    )


def export_edges(net):
    """Edge-list text: `u v PATTERN` per line, u < v, ascending order."""
    lines = []
    for u, v, label, _bits in net.undirected_edges():
        lines.append(f"{u} {v} {PATTERN_CODE[label]}")
    return "\n".join(lines) + ("\n" if lines else "")
