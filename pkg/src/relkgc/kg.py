"""Knowledge-graph parsing, incidence indexes, inductive splits, embeddings.

Triple files are UTF-8 text, one `head<TAB>relation<TAB>tail` per line.
Blank lines and lines starting with `#` are ignored. Vocabularies intern
names in first-appearance order so a file always parses to the same ids.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from . import tensor


class MalformedLine(ValueError):
    def __init__(self, line_no, text):
        self.line_no = line_no
        super().__init__(f"line {line_no}: expected 3 tab-separated fields, got {text!r}")


class EmptyInput(ValueError):
    pass


class EmptyTrainGraph(ValueError):
    pass


@dataclass(frozen=True)
class Triple:
    head: int
    rel: int
    tail: int


@dataclass
class KnowledgeGraph:
    entity_names: list
    relation_names: list
    triples: list
    # incidence: triple ids where entity e appears as head / as tail,
    # each list sorted ascending (construction appends in triple order)
    head_incidence: list = field(default_factory=list)
    tail_incidence: list = field(default_factory=list)

    @property
    def num_entities(self):
        return len(self.entity_names)

    @property
    def num_relations(self):
        return len(self.relation_names)

    @property
    def num_triples(self):
        return len(self.triples)

    def triple_set(self):
        """Set of (head, rel, tail) tuples, for corruption filtering."""
        return {(t.head, t.rel, t.tail) for t in self.triples}

    def triple_arrays(self):
        """Head/rel/tail id columns as int64 arrays."""
        n = len(self.triples)
        h = np.empty(n, dtype=np.int64)
        r = np.empty(n, dtype=np.int64)
        t = np.empty(n, dtype=np.int64)
        for i, tr in enumerate(self.triples):
            h[i], r[i], t[i] = tr.head, tr.rel, tr.tail
        return h, r, t

    def with_entities(self, extra_names):
        """A copy whose entity vocabulary is extended by `extra_names`.

        The new entities have empty incidence; triples are unchanged. Used
        when an eval file mentions entities absent from the training graph.
        """
        kg = KnowledgeGraph(
            entity_names=list(self.entity_names) + list(extra_names),
            relation_names=list(self.relation_names),
            triples=list(self.triples),
        )
        kg.head_incidence = [list(l) for l in self.head_incidence] + [[] for _ in extra_names]
        kg.tail_incidence = [list(l) for l in self.tail_incidence] + [[] for _ in extra_names]
        return kg


def _build_incidence(kg):
    kg.head_incidence = [[] for _ in range(kg.num_entities)]
    kg.tail_incidence = [[] for _ in range(kg.num_entities)]
    for i, t in enumerate(kg.triples):
        kg.head_incidence[t.head].append(i)
        kg.tail_incidence[t.tail].append(i)


def _data_lines(text):
    if hasattr(text, "read"):
        text = text.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    for line_no, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield line_no, line


def parse_triples(text):
    """Parse a triple file into a KnowledgeGraph.

    Accepts str, bytes, or a file-like object. Raises MalformedLine for a
    wrong field count (with its 1-based line number) and EmptyInput when no
    data lines remain.
    """
    entity_ids = {}
    relation_ids = {}
    entity_names = []
    relation_names = []
    triples = []

    def intern(name, ids, names):
        if name not in ids:
            ids[name] = len(names)
            names.append(name)
        return ids[name]

    for line_no, line in _data_lines(text):
        fields = line.split("\t")
        if len(fields) != 3:
            raise MalformedLine(line_no, line)
        h = intern(fields[0], entity_ids, entity_names)
        r = intern(fields[1], relation_ids, relation_names)
        t = intern(fields[2], entity_ids, entity_names)
        triples.append(Triple(h, r, t))

    if not triples:
        raise EmptyInput("no triples found")
    kg = KnowledgeGraph(entity_names, relation_names, triples)
    _build_incidence(kg)
    return kg


def serialize_triples(kg):
    """Inverse of parse_triples: triples back to TSV text, file order."""
    lines = []
    for t in kg.triples:
        lines.append(f"{kg.entity_names[t.head]}\t{kg.relation_names[t.rel]}\t{kg.entity_names[t.tail]}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_eval_triples(text, kg):
    """Parse an eval file against an existing vocabulary.

    Entities not in `kg` are appended to a copy of its vocabulary (they are
    the unseen entities of the inductive setting); unknown relations are an
    error since relations cannot be unseen here. Returns (extended_kg,
    triples, touches_unseen flags).
    """
    entity_ids = {n: i for i, n in enumerate(kg.entity_names)}
    relation_ids = {n: i for i, n in enumerate(kg.relation_names)}
    extra = []
    raw = []
    for line_no, line in _data_lines(text):
        fields = line.split("\t")
        if len(fields) != 3:
            raise MalformedLine(line_no, line)
        raw.append((line_no, fields))
        for name in (fields[0], fields[2]):
            if name not in entity_ids:
                entity_ids[name] = len(kg.entity_names) + len(extra)
                extra.append(name)
    if not raw:
        raise EmptyInput("no eval triples found")

    out_kg = kg.with_entities(extra) if extra else kg
    known = set(range(kg.num_entities))
    triples = []
    flags = []
    for line_no, fields in raw:
        if fields[1] not in relation_ids:
            raise MalformedLine(line_no, f"unknown relation {fields[1]!r}")
        h = entity_ids[fields[0]]
        t = entity_ids[fields[2]]
        triples.append(Triple(h, relation_ids[fields[1]], t))
        flags.append(h not in known or t not in known)
    return out_kg, triples, flags


@dataclass
class InductiveSplit:
    train_graph: KnowledgeGraph
    eval_triples: list
    touches_unseen: list
    unseen_entities: set
    seed: int


def make_inductive_split(kg, unseen_fraction, seed):
    """Sample unseen entities and split triples into train/eval.

    floor(unseen_fraction * |E|) entities are drawn uniformly without
    replacement. Every triple touching one of them moves to eval_triples;
    the training graph keeps the full vocabulary but only the remaining
    triples. Deterministic in (kg, fraction, seed).
    """
    if not 0.0 <= unseen_fraction <= 1.0:
        raise ValueError(f"unseen_fraction {unseen_fraction} outside [0, 1]")
    gen = rng_mod.substream(seed, "split")
    n_unseen = int(np.floor(unseen_fraction * kg.num_entities))
    unseen = set(gen.choice(kg.num_entities, size=n_unseen, replace=False).tolist()) if n_unseen else set()

    train_triples = []
    eval_triples = []
    flags = []
    for t in kg.triples:
        if t.head in unseen or t.tail in unseen:
            eval_triples.append(t)
            flags.append(True)
        else:
            train_triples.append(t)
    if not train_triples:
        raise EmptyTrainGraph("every triple touches an unseen entity")

    train = KnowledgeGraph(list(kg.entity_names), list(kg.relation_names), train_triples)
    _build_incidence(train)
    return InductiveSplit(train, eval_triples, flags, unseen, seed)


@dataclass
class EmbeddingTables:
    entity_emb: tensor.Tensor    # frozen: requires_grad stays False
    relation_emb: tensor.Tensor
    dim: int


def init_embeddings(kg, dim, seed):
    """Xavier-normal tables: variance 2/(fan_in+fan_out) with both fans
    equal to `dim` for embedding rows. The entity table is frozen."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    gen = rng_mod.substream(seed, "init", 0)
    ent = tensor.xavier_normal(gen, (kg.num_entities, dim), dim, dim)
    rel = tensor.xavier_normal(gen, (kg.num_relations, dim), dim, dim)
    return EmbeddingTables(
        entity_emb=tensor.Tensor(ent, requires_grad=False),
        relation_emb=tensor.Tensor(rel, requires_grad=True),
        dim=dim,
    )
