"""Inductive knowledge-graph completion over a triple-level relation network.

Triples become nodes, shared entities become edges, and two message-passing
stacks trained with a mutual-information objective embed whole triples so
unseen entities can be scored without retraining. Ships with a small
autodiff engine, an influence-distribution verifier, and a CLI.
"""

__version__ = "0.1.0"

from .kg import (
    KnowledgeGraph,
    Triple,
    make_inductive_split,
    parse_eval_triples,
    parse_triples,
    serialize_triples,
)
from .relnet import (
    PatternMask,
    RelationNetwork,
    build_relation_network,
    ego_graph,
    insert_node,
    network_stats,
)
from .layers import CombinerKind, GnnStack, MpLayerKind, mp_forward
from .objectives import MiEstimatorKind
from .tensor import Adam, Tensor, backward, count_macs, tape
from .pipeline import (
    Checkpoint,
    EvalReport,
    InferenceContext,
    RankingMode,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    score_triple,
    train,
)
from .influence import builtin_graph, format_report, verify_influence
from .gradcheck import run_suite

__all__ = [
    "__version__",
    "KnowledgeGraph", "Triple", "make_inductive_split", "parse_eval_triples",
    "parse_triples", "serialize_triples",
    "PatternMask", "RelationNetwork", "build_relation_network", "ego_graph",
    "insert_node", "network_stats",
    "CombinerKind", "GnnStack", "MpLayerKind", "mp_forward",
    "MiEstimatorKind",
    "Adam", "Tensor", "backward", "count_macs", "tape",
    "Checkpoint", "EvalReport", "InferenceContext", "RankingMode",
    "TrainConfig", "evaluate", "load_checkpoint", "save_checkpoint",
    "score_triple", "train",
    "builtin_graph", "format_report", "verify_influence",
    "run_suite",
]
