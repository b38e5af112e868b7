"""Command-line front end.

Subcommands wrap one pipeline stage each: split a KG into an inductive
train/eval pair, build or inspect the triple-level relation network, train
a model to a checkpoint, rank held-out triples, verify the influence
characterization on a small graph, and run the gradient suite.

Exit codes: 0 success, 2 input or config error, 3 training failure,
4 verification failure. Every command is deterministic given its flags, so
repeated runs produce byte-identical artifacts.
"""

import argparse
import sys
from pathlib import Path

from . import __version__, gradcheck, influence, kg, pipeline, relnet
from .layers import MpLayerKind

# train flags that mirror config-file keys; values stay strings and are
# parsed by TrainConfig.from_kv so file and flag grammar cannot drift
_CONFIG_KEYS = (
    "dim", "gnn", "depth", "estimator", "combiner", "mask", "degree_cap",
    "learning_rate", "batch_size", "epochs", "margin", "seed",
    "tie_omega_psi", "jsd_as_printed",
)


def parse_config_text(text):
    """`key = value` lines into a dict of strings; # starts a comment."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ValueError(f"config line {line_no}: expected key = value")
        out[key.strip()] = value.strip()
    return out


def _read(path):
    return Path(path).read_text(encoding="utf-8")


def _cmd_split(args):
    graph = kg.parse_triples(_read(args.input))
    split = kg.make_inductive_split(graph, args.unseen_frac, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    (out / "train.tsv").write_text(kg.serialize_triples(split.train_graph),
                                   encoding="utf-8")
    eval_lines = [
        f"{graph.entity_names[t.head]}\t{graph.relation_names[t.rel]}\t{graph.entity_names[t.tail]}"
        for t in split.eval_triples
    ]
    (out / "eval.tsv").write_text(
        "\n".join(eval_lines) + ("\n" if eval_lines else ""), encoding="utf-8")
    unseen = [graph.entity_names[e] for e in sorted(split.unseen_entities)]
    (out / "unseen_entities.txt").write_text(
        "\n".join(unseen) + ("\n" if unseen else ""), encoding="utf-8")

    print(f"train_triples={split.train_graph.num_triples} "
          f"eval_triples={len(split.eval_triples)} "
          f"unseen_entities={len(unseen)}")
    return 0


def _cmd_build_net(args):
    graph = kg.parse_triples(_read(args.input))
    mask = relnet.PatternMask.from_codes(args.mask)
    net = relnet.build_relation_network(graph, mask, args.degree_cap, args.seed)
    if args.stats:
        stats = relnet.network_stats(net)
        print(f"nodes={stats.num_nodes}")
        print(f"edges={stats.num_edges}")
        for pattern in relnet.LinkPattern:
            print(f"pattern_{relnet.PATTERN_CODE[pattern]}="
                  f"{stats.pattern_counts[pattern]}")
        print(f"mean_degree={stats.mean_degree:.6f}")
        print(f"max_degree={stats.max_degree}")
    if args.export:
        Path(args.export).write_text(relnet.export_edges(net), encoding="utf-8")
    return 0


def _cmd_train(args):
    kv = {}
    if args.config:
        kv.update(parse_config_text(_read(args.config)))
    for key in _CONFIG_KEYS:
        value = getattr(args, key)
        if value is not None:
            kv[key] = value
    cfg = pipeline.TrainConfig.from_kv(kv)
    graph = kg.parse_triples(_read(args.train))

    def on_epoch(epoch, loss):
        print(f"epoch={epoch} loss={loss:.6f}")

    ckpt = pipeline.train(graph, cfg, on_epoch=on_epoch)
    pipeline.save_checkpoint(ckpt, args.out_checkpoint)
    return 0


def _cmd_eval(args):
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    train_graph = kg.parse_triples(_read(args.train))
    if (train_graph.entity_names != ckpt.entities
            or train_graph.relation_names != ckpt.relations):
        raise ValueError("training file vocabulary does not match checkpoint")
    extended, eval_triples, _ = kg.parse_eval_triples(_read(args.eval), train_graph)
    net = relnet.build_relation_network(train_graph, ckpt.cfg.mask,
                                        ckpt.cfg.degree_cap, ckpt.cfg.seed)
    report = pipeline.evaluate(ckpt, net, extended, eval_triples,
                               mode=pipeline.RankingMode(args.mode),
                               seed=args.seed)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_kv(), encoding="utf-8")
    return 0


def _cmd_verify_influence(args):
    if args.layer == MpLayerKind.GAT.value and args.mode != "gat-contrast":
        print(f"error: {args.mode} mode is undefined for the learnable "
              "family; use --mode gat-contrast", file=sys.stderr)
        return 2
    try:
        graph = influence.builtin_graph(args.graph_spec)
    except ValueError:
        graph = influence.load_edge_list(_read(args.graph_spec))
    report = influence.verify_influence(
        MpLayerKind(args.layer), graph, args.k,
        trials=args.trials, seed=args.seed, mode=args.mode)
    print(influence.format_report(report))
    return 0 if report.passed else 4


def _cmd_gradcheck(args):
    results = gradcheck.run_suite(seed=args.seed, perturb=args.perturb)
    for r in results:
        print(f"component={r.name} max_rel_err={r.max_rel_err:.3e} worst={r.worst}")
    return 0 if all(r.passed for r in results) else 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="relkgc",
        description="Inductive KG completion over a triple-level relation network.")
    parser.add_argument(
        "--version", action="version",
        version=f"relkgc {__version__} "
                f"(checkpoint format {pipeline.CHECKPOINT_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split a KG into inductive train/eval files")
    p.add_argument("--input", required=True, help="triple TSV file")
    p.add_argument("--unseen-frac", type=float, required=True,
                   help="fraction of entities held out as unseen")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True,
                   help="writes train.tsv, eval.tsv, unseen_entities.txt")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("build-net", help="build the triple-level relation network")
    p.add_argument("--input", required=True, help="triple TSV file")
    p.add_argument("--mask", default="HH,TT,HT",
                   help="enabled link patterns, comma-separated subset of HH,TT,HT")
    p.add_argument("--degree-cap", type=int, default=None,
                   help="seeded per-node neighbor sampling cap")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stats", action="store_true", help="print the stats table")
    p.add_argument("--export", metavar="PATH", default=None,
                   help="write the edge list to PATH")
    p.set_defaults(func=_cmd_build_net)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", default=None,
                   help="key = value config file; flags below override it")
    p.add_argument("--train", required=True, help="training triple TSV file")
    p.add_argument("--out-checkpoint", required=True)
    for key in _CONFIG_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                       metavar="V")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="rank held-out triples against a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True,
                   help="the exact training file the checkpoint was built from")
    p.add_argument("--eval", required=True, help="held-out triple TSV file")
    p.add_argument("--mode", choices=[m.value for m in pipeline.RankingMode],
                   default=pipeline.RankingMode.RELATIONS.value)
    p.add_argument("--seed", type=int, default=0,
                   help="tail-candidate sampling seed (tails mode)")
    p.add_argument("--out", default=None, help="also write the report to a file")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("verify-influence",
                       help="check influence distributions against the walk oracle")
    p.add_argument("--layer", choices=[k.value for k in MpLayerKind],
                   default=MpLayerKind.GCN.value)
    p.add_argument("--k", type=int, default=2, help="stack depth")
    p.add_argument("--graph-spec", default="path-4",
                   help="builtin name (path-N, cycle-N, star-N, asym-gadget) "
                        "or an edge-list file")
    p.add_argument("--trials", type=int, default=32,
                   help="redraws in statistical mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=["exact", "statistical", "gat-contrast"],
                   default="exact")
    p.set_defaults(func=_cmd_verify_influence)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", action="store_true",
                   help="mis-scale the matmul backward rule (negative control)")
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def entrypoint(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits itself on --help/--version (0) and usage errors (2)
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except pipeline.TrainingFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(entrypoint())
