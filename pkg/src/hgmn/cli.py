"""``hgmn`` command line.

Exit codes: 0 success, 1 validation failure (bad graph, config or spec;
unreadable or unwritable files), 2 numeric failure (divergence, failed
gradient check or self-test), 64 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .errors import HgmnError, NonFiniteError
from .hetgraph import count_instances, enumerate_instances, load_graph_file
from .model import HgmnModel, prepare
from .report import RunManifest, write_report
from .training import evaluate, gradient_check, make_checkpoint, restore, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 64
GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hgmn", description="Heterogeneous graph node classification with "
                                         "ordered selective state-space scans.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("validate", help="check a graph document")
    s.add_argument("graph")

    s = sub.add_parser("gen-synthetic", help="write a planted-signal graph")
    s.add_argument("--spec", required=True, help="synthetic spec (JSON)")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("enumerate", help="count or list metapath instances")
    s.add_argument("graph")
    s.add_argument("--metapath", required=True)
    s.add_argument("--node", help="node id or name; omit for every start node")
    s.add_argument("--instances", action="store_true", help="list instances instead of counting")

    s = sub.add_parser("train", help="train and write checkpoints plus metrics")
    s.add_argument("graph")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-inner-order", action="store_true",
                   help="seeded random order within each node type")
    s.add_argument("--no-outer-order", action="store_true",
                   help="seeded random graph-wide order")
    s.add_argument("--quiet", action="store_true", help="no per-epoch lines")

    s = sub.add_parser("eval", help="metrics of a checkpoint on one split")
    s.add_argument("graph")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test")

    s = sub.add_parser("gradcheck", help="finite differences against tape gradients")
    s.add_argument("graph")
    s.add_argument("--config", required=True)
    s.add_argument("--epsilon", type=float, default=1e-5)
    s.add_argument("--max-coords", type=int, default=25)

    sub.add_parser("selftest", help="kernel equivalence checks")
    return p


def _validate(args) -> int:
    g = load_graph_file(args.graph)
    counts = {nt.name: int(ids.size) for nt, ids in zip(g.node_types, g.type_nodes)}
    edges = {k: int(v[0].size) for k, v in g.edges.items()}
    print(f"ok: {g.node_count} nodes {counts}, edges {edges}, "
          f"metapaths {list(g.metapaths)}, splits "
          f"{ {k: int(v.size) for k, v in g.splits.items()} }")
    return EXIT_OK


def _gen_synthetic(args) -> int:
    from .checkpoint import atomic_write_bytes
    from .synthetic import dumps_document, generate, load_spec

    spec = load_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "graph.json"
    atomic_write_bytes(path, dumps_document(generate(spec)).encode("utf-8"))
    print(path)
    return EXIT_OK


def _enumerate(args) -> int:
    g = load_graph_file(args.graph)
    schema = g.schema(args.metapath)
    if args.node is not None:
        nodes = [g.resolve_node(args.node)]
    else:
        nodes = g.type_nodes[g.type_index[schema.start_type]].tolist()
    for node in nodes:
        if args.instances:
            for inst in enumerate_instances(g, schema, node):
                print(" ".join(map(str, inst.nodes)))
        elif args.node is not None:
            print(count_instances(g, [schema], node))
        else:
            print(f"{node}\t{count_instances(g, [schema], node)}")
    return EXIT_OK


def _train(args) -> int:
    g = load_graph_file(args.graph)
    cfg = load_config(args.config)
    if args.no_inner_order:
        cfg = cfg.replace(inner_order_mode="random")
    if args.no_outer_order:
        cfg = cfg.replace(outer_order_mode="random")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.for_inputs(cfg.to_dict(), [args.graph, args.config], cfg.seed,
                                      ablation={"inner_order": not args.no_inner_order,
                                                "outer_order": not args.no_outer_order})
    model = HgmnModel(g, cfg)
    prep = prepare(g, cfg)

    def on_epoch(row):
        manifest.append(row)
        if not args.quiet:
            print(f"epoch {row.epoch:4d}  loss {row.train_loss:.6f}  val_acc {row.val_acc:.4f}  "
                  f"val_macro_f1 {row.val_macro_f1:.4f}", flush=True)

    state = train(model, g, cfg, prep=prep, on_epoch=on_epoch)
    save_checkpoint(out / "last.ckpt", make_checkpoint(model, state))
    best = make_checkpoint(model, state, best=True)
    save_checkpoint(out / "best.ckpt", best)
    restore(model, best)
    test = g.splits.get("test")
    if test is not None and test.size:
        manifest.test_metrics = evaluate(model, g, test, prep)
    manifest.extra["best_epoch"] = state.best_epoch
    write_report(manifest, out)
    summary = {"best_epoch": state.best_epoch, "best_val_macro_f1": state.best_metric}
    if manifest.test_metrics is not None:
        summary["test"] = manifest.test_metrics
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _eval(args) -> int:
    g = load_graph_file(args.graph)
    ckpt = load_checkpoint(args.checkpoint)
    schemas = [g.schema(name) for name in ckpt.meta["metapaths"]]
    model = HgmnModel(g, ckpt.config, num_classes=ckpt.meta["num_classes"], schemas=schemas)
    restore(model, ckpt)
    ids = g.splits.get(args.split)
    if ids is None or not ids.size:
        print(f"split {args.split!r} is missing or empty", file=sys.stderr)
        return EXIT_INVALID
    prep = prepare(g, ckpt.config, schemas)
    print(json.dumps(evaluate(model, g, ids, prep), sort_keys=True))
    return EXIT_OK


def _gradcheck(args) -> int:
    g = load_graph_file(args.graph)
    cfg = load_config(args.config)
    report = gradient_check(HgmnModel(g, cfg), g, epsilon=args.epsilon, max_coords=args.max_coords)
    worst = 0.0
    for name, entry in report.items():
        err = entry["max_rel_err"]
        worst = max(worst, err)
        flag = "ok  " if err <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{flag} {err:.3e}  {name}")
    print(f"max relative error {worst:.3e} over {len(report)} parameter groups")
    return EXIT_OK if worst <= GRADCHECK_TOLERANCE else EXIT_NUMERIC


def _selftest(args) -> int:
    from .selftest import run_all

    ok = True
    for check in run_all():
        ok &= check.passed
        print(f"{'ok  ' if check.passed else 'FAIL'} {check.name}: max error {check.error:.3e} "
              f"(tolerance {check.tolerance:.0e})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"validate": _validate, "gen-synthetic": _gen_synthetic, "enumerate": _enumerate,
            "train": _train, "eval": _eval, "gradcheck": _gradcheck, "selftest": _selftest}


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except HgmnError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run_cli())
