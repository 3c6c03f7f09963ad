"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

log = logging.getLogger("layoutgen")


class UsageError(Exception):
    pass


class ModelFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path: Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, dashes and underscores are interchangeable."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[cli]\n" + path.read_text())
    except configparser.Error as e:
        raise UsageError(f"bad config file {path}: {e}") from None
    return {k.replace("-", "_"): v for k, v in cp["cli"].items()}


# --- helpers ---------------------------------------------------------------------


def _corpus_config(args):
    from .core import PRESETS, QuantGrid
    from .corpus import CorpusConfig

    if args.vocab not in PRESETS:
        raise UsageError(f"unknown vocabulary preset {args.vocab!r}; choose from {sorted(PRESETS)}")
    return CorpusConfig(max_nodes=args.max_nodes, max_depth=args.max_depth, vocabulary=PRESETS[args.vocab],
                        grid=QuantGrid(*(args.bins,) * 4), seed=args.seed)


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _load_bundle(args):
    from .tasks import ModelBundle

    if not args.model:
        raise UsageError(f"{args.command} requires --model")
    try:
        return ModelBundle.load(_path(args, args.model))
    except FileNotFoundError:
        raise ModelFailure(f"model checkpoint {args.model} not found") from None
    except Exception as e:  # torch raises a zoo of types on bad checkpoints
        raise ModelFailure(f"cannot load model {args.model}: {e}") from e


def _read_layouts(args, path, vocab, grid):
    from .corpus import CorpusConfig, ingest_rico_like

    cfg = CorpusConfig(max_nodes=10**6, max_depth=10**6, vocabulary=vocab, grid=grid)
    return ingest_rico_like(_path(args, path), cfg)[0]


def _decode_options(args, seed: int):
    from .tasks import DecodeOptions

    return DecodeOptions(mode=args.mode, temperature=args.temperature, top_k=args.top_k, seed=seed,
                         max_nodes=args.max_nodes, max_depth=args.max_depth)


def _write_result(out: Path, name: str, res, vocab) -> dict:
    from .core import dumps_tree

    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.layout.json").write_text(dumps_tree(res.tree) + "\n")
    report = res.report_dict()
    (out / f"{name}.report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return {"name": name, "nodes": len(res.tree), "satisfied": report["satisfied"], "total": report["total"]}


# --- subcommands -------------------------------------------------------------------


def cmd_ingest(args) -> dict:
    from .corpus import ingest_rico_like, write_corpus

    cfg = _corpus_config(args)
    trees, report = ingest_rico_like(_path(args, args.input), cfg)
    out = _path(args, args.out)
    write_corpus(trees, out, cfg)
    (out / "ingest_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"message": f"kept {report.kept}, dropped {report.dropped}", **report.to_dict()}


def cmd_synth(args) -> dict:
    from .corpus import SyntheticGrammarSpec, generate_synthetic, write_corpus

    spec = SyntheticGrammarSpec()
    trees = generate_synthetic(spec, args.n, args.seed)
    cfg = _corpus_config(args)
    names = write_corpus(trees, _path(args, args.out), cfg)
    return {"message": f"wrote {len(names)} layouts", "layouts": len(names)}


def cmd_train(args) -> dict:
    from .corpus import read_corpus
    from .model import ModelConfig
    from .training import TrainConfig, TrainingDiverged, train

    cfg = _corpus_config(args)
    trees = read_corpus(_path(args, args.data), cfg, "train")
    if not trees:
        raise ValueError(f"no layouts found under {args.data}")
    mcfg = ModelConfig.for_layouts(
        cfg.vocabulary, cfg.grid, d_model=args.d_model, d_ff=4 * args.d_model, gen_layers=args.layers,
        enc_layers=args.layers, heads=args.heads, max_seq=args.max_seq,
        d_z=min(64, args.d_model),
    )
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       max_minutes=args.max_minutes)
    try:
        res = train(trees, mcfg, tcfg, out_dir=_path(args, args.out))
    except TrainingDiverged as e:
        raise ModelFailure(str(e)) from e
    return {"message": f"trained {len(res.epoch_losses)} epochs, final loss {res.epoch_losses[-1]:.4f}",
            "epoch_losses": res.epoch_losses, "checkpoint": str(res.checkpoint)}


def _conditions_for(args, task, source_tree, k: int):
    from .conditions import ConditionSet
    from .corpus import make_condition_set

    c = make_condition_set(source_tree, task, args.seed + k)
    return ConditionSet(c.attribute, c.org)


def cmd_generate(args) -> dict:
    from .conditions import ConditionSet, TaskKind
    from .tasks import load_request, run_task

    if not args.task and not args.request:
        raise UsageError("generate requires --task or --request")
    bundle = _load_bundle(args)
    out = _path(args, args.out)
    if args.request:
        req = load_request(_path(args, args.request), bundle.vocabulary, bundle.grid)
        res = req.run(bundle)
        return {"message": "generated 1 layout", "results": [_write_result(out, "request", res, bundle.vocabulary)]}
    task = TaskKind.parse(args.task)
    sources = _read_layouts(args, args.source, bundle.vocabulary, bundle.grid) if args.source else []
    if task not in (TaskKind.UGEN,) and not sources:
        raise UsageError(f"task {task.value} needs --source layouts to derive conditions (or use --request)")
    reference = None
    if task is TaskKind.STRUCTTRAN:
        if not args.reference:
            raise UsageError("structtran needs --reference")
        reference = _read_layouts(args, args.reference, bundle.vocabulary, bundle.grid)[0]
    results = []
    for k in range(args.n):
        cond = _conditions_for(args, task, sources[k % len(sources)], k) if sources else ConditionSet()
        res = run_task(task, bundle, cond, reference, _decode_options(args, args.seed + k))
        results.append(_write_result(out, f"{k:05d}", res, bundle.vocabulary))
    sat = sum(r["satisfied"] for r in results)
    tot = sum(r["total"] for r in results)
    return {"message": f"generated {len(results)} layouts, {sat}/{tot} conditions satisfied", "results": results}


def cmd_extract(args) -> dict:
    from .conditions import TaskKind
    from .core import dumps_tree
    from .metrics import baseline_extract_structure, strip_structure

    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.baseline:
        cfg = _corpus_config(args)
        trees = _read_layouts(args, args.input, cfg.vocabulary, cfg.grid)
        for k, t in enumerate(trees):
            leaves, internals = strip_structure(t)
            r = baseline_extract_structure(leaves, internals, t.vocabulary, t.grid)
            (out / f"{k:05d}.layout.json").write_text(dumps_tree(r) + "\n")
        return {"message": f"extracted {len(trees)} structures with the inclusion baseline"}
    from .tasks import run_task

    bundle = _load_bundle(args)
    trees = _read_layouts(args, args.input, bundle.vocabulary, bundle.grid)
    results = []
    for k, t in enumerate(trees):
        cond = _conditions_for(args, TaskKind.STRUCTEXTR, t, k)
        res = run_task(TaskKind.STRUCTEXTR, bundle, cond, None, _decode_options(args, args.seed + k),
                       rounds=args.rounds)
        results.append(_write_result(out, f"{k:05d}", res, bundle.vocabulary))
    return {"message": f"extracted {len(results)} structures", "results": results}


def cmd_transfer(args) -> dict:
    from .conditions import TaskKind
    from .tasks import run_task

    bundle = _load_bundle(args)
    reference = _read_layouts(args, args.reference, bundle.vocabulary, bundle.grid)[0]
    trees = _read_layouts(args, args.input, bundle.vocabulary, bundle.grid)
    out = _path(args, args.out)
    results = []
    for k, t in enumerate(trees):
        cond = _conditions_for(args, TaskKind.STRUCTTRAN, t, k)
        res = run_task(TaskKind.STRUCTTRAN, bundle, cond, reference, _decode_options(args, args.seed + k))
        results.append(_write_result(out, f"{k:05d}", res, bundle.vocabulary))
    return {"message": f"transferred structure onto {len(results)} layouts", "results": results}


def cmd_evaluate(args) -> dict:
    from .metrics import evaluate

    cfg = _corpus_config(args)
    pred = _read_layouts(args, args.pred, cfg.vocabulary, cfg.grid)
    ref = _read_layouts(args, args.ref, cfg.vocabulary, cfg.grid) if args.ref else None
    report = evaluate(pred, ref)
    if args.out:
        _path(args, args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.csv:
        _path(args, args.csv).write_text(report.to_csv())
    lines = [f"{k}: {v:.6g}" for k, v in report.scalars.items()]
    return {"message": "\n".join(lines), "metrics": report.scalars, "warnings": report.warnings}


def cmd_render(args) -> dict:
    from .render import RenderSpec, render_svg

    cfg = _corpus_config(args)
    trees = _read_layouts(args, args.input, cfg.vocabulary, cfg.grid)
    if not trees:
        raise ValueError(f"no layout in {args.input}")
    svg = render_svg(trees[0], RenderSpec(args.width, args.height, args.mode))
    _path(args, args.out).write_text(svg)
    return {"message": f"wrote {args.out}"}


def cmd_roundtrip(args) -> dict:
    from .corpus import random_tree
    from .serde import deserialize, serialize

    cfg = _corpus_config(args)
    rng = np.random.default_rng(args.seed)
    ok = 0
    for _ in range(args.n):
        t = random_tree(rng, cfg.vocabulary, cfg.grid, max_nodes=60, max_depth=6)
        ok += deserialize(serialize(t), t.vocabulary, t.grid) == t
    if ok != args.n:
        raise ValueError(f"round trip failed: {ok}/{args.n} exact")
    return {"message": f"{ok}/{args.n} exact", "exact": ok, "total": args.n}


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key = value file overriding defaults")
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--workdir", default=".", help="base for relative paths")
    common.add_argument("--vocab", default="synthetic", help="type vocabulary preset")
    common.add_argument("--bins", type=int, default=64)
    common.add_argument("--max-nodes", type=int, default=30)
    common.add_argument("--max-depth", type=int, default=5)
    common.add_argument("-v", "--verbose", action="store_true")

    decode = _Parser(add_help=False)
    decode.add_argument("--model")
    decode.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
    decode.add_argument("--temperature", type=float, default=1.0)
    decode.add_argument("--top-k", type=int, default=5)
    decode.add_argument("--out", default="generated")

    p = _Parser(prog="layoutgen", description="Hierarchical layout generation toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("ingest", parents=[common], help="import layout JSON into a corpus directory")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", parents=[common], help="sample a synthetic grammar corpus")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model on a corpus directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--d-model", type=int, default=128)
    s.add_argument("--layers", type=int, default=2)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--max-seq", type=int, default=64)
    s.add_argument("--max-minutes", type=float, default=0.0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", parents=[common, decode], help="run a generation task")
    s.add_argument("--task")
    s.add_argument("--request", help="task request JSON")
    s.add_argument("--source", help="layouts whose elements become conditions")
    s.add_argument("--reference", help="reference layout for structure transfer")
    s.add_argument("--n", type=int, default=1)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("extract", parents=[common, decode], help="infer a hierarchy for flat layouts")
    s.add_argument("--input", required=True)
    s.add_argument("--rounds", type=int, default=3)
    s.add_argument("--baseline", action="store_true", help="use the inclusion heuristic instead of a model")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("transfer", parents=[common, decode], help="impose a reference structure on elements")
    s.add_argument("--reference", required=True)
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("evaluate", parents=[common], help="compute layout metrics")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref")
    s.add_argument("--out")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", parents=[common], help="draw a layout as SVG")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("visible-only", "per-level", "overlay"), default="visible-only")
    s.add_argument("--width", type=int, default=360)
    s.add_argument("--height", type=int, default=640)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("roundtrip-check", parents=[common], help="serialize/deserialize random trees")
    s.add_argument("--n", type=int, default=10000)
    s.set_defaults(func=cmd_roundtrip)
    return p


def _parse(argv: Sequence[str]):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        overrides = read_config(_path(args, args.config))
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        sp.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def _classify(exc: BaseException) -> int:
    from .core import LayoutError
    from .model.network import CapacityError, EmbeddingError

    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (ModelFailure, EmbeddingError, CapacityError)):
        return EXIT_MODEL
    if isinstance(exc, (LayoutError, OSError, ValueError, KeyError, json.JSONDecodeError)):
        return EXIT_DATA
    return EXIT_MODEL


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json" in argv
    try:
        args = _parse(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        func: Callable = args.func
        payload = func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _classify(exc)
        msg = str(exc) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        if code == EXIT_USAGE and not as_json:
            print("run 'layoutgen <command> --help' for usage", file=sys.stderr)
        if as_json:
            print(json.dumps({"ok": False, "exit_code": code, "error": msg, "type": type(exc).__name__}))
        return code
    if args.json:
        print(json.dumps({"ok": True, **{k: v for k, v in payload.items()}}, sort_keys=True, default=str))
    else:
        print(payload.get("message", "ok"))
    return EXIT_OK
