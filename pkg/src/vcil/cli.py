"""Command-line entry point: ``vcil datagen | train | analyze | report``.

Exit codes: 0 success, 1 user error, 2 internal invariant violation.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import analyzer, harness, report
from .backbone import BlockConfig
from .datagen import default_classes, export_corpus, generate_corpus
from .numerics import ShapeError

SCHEMA = 1
SECTIONS = {"train": harness.TrainConfig, "block": BlockConfig, "corpus": harness.CorpusConfig,
            "stream": harness.StreamConfig}
TOP_KEYS = {"schema", "corpus_path", "output", *SECTIONS}
ABLATIONS = {
    "no-rr": {"relation_recovery": False},
    "no-cc": {"compensation": False},
    "no-causal": {"relation_recovery": False, "compensation": False},
    "no-sep-ada": {"sep_ada": False, "relation_recovery": False, "compensation": False},
    "mlp-adapter": {"sep_ada": False, "mlp_adapter": True, "relation_recovery": False, "compensation": False},
    "no-cross-attention": {"cross_attention": False},
}


class UserError(Exception):
    pass


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _unknown(text: str, key: str, where: str) -> UserError:
    line = _line_of(text, key)
    at = f" (line {line})" if line else ""
    return UserError(f"unknown config key '{key}' in {where}{at}")


def parse_config(text: str, source: str = "<config>") -> harness.ExperimentConfig:
    """Parse a JSON experiment config; unknown keys are rejected, missing ones defaulted."""
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise UserError(f"{source}: invalid JSON at line {e.lineno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise UserError(f"{source}: top level must be an object")
    for key in doc:
        if key not in TOP_KEYS:
            raise _unknown(text, key, source)
    if doc.get("schema", SCHEMA) != SCHEMA:
        raise UserError(f"{source}: unsupported schema {doc['schema']} (expected {SCHEMA})")
    parts = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise UserError(f"{source}: '{name}' must be an object")
        fields = {f.name for f in dataclasses.fields(cls)}
        for key in section:
            if key not in fields:
                raise _unknown(text, key, f"{source} [{name}]")
        if "motions" in section:
            section = {**section, "motions": tuple(section["motions"])}
        try:
            parts[name] = cls(**section)
        except (TypeError, ValueError) as e:
            raise UserError(f"{source} [{name}]: {e}") from None
    return harness.ExperimentConfig(parts["train"], parts["block"], parts["corpus"], parts["stream"],
                                    doc.get("corpus_path"), doc.get("output", "runs/default"))


def load_config(path: str | Path) -> harness.ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise UserError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def _replace_train(config: harness.ExperimentConfig, **changes) -> harness.ExperimentConfig:
    try:
        train = dataclasses.replace(config.train, **changes)
    except ValueError as e:
        raise UserError(str(e)) from None
    return dataclasses.replace(config, train=train)


# -- commands --------------------------------------------------------------------------

def cmd_datagen(args) -> int:
    full = load_config(args.config) if args.config else harness.ExperimentConfig()
    cfg = full.corpus
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.textures is not None:
        changes["n_textures"] = args.textures
    cfg = dataclasses.replace(cfg, **changes)
    corpus = generate_corpus(default_classes(cfg.n_textures, tuple(cfg.motions)), cfg.train_per_class,
                             cfg.test_per_class, cfg.seed, full.block.frames, full.block.frame_size)
    out = Path(args.out)
    try:
        export_corpus(corpus, out)
        (out / "corpus_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    except OSError as e:
        raise UserError(f"cannot write corpus to {out}: {e.strerror or e}") from None
    print(f"wrote {len(corpus.classes)} classes x {cfg.train_per_class + cfg.test_per_class} clips "
          f"(seed {cfg.seed}) to {out}")
    return 0


def _train_config(args) -> harness.ExperimentConfig:
    config = load_config(args.config)
    notes = []
    for name in args.ablate or []:
        config = _replace_train(config, **ABLATIONS[name])
        if name in ("no-rr", "no-causal"):
            notes.append("relation recovery disabled: L_S and L_T pinned to 0")
        if name in ("no-cc", "no-causal"):
            notes.append("compensation disabled: E_S and E_T pinned to 0")
    if args.seed is not None:
        config = _replace_train(config, seed=args.seed)
    if args.epochs is not None:
        config = _replace_train(config, epochs=args.epochs)
    if args.base_epochs is not None:
        config = _replace_train(config, base_epochs=args.base_epochs)
    stream = config.stream
    if args.tasks is not None:
        stream = dataclasses.replace(stream, tasks=args.tasks)
    if args.split is not None:
        stream = dataclasses.replace(stream, style=args.split)
    config = dataclasses.replace(config, stream=stream)
    if args.corpus is not None:
        config = dataclasses.replace(config, corpus_path=args.corpus)
    if args.out is not None:
        config = dataclasses.replace(config, output=args.out)
    for n in notes:
        print(n)
    return config


def cmd_train(args) -> int:
    config = _train_config(args)
    if config.corpus_path and not Path(config.corpus_path, "index.json").exists() and not args.generate:
        raise UserError(f"corpus not found at {config.corpus_path} (pass --generate to build it)")
    try:
        corpus = harness.corpus_for(config)
        harness.stream_for(config, corpus)
    except ValueError as e:
        raise UserError(str(e)) from None
    out = Path(config.output)

    def progress(n, acc):
        if not args.quiet:
            print(f"task {n}: acc {acc:.4f}", flush=True)

    result = harness.run_experiment(config, out, corpus=corpus, progress=progress)
    print(f"Acc_N {result.acc_n:.4f}  BWF {'n/a' if result.bwf is None else f'{result.bwf:.4f}'}  -> {out}")
    return 0


def cmd_analyze(args) -> int:
    run = Path(args.run_dir)
    files = sorted((run / "relation_curves").glob("*.csv")) if (run / "relation_curves").is_dir() else []
    if not (run / "relation_curves").is_dir():
        raise UserError(f"{run}: no relation_curves/ directory")
    rows = [["curve", "pair", "mean_cos", "conflict_fraction", "points"]]
    for f in files:
        data = analyzer.read_curve(f)
        for col, s in analyzer.summarize_curve(data).items():
            rows.append([f.stem, col[4:], harness.SIG.format(s["mean"]), harness.SIG.format(s["conflict_fraction"]),
                         str(len(data))])
    text = "\n".join(",".join(r) for r in rows) + "\n"
    (run / "analysis.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_report(args) -> int:
    try:
        text = report.report(args.run_dirs, args.out, plots=not args.no_plots)
    except report.IncompleteRunError as e:
        raise UserError(str(e)) from None
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vcil", description="Desk-scale video class-incremental learning lab.")
    p.add_argument("--seed", dest="global_seed", type=int,
                   help="seed applied to any subcommand that does not set its own --seed")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="render and export a synthetic corpus")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--config", help="experiment config whose [corpus] section to use")
    d.add_argument("--textures", type=int, help="number of textures (2 motions each)")
    d.add_argument("--seed", type=int, help="corpus seed (default 42)")
    d.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", help="run the incremental protocol and write a run directory")
    t.add_argument("config", help="JSON experiment config")
    t.add_argument("--out", help="run directory (default: the config's output)")
    t.add_argument("--ablate", action="append", choices=sorted(ABLATIONS), help="switch a mechanism off (repeatable)")
    t.add_argument("--tasks", type=int, help="number of tasks in the stream")
    t.add_argument("--split", choices=("balanced", "head-heavy"), help="how classes are split into tasks")
    t.add_argument("--corpus", help="corpus directory from `vcil datagen`")
    t.add_argument("--generate", action="store_true", help="render the corpus if --corpus does not exist")
    t.add_argument("--epochs", type=int, help="epochs for tasks n >= 1")
    t.add_argument("--base-epochs", type=int, help="epochs for task 0")
    t.add_argument("--seed", type=int, help="training seed (default 42)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="summarise the gradient relation curves of a run")
    a.add_argument("run_dir")
    a.add_argument("--seed", type=int, help="accepted for uniformity; analysis is deterministic")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="summary table (one run) or ablation grid (several)")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", help="where report.csv and figures go")
    r.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    r.add_argument("--seed", type=int, help="accepted for uniformity; reports are deterministic")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None:
        args.seed = args.global_seed
    try:
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (harness.StageError, ShapeError, AssertionError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
