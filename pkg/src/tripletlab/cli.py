"""Command line entry point: ``tripletlab <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data as data_mod
from .knowledge import (fixture_path, ingest_embeddings, parse_knowledge_file, stub_table,
                        write_embeddings)
from .trace import read_diagnostics, rows_to_csv
from .train import (TrainConfig, ablate, eval_checkpoint, load_kb_dir, sweep_prefix_location,
                    train, write_ablation, write_json)

log = logging.getLogger("tripletlab")


def _read_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _train_config(args, extra=None):
    """Config file values, then any flag given on the command line."""
    doc = _read_config(args.config)
    doc = doc["train"] if "train" in doc else {k: v for k, v in doc.items()
                                                if k not in ("data", "locations", "seeds")}
    cfg = TrainConfig.from_dict({**doc, **(extra or {})})
    overrides = {}
    if getattr(args, "no_gpi", False):
        overrides["gpi"] = False
    if getattr(args, "no_tsp", False):
        overrides["tsp"] = False
    for flag, key in (("loss", "loss"), ("gamma", "gamma"), ("alpha", "alpha"),
                      ("prefix_loc", "prefix_location"), ("topk", "topk"),
                      ("seed", "seed"), ("epochs", "epochs")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    return replace(cfg, **overrides)


def cmd_gen_data(args):
    doc = _read_config(args.config)
    doc = doc.get("data", doc)
    cfg = data_mod.DataConfig.from_dict(doc)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    ds = data_mod.generate_dataset(cfg)
    data_mod.serialize_dataset(ds, args.out)
    counts = ds.class_counts("train")
    print(f"wrote {len(ds.videos)} videos to {args.out} "
          f"(train count max {counts.max()}, min {counts.min()})")


def cmd_build_kb(args):
    src = args.knowledge or fixture_path()
    kb = parse_knowledge_file(src)
    if args.embeddings == "stub":
        if args.dim is None:
            raise SystemExit("--dim is required with --embeddings stub")
        table = stub_table(kb, args.dim, args.stub_seed)
    else:
        table = ingest_embeddings(args.embeddings, kb.sentence_ids())
        if args.dim is not None and table.dim != args.dim:
            raise SystemExit(f"embedding dim {table.dim} differs from --dim {args.dim}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "knowledge.json", "w", encoding="utf-8") as fh:
        json.dump(kb.to_json(), fh, indent=1)
        fh.write("\n")
    ids = kb.sentence_ids()
    write_embeddings(type(table)({i: table[i] for i in ids}, source=table.source),
                     out / "embeddings.tsv")
    print(f"wrote {len(ids)} sentence embeddings (dim {table.dim}) to {out}")


def cmd_train(args):
    cfg = _train_config(args)
    ds = data_mod.load_dataset(args.data)
    knowledge = load_kb_dir(args.kb) if args.kb else None
    run = train(cfg, ds, knowledge, progress=log.info)
    run.save(args.out)
    print(json.dumps({k: run.metrics["final"][k] for k in sorted(run.metrics["final"])}))


def cmd_eval(args):
    ds = data_mod.load_dataset(args.data)
    report = eval_checkpoint(args.checkpoint, ds, args.split)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_json(report, args.out)
    print(f"wrote {args.out}")


def cmd_trace(args):
    rows = read_diagnostics(Path(args.run) / "diagnostics.jsonl")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(rows_to_csv(rows), encoding="utf-8")
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_ablate(args):
    doc = _read_config(args.config)
    cfg = _train_config(args)
    ds = data_mod.load_dataset(args.data)
    knowledge = load_kb_dir(args.kb)
    rows = ablate(cfg, ds, knowledge, out_dir=args.out)
    locations = doc.get("locations")
    if args.locations is not None:
        locations = [int(x) for x in args.locations.split(",") if x != ""]
    if locations:
        sweep = sweep_prefix_location(replace(cfg, loss="cgl", tsp=True), ds, knowledge,
                                      locations)
        write_ablation(rows, args.out, sweep=sweep)
    print((Path(args.out) / "ablation.tsv").read_text(encoding="utf-8"), end="")


def build_parser():
    p = argparse.ArgumentParser(prog="tripletlab", description=__doc__)
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic long-tailed dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("build-kb", help="parse knowledge and attach sentence embeddings")
    b.add_argument("--knowledge", help="knowledge JSON (default: bundled fixture)")
    b.add_argument("--embeddings", default="stub", help="embedding file or 'stub'")
    b.add_argument("--dim", type=int)
    b.add_argument("--stub-seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_kb)

    def toggles(sp):
        sp.add_argument("--no-gpi", action="store_true")
        sp.add_argument("--no-tsp", action="store_true")
        sp.add_argument("--loss", choices=("cgl", "bce", "focal", "eq"))
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--prefix-loc", type=int)
        sp.add_argument("--topk", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--kb")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    toggles(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("trace", help="export the head/tail gradient trace of a run")
    r.add_argument("--run", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_trace)

    a = sub.add_parser("ablate", help="run the module toggle grid")
    a.add_argument("--data", required=True)
    a.add_argument("--kb", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--locations", help="comma separated prefix locations to sweep")
    toggles(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"tripletlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
