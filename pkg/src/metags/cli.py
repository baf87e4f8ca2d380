"""Command-line entry point: ``metags <command> [flags]``.

Logs go to stderr; data goes to files.  Failures print one line
``error: <Class>: <message>`` to stderr and exit with the class's code.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .episodic import ConfigMismatch, RankingConfig, TrainConfig, TrainingDiverged, VARIANTS, meta_test
from .extract import ExtractConfig, PairExtractor, _sg_from_dict, _sg_to_dict
from .hetgraph import CorpusFormatError, GraphCorpus, InvariantError, load_corpus, save_corpus
from .metrics import REPORT_COLUMNS, pretty_table, write_table_csv
from .params import ModelConfig
from .scenarios import (ABLATIONS, DESK_PRESET, SCENARIOS, ExtractorPool, RunSpec, ScenarioError,
                        build_scenario, episodes, load_checkpoint_model, run_or_load)
from .synthgen import GeneratorConfig, InfeasibleConfig, generate_corpus

log = logging.getLogger("metags")


class UsageError(Exception):
    pass


class SchemaError(Exception):
    pass


EXIT_CODES = [
    (UsageError, 2),
    (FileNotFoundError, 3),
    (SchemaError, 4),
    (CorpusFormatError, 4),
    (ConfigMismatch, 4),
    (InvariantError, 5),
    (InfeasibleConfig, 6),
    (ScenarioError, 6),
    (TrainingDiverged, 7),
    (ValueError, 8),
]


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


# -- configuration -------------------------------------------------------------------

SECTIONS = {"model": ModelConfig, "extract": ExtractConfig, "train": TrainConfig}
SKIP = {"model": {"seed", "variant"}, "extract": {"seed", "structure"}, "train": {"seed", "variant"}}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (scenario, variant, seed, model, extract, train)")
    p.add_argument("--preset", choices=["default", "desk"], default="default",
                   help="'desk' shrinks sizes for single-core runs")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--graph-id", help="graph for the single-hg scenario")
    p.add_argument("--extract-seed", type=int, help="seed of type sampling and embeddings (default 0)")
    seen = {"seed", "variant"}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            if f.name in SKIP[section] or f.name in seen:
                continue
            seen.add(f.name)
            p.add_argument(_flag(f.name), dest=f"opt_{f.name}", type=type(f.default), metavar=f.name.upper())


def _load_json(path: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc.msg} at line {exc.lineno}") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: expected a JSON object")
    return doc


def resolve_spec(args) -> RunSpec:
    d: dict = {"model": {}, "extract": {}, "train": {}}
    if args.preset == "desk":
        d = json.loads(json.dumps(DESK_PRESET))
    if args.config:
        doc = _load_json(args.config)
        doc.pop("corpus", None)
        known = {"scenario", "variant", "seed", "graph_id", "model", "extract", "train", "ranking"}
        extra = sorted(set(doc) - known)
        if extra:
            raise SchemaError(f"{args.config}: unknown keys {', '.join(extra)}")
        for part in ("model", "extract", "train"):
            d[part].update(doc.pop(part, None) or {})
        d.update(doc)
    for key in ("scenario", "variant", "seed", "graph_id"):
        if getattr(args, key, None) is not None:
            d[key] = getattr(args, key)
    if getattr(args, "extract_seed", None) is not None:
        d["extract"]["seed"] = args.extract_seed
    # a flag sets the field in every section that has it (l_max, n_type_max, hops: model and extract)
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            val = getattr(args, f"opt_{f.name}", None)
            if val is not None and f.name not in SKIP[section]:
                d[section][f.name] = val
    try:
        spec = RunSpec.from_dict(d)
    except TypeError as exc:
        raise SchemaError(f"config: {exc}") from None
    spec.model.l_max, spec.model.n_type_max = spec.extract.l_max, spec.extract.n_type_max
    return spec


def resolved_dict(spec: RunSpec) -> dict:
    m, e, t = spec.resolved()
    return {**spec.to_dict(), "resolved": {"model": asdict(m), "extract": asdict(e), "train": asdict(t)}}


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _corpus(args) -> GraphCorpus:
    path = args.corpus
    if path is None and getattr(args, "config", None):
        path = _load_json(args.config).get("corpus")
    if path is None:
        raise UsageError(f"{args.command} requires --corpus")
    corpus = load_corpus(path)
    corpus.validate()
    return corpus


def _run_dir(root: str, spec: RunSpec) -> Path:
    base = Path(root) if spec.train.k_spt == 3 else Path(root) / f"kspt{spec.train.k_spt}"
    return base / spec.scenario / spec.variant / str(spec.seed)


# -- commands ------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = GeneratorConfig.from_json(args.config) if args.config else GeneratorConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.shared_vocabulary:
        cfg.shared_vocabulary = True
    cfg.validate()
    if args.print_config:
        sys.stdout.write(_dump(cfg.to_dict()))
        return 0
    if not args.out:
        raise UsageError("gen requires --out")
    save_corpus(generate_corpus(cfg), args.out)
    log.info("wrote %s", args.out)
    return 0


def cmd_embed(args) -> int:
    spec = resolve_spec(args)
    if args.print_config:
        sys.stdout.write(_dump(asdict(spec.extract)))
        return 0
    corpus = _corpus(args)
    ex = PairExtractor(corpus, spec.extract, Path(args.cache_dir) / "embeddings")
    for gid in sorted(corpus.graphs):
        ex.embeddings(gid)
        log.info("embeddings ready for %s", gid)
    return 0


def _extract_graph(job):
    corpus, cfg, gid, emb_dir = job
    ex = PairExtractor(corpus, cfg, emb_dir)
    out = []
    for name, pairs in sorted(corpus.relation_labels.get(gid, {}).items()):
        for u, v in pairs:
            sets = [_sg_to_dict(s) for s in ex.subgraphs(gid, u, v)] if ex.usable(gid, u, v) else None
            out.append(((gid, int(u), int(v)), sets))
    return out


def cmd_extract(args) -> int:
    spec = resolve_spec(args)
    _, ecfg, _ = spec.resolved()
    if args.print_config:
        sys.stdout.write(_dump(asdict(ecfg)))
        return 0
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    corpus = _corpus(args)
    pool = ExtractorPool(corpus, args.cache_dir)
    ex = pool.get(ecfg)
    emb_dir = str(Path(args.cache_dir) / "embeddings")
    jobs = [(corpus, ecfg, gid, emb_dir) for gid in sorted(corpus.graphs)]
    if args.jobs == 1:
        results = [_extract_graph(j) for j in jobs]
    else:
        with ProcessPoolExecutor(args.jobs) as pp:
            results = list(pp.map(_extract_graph, jobs))
    done = [item for res in results for item in res]
    for key, sets in done:
        ex._sets[key] = None if sets is None else [_sg_from_dict(s) for s in sets]
    pool.flush()
    log.info("extracted %d pairs (%d without a path) into %s", len(done), sum(s is None for _, s in done),
             args.cache_dir)
    return 0


def cmd_train(args) -> int:
    spec = resolve_spec(args)
    if args.print_config:
        sys.stdout.write(_dump(resolved_dict(spec)))
        return 0
    corpus = _corpus(args)
    out = Path(args.out) if args.out else _run_dir(args.runs, spec)
    summary = run_or_load(corpus, spec, out, ExtractorPool(corpus, args.cache_dir))
    log.info("%s: %s", out, json.dumps(summary, sort_keys=True))
    return 0


def _eval_one(job):
    corpus_path, spec_dict, ckpt, cache_dir, ranking = job
    corpus = load_corpus(corpus_path)
    spec = RunSpec.from_dict(spec_dict)
    mcfg, ecfg, tcfg = spec.resolved()
    ex = ExtractorPool(corpus, cache_dir).get(ecfg)
    scn = build_scenario(corpus, spec.scenario, spec.seed, spec.graph_id)
    tasks = list(episodes(scn, ex, "test", tcfg.n_rel, tcfg.k_spt, tcfg.k_qry, spec.seed, tcfg.test_episodes))
    model = load_checkpoint_model(ckpt, mcfg)
    rep = meta_test(model, tasks, corpus.graphs, ex, RankingConfig(**ranking) if ranking else None)
    return rep.summary()


def cmd_eval(args) -> int:
    spec = resolve_spec(args)
    if args.print_config:
        sys.stdout.write(_dump(resolved_dict(spec)))
        return 0
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if not args.out:
        raise UsageError("eval requires --out")
    corpus_path = args.corpus or (args.config and _load_json(args.config).get("corpus"))
    if not corpus_path:
        raise UsageError("eval requires --corpus")
    _corpus(argparse.Namespace(corpus=corpus_path, command="eval"))
    seeds = args.seeds if args.seeds else [spec.seed]
    ranking = None if args.no_ranking else asdict(RankingConfig())
    jobs = []
    for s in seeds:
        sp = RunSpec.from_dict({**spec.to_dict(), "seed": s})
        ckpt = Path(args.checkpoint) if args.checkpoint and len(seeds) == 1 else _run_dir(args.runs, sp) / "checkpoint.bin"
        if not ckpt.exists():
            raise FileNotFoundError(f"no checkpoint at {ckpt}")
        jobs.append((corpus_path, sp.to_dict(), str(ckpt), args.cache_dir, ranking))
    if args.jobs == 1 or len(jobs) == 1:
        rows = [_eval_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(args.jobs) as pp:
            rows = list(pp.map(_eval_one, jobs))
    rows = [{"seed": s, **r} for s, r in zip(seeds, rows)]
    Path(args.out).write_text(write_table_csv(rows, ["seed"]))
    log.info("\n%s", pretty_table(rows, ["seed"]))
    return 0


def cmd_ablate(args) -> int:
    spec = resolve_spec(args)
    if args.print_config:
        sys.stdout.write(_dump(resolved_dict(spec)))
        return 0
    if not args.out:
        raise UsageError("ablate requires --out")
    corpus = _corpus(args)
    pool = ExtractorPool(corpus, args.cache_dir)
    seeds = args.seeds if args.seeds else [spec.seed]
    rows = []
    for variant in ("full",) + ABLATIONS:
        runs = []
        for s in seeds:
            sp = RunSpec.from_dict({**spec.to_dict(), "variant": variant, "seed": s})
            runs.append(run_or_load(corpus, sp, _run_dir(args.runs, sp), pool))
        pool.flush()
        rows.append(_mean_row(runs, {"variant": variant, "seeds": len(runs)}))
    _flag_inversions(rows)
    Path(args.out).write_text(write_table_csv(rows, ["variant", "seeds"]))
    log.info("\n%s", pretty_table(rows, ["variant", "seeds"]))
    return 0


def _mean_row(runs: list[dict], head: dict) -> dict:
    row = dict(head)
    for c in REPORT_COLUMNS:
        vals = [r[c] for r in runs if c in r]
        if vals:
            row[c] = float(np.mean(vals))
    return row


def _flag_inversions(rows: list[dict]) -> None:
    """Mark each ablation row whose mean accuracy beats the full model of the same group."""
    full = {tuple(v for k, v in r.items() if k in ("scenario", "K_spt")): r["Acc"] for r in rows if r["variant"] == "full"}
    for r in rows:
        ref = full.get(tuple(v for k, v in r.items() if k in ("scenario", "K_spt")))
        r["inversion"] = "" if r["variant"] == "full" or ref is None else ("yes" if r["Acc"] > ref else "no")
        if r["inversion"] == "yes":
            log.warning("inversion: %s beats full (%.4f > %.4f)", r["variant"], r["Acc"], ref)


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise FileNotFoundError(f"no runs directory at {root}")
    groups: dict[tuple, list[dict]] = {}
    for met in sorted(root.rglob("metrics.json")):
        cfg_path = met.parent / "config.json"
        if not cfg_path.exists():
            continue
        cfg = json.loads(cfg_path.read_text())
        try:
            key = (cfg["scenario"], int(cfg["train"]["k_spt"]), cfg["variant"])
        except (KeyError, TypeError):
            raise SchemaError(f"{cfg_path}: not a run config") from None
        groups.setdefault(key, []).append(json.loads(met.read_text()))
    if not groups:
        raise FileNotFoundError(f"no finished runs under {root}")
    order = {v: i for i, v in enumerate(("full",) + ABLATIONS)}
    rows = [_mean_row(runs, {"scenario": s, "K_spt": k, "variant": v, "seeds": len(runs)})
            for (s, k, v), runs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], order.get(kv[0][2], 99)))]
    _flag_inversions(rows)
    keys = ["scenario", "K_spt", "variant", "seeds"]
    text = write_table_csv(rows, keys)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    log.info("\n%s", pretty_table(rows, keys))
    return 0


# -- parser --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metags", description="Few-shot relation prediction between objects of heterogeneous graphs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config", help="generator config JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--shared-vocabulary", action="store_true", help="all graphs use one type vocabulary")
    g.add_argument("--out")
    g.add_argument("--print-config", action="store_true")
    g.set_defaults(func=cmd_gen)

    for name, func, hlp in [
        ("embed", cmd_embed, "pretrain object embeddings into the cache"),
        ("extract", cmd_extract, "extract subgraph sets for every labelled pair into the cache"),
        ("train", cmd_train, "meta-train one run and test the selected checkpoint"),
        ("eval", cmd_eval, "meta-test saved checkpoints of one or more seeds"),
        ("ablate", cmd_ablate, "train the full model and its four ablations"),
    ]:
        c = sub.add_parser(name, help=hlp)
        c.add_argument("--corpus")
        c.add_argument("--cache-dir", default="cache")
        c.add_argument("--runs", default="runs", help="results root: <runs>/<scenario>/<variant>/<seed>/")
        c.add_argument("--print-config", action="store_true")
        _add_run_flags(c)
        if name in ("extract", "eval"):
            c.add_argument("--jobs", type=int, default=1)
        if name in ("train", "eval", "ablate"):
            c.add_argument("--out")
        if name in ("eval", "ablate"):
            c.add_argument("--seeds", type=int, nargs="+")
        if name == "eval":
            c.add_argument("--checkpoint")
            c.add_argument("--no-ranking", action="store_true")
        c.set_defaults(func=func)

    r = sub.add_parser("report", help="aggregate finished runs into one table")
    r.add_argument("--runs", default="runs")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one error line
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
