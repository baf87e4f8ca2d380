"""Few-shot scenarios over a corpus and single-run orchestration.

``single-hg``: one graph; its relations are split into train/val/test name
sets in the ratio 5:3:2.  ``multi-hg-single-het``: the corpus split, all graphs
sharing one type vocabulary.  ``multi-hg-multi-het``: the corpus split, with
train/val graphs sharing no type name with test graphs.
"""
from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .episodic import (Checkpoint, Model, RankingConfig, TrainConfig, apply_variant, meta_test, meta_train)
from .extract import EpisodeTask, ExtractConfig, PairExtractor, build_episodes, corpus_fingerprint
from .hetgraph import GraphCorpus
from .params import ModelConfig

log = logging.getLogger(__name__)

SCENARIOS = ("single-hg", "multi-hg-single-het", "multi-hg-multi-het")
SPLIT_RATIO = (5, 3, 2)


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    train_graphs: list[str]
    val_graphs: list[str]
    test_graphs: list[str]
    relations: dict[str, list[str] | None]  # part -> relation names (None: all of the graph)
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _vocab(corpus: GraphCorpus, gid: str) -> set[str]:
    return set(corpus.graphs[gid].object_types)


def relation_split(names: list[str], seed: int) -> tuple[list[str], list[str], list[str], dict]:
    """Shuffle ``names`` and cut them 5:3:2 (scaled to ``len(names)``)."""
    n = len(names)
    if n < 3:
        raise ScenarioError(f"need at least 3 relations to split, got {n}")
    total = sum(SPLIT_RATIO)
    n_tr = max(1, int(round(n * SPLIT_RATIO[0] / total)))
    n_va = max(1, int(round(n * SPLIT_RATIO[1] / total)))
    if n_tr + n_va >= n:
        n_va = max(1, n - n_tr - 1)
        n_tr = n - n_va - 1
    rng = np.random.default_rng([int(seed), 0x5C3])
    order = [names[i] for i in rng.permutation(n)]
    tr, va, te = order[:n_tr], order[n_tr:n_tr + n_va], order[n_tr + n_va:]
    note = {"relations": n, "scale": n / total, "counts": [len(tr), len(va), len(te)]}
    return sorted(tr), sorted(va), sorted(te), note


def build_scenario(corpus: GraphCorpus, which: str, seed: int = 0, graph_id: str | None = None) -> Scenario:
    if which not in SCENARIOS:
        raise ScenarioError(f"unknown scenario {which!r}; expected one of {', '.join(SCENARIOS)}")
    if which == "single-hg":
        gid = graph_id
        if gid is None:
            gid = max(sorted(corpus.graphs), key=lambda k: len(corpus.relation_labels.get(k, {})))
        if gid not in corpus.graphs:
            raise ScenarioError(f"unknown graph {gid!r}")
        tr, va, te, note = relation_split(sorted(corpus.relation_labels.get(gid, {})), seed)
        log.info("single-hg on %s: relation split %s (scale %.2f of 10)", gid, note["counts"], note["scale"])
        return Scenario(which, [gid], [gid], [gid], {"train": tr, "val": va, "test": te}, {"graph": gid, **note})
    tr, va, te = (list(corpus.split.get(k, [])) for k in ("train", "val", "test"))
    if not tr or not te:
        raise ScenarioError("corpus split needs train and test graphs")
    if which == "multi-hg-single-het":
        ref = _vocab(corpus, tr[0])
        bad = sorted(g for g in tr + va + te if _vocab(corpus, g) != ref)
        if bad:
            raise ScenarioError(f"graphs do not share one type vocabulary: {', '.join(bad)}")
    else:
        seen = set().union(*(_vocab(corpus, g) for g in tr + va))
        bad = sorted(g for g in te if _vocab(corpus, g) & seen)
        if bad:
            raise ScenarioError(f"test graphs share type names with training graphs: {', '.join(bad)}")
    return Scenario(which, tr, va, te, {"train": None, "val": None, "test": None})


def _derive(seed: int, part: str) -> int:
    return int(seed) * 1_000_003 + zlib.crc32(part.encode())


def episodes(scn: Scenario, extractor: PairExtractor, part: str, n_rel: int, k_spt: int, k_qry: int,
             seed: int, n: int) -> Iterator[EpisodeTask]:
    gids = {"train": scn.train_graphs, "val": scn.val_graphs, "test": scn.test_graphs}[part]
    names = scn.relations.get(part)
    return build_episodes(extractor, gids, n_rel, k_spt, k_qry, _derive(seed, part), n,
                          None if names is None else set(names))


# -- one run -------------------------------------------------------------------------


@dataclass
class RunSpec:
    scenario: str = "multi-hg-multi-het"
    variant: str = "full"
    seed: int = 0
    graph_id: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ranking: RankingConfig | None = None

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario, "variant": self.variant, "seed": self.seed, "graph_id": self.graph_id,
            "model": asdict(self.model), "extract": asdict(self.extract), "train": asdict(self.train),
            "ranking": None if self.ranking is None else asdict(self.ranking),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        return cls(
            d.get("scenario", "multi-hg-multi-het"), d.get("variant", "full"), int(d.get("seed", 0)),
            d.get("graph_id"), ModelConfig(**d.get("model", {})), ExtractConfig(**d.get("extract", {})),
            TrainConfig(**d.get("train", {})),
            None if d.get("ranking") is None else RankingConfig(**d["ranking"]),
        )

    def resolved(self) -> tuple[ModelConfig, ExtractConfig, TrainConfig]:
        m = ModelConfig(**{**asdict(self.model), "seed": self.seed})
        m, e = apply_variant(self.variant, m, self.extract)
        t = TrainConfig(**{**asdict(self.train), "seed": self.seed, "variant": self.variant})
        return m, e, t


class ExtractorPool:
    """One :class:`PairExtractor` per extraction config, optionally backed by cache files."""

    def __init__(self, corpus: GraphCorpus, cache_dir: str | Path | None = None):
        self.corpus = corpus
        self.cache_dir = None if cache_dir is None else Path(cache_dir)
        self._pool: dict[str, PairExtractor] = {}

    def get(self, cfg: ExtractConfig) -> PairExtractor:
        key = cfg.fingerprint()
        if key not in self._pool:
            emb_dir = None if self.cache_dir is None else self.cache_dir / "embeddings"
            ex = PairExtractor(self.corpus, cfg, emb_dir)
            path = self._path(cfg)
            if path is not None and path.exists():
                n = ex.load(path)
                log.info("loaded %d cached pairs from %s", n, path)
            self._pool[key] = ex
        return self._pool[key]

    def _path(self, cfg: ExtractConfig) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"pairs-{corpus_fingerprint(self.corpus)}-{cfg.fingerprint()}.json"

    def flush(self) -> None:
        for ex in self._pool.values():
            path = self._path(ex.cfg)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                ex.save(path)


def run_one(corpus: GraphCorpus, spec: RunSpec, out_dir: str | Path | None = None,
            pool: ExtractorPool | None = None) -> dict:
    """Train, select on validation, test; returns the metrics summary.

    With ``out_dir`` the run writes ``config.json``, ``train_log.csv``,
    ``checkpoint.bin``, ``report.json`` and ``metrics.json`` there.
    """
    t0 = time.time()
    mcfg, ecfg, tcfg = spec.resolved()
    tcfg.validate()
    pool = pool or ExtractorPool(corpus)
    ex = pool.get(ecfg)
    scn = build_scenario(corpus, spec.scenario, spec.seed, spec.graph_id)
    tr = episodes(scn, ex, "train", tcfg.n_rel, tcfg.k_spt, tcfg.k_qry, spec.seed, tcfg.episodes)
    va = list(episodes(scn, ex, "val", tcfg.n_rel, tcfg.k_spt, tcfg.k_qry, spec.seed, tcfg.val_episodes))
    te = list(episodes(scn, ex, "test", tcfg.n_rel, tcfg.k_spt, tcfg.k_qry, spec.seed, tcfg.test_episodes))
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({**spec.to_dict(), "scenario_info": scn.to_dict(),
                                                     "corpus": corpus_fingerprint(corpus)},
                                                    sort_keys=True, indent=1) + "\n")
    model = Model(mcfg)
    res = meta_train(model, tr, va, corpus.graphs, tcfg, None if out is None else out / "train_log.csv",
                     None if out is None else out)
    best = Model(mcfg, res.checkpoint.restore(mcfg))
    report = meta_test(best, te, corpus.graphs, ex, spec.ranking)
    summary = {**report.summary(), "best_val": res.best_val, "episodes_trained": res.history[-1]["episode"]
               if res.history else 0, "stopped_early": res.stopped_early}
    if out is not None:
        res.checkpoint.save(out / "checkpoint.bin")
        (out / "report.json").write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n")
        (out / "metrics.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    log.info("%s/%s/seed %d: acc %.4f (%.1fs)", spec.scenario, spec.variant, spec.seed, summary["Acc"],
             time.time() - t0)
    return summary


def run_or_load(corpus: GraphCorpus, spec: RunSpec, out_dir: str | Path, pool: ExtractorPool | None = None) -> dict:
    """Reuse ``out_dir/metrics.json`` when it was produced by the same spec on the same corpus."""
    out = Path(out_dir)
    cfg_path, met_path = out / "config.json", out / "metrics.json"
    if cfg_path.exists() and met_path.exists():
        saved = json.loads(cfg_path.read_text())
        if saved.get("corpus") == corpus_fingerprint(corpus) and \
                {k: saved.get(k) for k in spec.to_dict()} == json.loads(json.dumps(spec.to_dict())):
            return json.loads(met_path.read_text())
    return run_one(corpus, spec, out, pool)


def load_checkpoint_model(path: str | Path, cfg: ModelConfig) -> Model:
    ckpt = Checkpoint.load(path)
    return Model(cfg, ckpt.restore(cfg))


DESK_PRESET = {
    "model": {"d_h": 16, "d_gv": 16, "d_att": 16, "n_type_max": 4, "l_max": 4},
    "extract": {"l_max": 4, "n_type_min": 2, "n_type_max": 4, "m": 2},
    "train": {"learning_rate": 5e-3, "val_every": 100, "val_episodes": 30, "test_episodes": 100, "patience": 5},
}
"""Reduced sizes that keep a 2,000-episode run under a minute on one core."""


def desk_spec(**overrides) -> RunSpec:
    d = json.loads(json.dumps(DESK_PRESET))
    for part in ("model", "extract", "train"):
        d[part].update(overrides.pop(part, {}))
    d.update(overrides)
    return RunSpec.from_dict(d)


ABLATIONS = ("2hop", "no-ov", "no-gv", "no-hyper")


def sweep(corpus: GraphCorpus, root: str | Path, variants=("full",) + ABLATIONS, seeds=range(10),
          k_spt: int = 3, scenario: str = "multi-hg-multi-het", pool: ExtractorPool | None = None,
          train: dict | None = None) -> dict[str, list[dict]]:
    """Desk-preset runs for every (variant, seed); finished runs are reused from ``root``."""
    root = Path(root)
    pool = pool or ExtractorPool(corpus, root / "cache")
    out: dict[str, list[dict]] = {}
    for variant in variants:
        for seed in seeds:
            spec = desk_spec(scenario=scenario, variant=variant, seed=int(seed),
                             train={**(train or {}), "k_spt": k_spt})
            base = root if k_spt == 3 else root / f"kspt{k_spt}"
            d = base / scenario / variant / str(seed)
            out.setdefault(variant, []).append(run_or_load(corpus, spec, d, pool))
        pool.flush()
    return out


def mean_metric(runs: list[dict], key: str = "Acc") -> float:
    return float(np.mean([r[key] for r in runs]))
