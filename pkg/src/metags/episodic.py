"""Episodic meta-training and meta-testing, optimizers, checkpoints, variants."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .extract import EpisodeTask, ExtractConfig, NoPath, PairExtractor, pair_rng
from .hetgraph import HeterogeneousGraph
from .hyperproto import class_logits, logit_loss, pool_groups
from .metrics import RankedList, accuracy, candidate_pool, macro_f1, ranking_summary
from .params import ModelConfig, ModelParams
from .twoview import SubgraphCompiler, embed_batch, merge, pack

log = logging.getLogger(__name__)

VARIANTS = ("full", "2hop", "no-ov", "no-gv", "no-hyper")


class TrainingDiverged(FloatingPointError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass
class TrainConfig:
    episodes: int = 2000
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_rel: int = 3
    k_spt: int = 3
    k_qry: int = 10
    variant: str = "full"
    val_every: int = 100
    val_episodes: int = 200
    test_episodes: int = 500
    patience: int = 10  # validations without improvement before stopping

    def validate(self) -> None:
        if self.episodes < 0 or self.n_rel < 1 or self.k_spt < 1 or self.k_qry < 1:
            raise ValueError("episode counts must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.val_every < 1 or self.patience < 1:
            raise ValueError("val_every and patience must be >= 1")


def apply_variant(variant: str, model_cfg: ModelConfig, extract_cfg: ExtractConfig) -> tuple[ModelConfig, ExtractConfig]:
    """Configs wired for ``variant``; ``full`` returns equal copies."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    m = ModelConfig(**{**asdict(model_cfg), "variant": variant})
    e = ExtractConfig(**{**asdict(extract_cfg), "structure": "2hop" if variant == "2hop" else "paths"})
    return m, e


# -- optimizers ---------------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams) -> None:
        for n in params.names():
            t = params[n]
            t.value = t.value - self.lr * t.grad


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ModelParams) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for n in params.names():
            t = params[n]
            g = t.grad
            m = self.m.get(n, np.zeros_like(g))
            v = self.v.get(n, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[n], self.v[n] = m, v
            t.value = t.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


# -- forward over an episode ------------------------------------------------------------


def _signature(sub) -> tuple:
    return sub.signature()


@dataclass
class EpisodeOutput:
    logits: ad.Tensor
    loss: ad.Tensor
    prototypes: ad.Tensor
    queries: ad.Tensor
    labels: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.value - self.logits.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


class Model:
    """Parameters plus the subgraph compiler cache; runs episodes."""

    def __init__(self, cfg: ModelConfig, params: ModelParams | None = None):
        self.cfg = cfg
        self.params = params if params is not None else ModelParams(cfg)
        self.compiler = SubgraphCompiler(cfg)
        self._packed: dict[int, tuple] = {}

    def pair_batch(self, subs, g: HeterogeneousGraph):
        """Packed batch of one pair's subgraphs in canonical order (memoized)."""
        hit = self._packed.get(id(subs))
        if hit is not None and hit[0] is subs:
            return hit[1]
        b = pack([self.compiler(s, g) for s in sorted(subs, key=_signature)], self.cfg)
        self._packed[id(subs)] = (subs, b)
        return b

    def embed_groups(self, groups: Sequence[Sequence], g: HeterogeneousGraph) -> ad.Tensor:
        """One pooled vector per group; a group is a list of subgraph sets."""
        parts, gid = [], []
        for k, sets in enumerate(groups):
            for subs in sets:
                b = self.pair_batch(subs, g)
                parts.append(b)
                gid += [k] * b.n_sub
        Z = embed_batch(merge(parts, self.cfg), self.params)
        return pool_groups(Z, np.asarray(gid, dtype=np.int64), len(groups), self.params)

    def episode(self, task: EpisodeTask, g: HeterogeneousGraph) -> EpisodeOutput:
        n = task.n_rel
        groups = [[task.subgraphs[(u, v)] for u, v, r in task.support if r == y] for y in range(n)]
        groups += [[task.subgraphs[(u, v)]] for u, v, _ in task.query]
        pooled = self.embed_groups(groups, g)
        P = ad.gather(pooled, np.arange(n))
        Q = ad.gather(pooled, np.arange(n, len(groups)))
        labels = np.array([r for _, _, r in task.query], dtype=np.int64)
        logits = class_logits(Q, P)
        return EpisodeOutput(logits, logit_loss(logits, labels), P, Q, labels)


# -- checkpoints ------------------------------------------------------------------------------

MAGIC = b"MGSCKPT1\n"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    fingerprint: str
    episode: int = 0
    rng_state: dict = field(default_factory=dict)
    model_config: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        names = sorted(self.params)
        header = {
            "fingerprint": self.fingerprint,
            "episode": self.episode,
            "rng_state": self.rng_state,
            "model_config": self.model_config,
            "tensors": [[n, list(self.params[n].shape)] for n in names],
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        blob = b"".join(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in names)
        Path(path).write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + blob)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(MAGIC):
            raise ValueError(f"{path}: not a checkpoint file")
        pos = len(MAGIC)
        (hl,) = struct.unpack("<Q", raw[pos:pos + 8])
        pos += 8
        header = json.loads(raw[pos:pos + hl])
        pos += hl
        params = {}
        for name, shape in header["tensors"]:
            size = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(raw[pos:pos + 8 * size], dtype="<f8").reshape(shape).astype(np.float64)
            pos += 8 * size
        if pos != len(raw):
            raise ValueError(f"{path}: trailing bytes after tensor data")
        return cls(params, header["fingerprint"], header["episode"], header["rng_state"], header["model_config"])

    def restore(self, cfg: ModelConfig) -> ModelParams:
        if cfg.fingerprint() != self.fingerprint:
            raise ConfigMismatch(f"checkpoint fingerprint {self.fingerprint} does not match config {cfg.fingerprint()}")
        params = ModelParams(cfg)
        params.load_state(self.params)
        return params


def checkpoint_of(model: Model, episode: int, rng_state: dict | None = None) -> Checkpoint:
    return Checkpoint(model.params.state(), model.cfg.fingerprint(), episode, dict(rng_state or {}),
                      asdict(model.cfg))


# -- training --------------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    best_val: float
    stopped_early: bool


def evaluate_accuracy(model: Model, tasks: Sequence[EpisodeTask], graphs: dict[str, HeterogeneousGraph]) -> float:
    hits = total = 0
    for t in tasks:
        out = model.episode(t, graphs[t.graph_id])
        hits += int(np.sum(out.logits.value.argmax(1) == out.labels))
        total += len(out.labels)
    return hits / max(total, 1)


def meta_train(model: Model, train: Iterable[EpisodeTask], val: Sequence[EpisodeTask],
               graphs: dict[str, HeterogeneousGraph], cfg: TrainConfig, log_path: str | Path | None = None,
               dump_dir: str | Path | None = None) -> TrainResult:
    """Prototypical episodic training with periodic validation.

    Returns the checkpoint with the best validation accuracy (the final one
    when there is no validation data).  A non-finite loss stops training with
    :class:`TrainingDiverged`; the offending episode is written to ``dump_dir``.
    """
    cfg.validate()
    opt = make_optimizer(cfg)
    history: list[dict] = []
    best_val, best_ckpt, since_best = -1.0, None, 0
    stopped = False
    done = 0
    for task in train:
        if done >= cfg.episodes:
            break
        model.params.zero_grad()
        try:
            with ad.Tape() as tape:
                out = model.episode(task, graphs[task.graph_id])
            ad.backward(tape, out.loss)
        except ad.NonFiniteError as e:
            _dump(dump_dir, task, str(e))
            raise TrainingDiverged(f"non-finite value in episode {task.index}: {e}") from e
        opt.step(model.params)
        done += 1
        row = {"episode": done, "loss": float(out.loss.value), "val_accuracy": ""}
        if val and done % cfg.val_every == 0:
            acc = evaluate_accuracy(model, val, graphs)
            row["val_accuracy"] = acc
            log.info("episode %d loss %.4f val %.4f", done, row["loss"], acc)
            if acc > best_val:
                best_val, since_best = acc, 0
                best_ckpt = checkpoint_of(model, done, {"episode_seed": cfg.seed, "episodes_consumed": done})
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    history.append(row)
                    stopped = True
                    break
        history.append(row)
    if val and (not history or history[-1]["val_accuracy"] == ""):
        acc = evaluate_accuracy(model, val, graphs)
        history[-1:] = [{**history[-1], "val_accuracy": acc}] if history else []
        if acc > best_val:
            best_val = acc
            best_ckpt = checkpoint_of(model, done, {"episode_seed": cfg.seed, "episodes_consumed": done})
    if best_ckpt is None:
        best_ckpt = checkpoint_of(model, done, {"episode_seed": cfg.seed, "episodes_consumed": done})
    if log_path is not None:
        write_train_log(history, log_path)
    return TrainResult(best_ckpt, history, best_val, stopped)


def write_train_log(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["episode", "loss", "val_accuracy"])
        for r in history:
            va = r["val_accuracy"]
            w.writerow([r["episode"], repr(r["loss"]), "" if va == "" else repr(va)])


def _dump(dump_dir, task: EpisodeTask, msg: str) -> None:
    if dump_dir is None:
        return
    Path(dump_dir).mkdir(parents=True, exist_ok=True)
    doc = {"episode": task.index, "graph": task.graph_id, "relations": task.relation_names,
           "support": task.support, "query": task.query, "error": msg}
    Path(dump_dir, f"diverged-episode-{task.index}.json").write_text(json.dumps(doc, sort_keys=True) + "\n")


# -- testing ---------------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    index: int
    graph_id: str
    relation_names: list[str]
    prototypes: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    loss: float

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(1)


@dataclass
class PredictionReport:
    episodes: list[EpisodeResult]
    rankings: dict = field(default_factory=dict)  # (episode, query object) -> [RankedList]

    @property
    def predictions(self) -> np.ndarray:
        return np.concatenate([e.predictions for e in self.episodes])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([e.labels for e in self.episodes])

    def accuracy(self) -> float:
        return accuracy(self.predictions, self.labels)

    def macro_f1(self) -> float:
        # per-episode class indices are arbitrary, so F1 is averaged per episode
        return float(np.mean([macro_f1(e.predictions, e.labels, len(e.relation_names)) for e in self.episodes]))

    def summary(self, ks: Sequence[int] = (10, 20), distinct: bool = False) -> dict[str, float]:
        out = {"Acc": self.accuracy(), "F1": self.macro_f1(), "loss": float(np.mean([e.loss for e in self.episodes]))}
        if self.rankings:
            out.update(ranking_summary(self.rankings, ks, distinct))
        return out

    def to_dict(self) -> dict:
        return {
            "summary": self.summary(),
            "episodes": [
                {"index": e.index, "graph": e.graph_id, "relations": e.relation_names,
                 "probs": e.probs.tolist(), "labels": e.labels.tolist(), "loss": e.loss}
                for e in self.episodes
            ],
        }


@dataclass
class RankingConfig:
    queries_per_episode: int = 3
    max_candidates: int = 100
    seed: int = 0


def meta_test(model: Model, tasks: Iterable[EpisodeTask], graphs: dict[str, HeterogeneousGraph],
              extractor: PairExtractor | None = None, ranking: RankingConfig | None = None) -> PredictionReport:
    """Evaluate frozen parameters; optionally rank candidate objects per relation."""
    # projections for unseen (slot, width) pairs may still be created lazily
    known = model.params.names()
    before = model.params.digest(known)
    results, rankings = [], {}
    for t in tasks:
        g = graphs[t.graph_id]
        out = model.episode(t, g)
        probs = out.probs
        loss = float(-np.mean(np.log(np.maximum(probs[np.arange(len(out.labels)), out.labels], 1e-12))))
        results.append(EpisodeResult(t.index, t.graph_id, list(t.relation_names), out.prototypes.value.copy(),
                                     probs, out.labels, loss))
        if ranking is not None and extractor is not None:
            rankings.update(rank_candidates(model, t, g, extractor, out.prototypes.value, ranking))
    if model.params.digest(known) != before:
        raise RuntimeError("parameters changed during meta-testing")
    return PredictionReport(results, rankings)


def rank_candidates(model: Model, task: EpisodeTask, g: HeterogeneousGraph, extractor: PairExtractor,
                    prototypes: np.ndarray, cfg: RankingConfig) -> dict:
    rels = extractor.corpus.relation_labels.get(task.graph_id, {})
    holders = {}  # (a, b) sorted -> set of relation indices of this episode
    for r, name in enumerate(task.relation_names):
        for a, b in rels.get(name, []):
            holders.setdefault((min(a, b), max(a, b)), set()).add(r)
    queries = []
    for u, v, _ in task.query:
        if u not in queries:
            queries.append(u)
    out = {}
    P = ad.Tensor(prototypes)
    for u in queries[:cfg.queries_per_episode]:
        partner_type = next(int(g.object_type[v]) for uu, v, _ in task.query if uu == u)
        pool = [int(o) for o in np.nonzero(g.object_type == partner_type)[0] if o != u]
        pos = [c for c in pool if (min(u, c), max(u, c)) in holders]
        rng = pair_rng(cfg.seed + task.index, task.graph_id, u, u)  # (u, u) is never a real pair
        cands = candidate_pool(pool, pos, cfg.max_candidates, rng)
        sets, ok = [], []
        for c in cands:
            try:
                sets.append(extractor.subgraphs(task.graph_id, u, c))
                ok.append(c)
            except NoPath:
                pass
        scores = np.full((len(cands), task.n_rel), -np.inf)
        if ok:
            emb = model.embed_groups([[s] for s in sets], g)
            s_ok = class_logits(emb, P).value
            index = {c: k for k, c in enumerate(cands)}
            for k, c in enumerate(ok):
                scores[index[c]] = s_ok[k]
        lists = []
        for r in range(task.n_rel):
            order = sorted(range(len(cands)), key=lambda k: (-scores[k, r], cands[k]))
            ranked = [cands[k] for k in order]
            lists.append(RankedList(
                u, r, ranked,
                [r in holders.get((min(u, c), max(u, c)), ()) for c in ranked],
                [bool(holders.get((min(u, c), max(u, c)))) for c in ranked],
            ))
        out[(task.index, u)] = lists
    return out


def digest_report(report: PredictionReport) -> str:
    return hashlib.sha256(json.dumps(report.to_dict(), sort_keys=True).encode()).hexdigest()
