"""Classification and ranking metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class RankedList:
    """Candidates for one ``(query object, relation)`` ordered by score, best first.

    ``relevant[i]``: candidate ``i`` holds this relation with the query object.
    ``close[i]``: it holds any of the evaluated (novel) relations with it.
    """

    query: int
    relation: int
    candidates: list[int]
    relevant: list[bool]
    close: list[bool]

    def __post_init__(self):
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("duplicate candidates in ranked list")
        if not len(self.relevant) == len(self.close) == len(self.candidates):
            raise ValueError("flag lists must match the candidate list length")


def _check_pair(pred: Sequence, labels: Sequence) -> None:
    if len(pred) != len(labels):
        raise ValueError(f"{len(pred)} predictions but {len(labels)} labels")
    if len(pred) == 0:
        raise ValueError("empty prediction set")


def accuracy(pred: Sequence[int], labels: Sequence[int]) -> float:
    _check_pair(pred, labels)
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def macro_f1(pred: Sequence[int], labels: Sequence[int], n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over ``range(n_classes)``.

    A class that appears in neither predictions nor labels scores 0.
    """
    _check_pair(pred, labels)
    p, y = np.asarray(pred), np.asarray(labels)
    if n_classes is None:
        n_classes = int(max(p.max(), y.max())) + 1
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((p == c) & (y == c)))
        fp = int(np.sum((p == c) & (y != c)))
        fn = int(np.sum((p != c) & (y == c)))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def ndcg_at_k(relevant: Sequence[bool], k: int, n_relevant: int | None = None) -> float:
    """Binary-relevance NDCG with ``log2(rank + 1)`` discount.

    The ideal ranking places ``min(k, n_relevant)`` relevant items first;
    ``n_relevant`` defaults to the relevant count of the whole list.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = [bool(r) for r in relevant]
    total = sum(rel) if n_relevant is None else n_relevant
    if total == 0:
        return 0.0
    dcg = sum(1.0 / math.log2(i + 2) for i, r in enumerate(rel[:k]) if r)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(k, total)))
    return dcg / idcg


def map_at_k(relevant: Sequence[bool], k: int, n_relevant: int | None = None) -> float:
    """Sum of precision@i over relevant positions ``i <= k``, divided by ``min(k, #relevant)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rel = [bool(r) for r in relevant]
    total = sum(rel) if n_relevant is None else n_relevant
    if total == 0:
        return 0.0
    hits, acc = 0, 0.0
    for i, r in enumerate(rel[:k]):
        if r:
            hits += 1
            acc += hits / (i + 1)
    return acc / min(k, total)


def prc_at_k(lists: Sequence[RankedList], k: int, distinct: bool = False) -> float:
    """Close objects among the top ``k`` of all lists of one query object,
    divided by ``k * len(lists)``.

    Occurrences are counted per list; ``distinct=True`` counts each close
    object once however many lists it appears in.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not lists:
        raise ValueError("no ranked lists")
    for rl in lists:
        if len(rl.candidates) < k:
            raise ValueError(f"ranked list of length {len(rl.candidates)} is shorter than k={k}")
    if distinct:
        hit = {c for rl in lists for c, f in zip(rl.candidates[:k], rl.close[:k]) if f}
        n = len(hit)
    else:
        n = sum(int(f) for rl in lists for f in rl.close[:k])
    return n / (k * len(lists))


def candidate_pool(pool: Sequence[int], positives: Sequence[int], cap: int, rng: np.random.Generator) -> list[int]:
    """At most ``cap`` candidates from ``pool``, always keeping ``positives``."""
    pos = sorted(set(int(p) for p in positives) & set(int(x) for x in pool))
    rest = sorted(set(int(x) for x in pool) - set(pos))
    room = max(0, cap - len(pos))
    if len(rest) > room:
        rest = sorted(int(x) for x in rng.choice(rest, size=room, replace=False))
    return sorted(pos + rest)


def ranking_summary(lists_by_query: dict, ks: Sequence[int] = (10, 20), distinct: bool = False) -> dict[str, float]:
    """Mean NDCG@K, MAP@K over all lists and PRC@K over query objects.

    Lists shorter than ``K`` do not contribute to the ``@K`` entries.
    """
    out = {}
    for k in ks:
        lists = [rl for group in lists_by_query.values() for rl in group if len(rl.candidates) >= k]
        groups = [g for g in lists_by_query.values() if g and all(len(rl.candidates) >= k for rl in g)]
        out[f"NDCG@{k}"] = float(np.mean([ndcg_at_k(rl.relevant, k) for rl in lists])) if lists else float("nan")
        out[f"MAP@{k}"] = float(np.mean([map_at_k(rl.relevant, k) for rl in lists])) if lists else float("nan")
        out[f"PRC@{k}"] = float(np.mean([prc_at_k(g, k, distinct) for g in groups])) if groups else float("nan")
    return out


REPORT_COLUMNS = ["Acc", "F1", "NDCG@10", "NDCG@20", "MAP@10", "MAP@20", "PRC@10", "PRC@20"]


def write_table_csv(rows: list[dict], key_columns: Sequence[str]) -> str:
    cols = list(key_columns) + [c for c in REPORT_COLUMNS if any(c in r for r in rows)]
    extra = sorted({k for r in rows for k in r} - set(cols))
    cols += extra
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c, "")) for c in cols})
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.4f}"
    return str(x)


def pretty_table(rows: list[dict], key_columns: Sequence[str]) -> str:
    cols = list(key_columns) + [c for c in REPORT_COLUMNS if any(c in r for r in rows)]
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    width = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(cols)]
    line = lambda vals: "  ".join(v.ljust(w) for v, w in zip(vals, width)).rstrip()
    return "\n".join([line(cols), line(["-" * w for w in width])] + [line(r) for r in cells]) + "\n"
