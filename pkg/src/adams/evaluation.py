"""Pairwise average precision for word discrimination.

Pairs are ranked by cosine similarity (descending, ties broken by pair
index) and a pair is relevant when both members share a word class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .geometry import cosine_matrix


class NoRelevantPairsError(ValueError):
    pass


@dataclass
class APResult:
    ap: float
    num_pairs: int
    num_relevant: int


@dataclass
class EvalReport:
    acoustic: APResult
    crossview: APResult | None = None
    unseen: APResult | None = None

    def to_dict(self) -> dict:
        out = {}
        for name in ("acoustic", "crossview", "unseen"):
            res = getattr(self, name)
            if res is None:
                continue
            d = asdict(res)
            d["ap_percent"] = 100.0 * res.ap
            out[f"{name}_ap"] = d
        return out

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def average_precision(scores, relevant) -> APResult:
    """AP of a list of scored pairs, stable descending ranking."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    relevant = np.asarray(relevant, dtype=bool).ravel()
    if scores.shape != relevant.shape:
        raise ValueError("scores and relevance flags differ in length")
    num_rel = int(relevant.sum())
    if num_rel == 0:
        raise NoRelevantPairsError("no relevant pairs to rank")
    order = np.argsort(-scores, kind="stable")
    ranked = relevant[order]
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    precisions = hits[ranks - 1] / ranks
    return APResult(math.fsum(precisions.tolist()) / num_rel, scores.size, num_rel)


def _upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


def acoustic_ap_from_similarity(sim: np.ndarray, labels) -> APResult:
    """AP over all unordered pairs i < j of a symmetric similarity matrix."""
    labels = np.asarray(labels)
    n = labels.size
    if n < 2:
        raise ValueError("need at least two items")
    i, j = _upper_pairs(n)
    return average_precision(sim[i, j], labels[i] == labels[j])


def acoustic_ap(embeddings, labels) -> APResult:
    emb = np.asarray(embeddings, dtype=np.float64)
    return acoustic_ap_from_similarity(cosine_matrix(emb, emb), labels)


def crossview_ap(embeddings, labels, proxy_classes, proxies) -> APResult:
    """AP over every (acoustic item, proxy) pair; relevant when classes match."""
    labels = np.asarray(labels)
    proxy_classes = np.asarray(proxy_classes)
    missing = set(labels.tolist()) - set(proxy_classes.tolist())
    if missing:
        raise KeyError(f"no proxy for classes {sorted(missing)}")
    sim = cosine_matrix(np.asarray(embeddings, dtype=np.float64), np.asarray(proxies, dtype=np.float64))
    rel = labels[:, None] == proxy_classes[None, :]
    return average_precision(sim.ravel(), rel.ravel())


def unseen_query_ap_from_similarity(sim: np.ndarray, labels, unseen) -> APResult:
    """AP over unordered pairs having at least one unseen-class member."""
    labels = np.asarray(labels)
    unseen = np.asarray(unseen, dtype=bool)
    if not unseen.any():
        raise ValueError("no unseen-class samples to use as queries")
    i, j = _upper_pairs(labels.size)
    keep = unseen[i] | unseen[j]
    i, j = i[keep], j[keep]
    return average_precision(sim[i, j], labels[i] == labels[j])


def unseen_query_ap(embeddings, labels, unseen) -> APResult:
    emb = np.asarray(embeddings, dtype=np.float64)
    return unseen_query_ap_from_similarity(cosine_matrix(emb, emb), labels, unseen)


def evaluate(encoder, dataset, split: str = "test") -> EvalReport:
    """Acoustic, cross-view and (when present) unseen-query AP on one split."""
    samples = dataset.split(split)
    labels = np.array([s.class_id for s in samples])
    emb = encoder.encode_acoustic_batch([s.frames for s in samples])
    classes = np.unique(labels)
    proxies = encoder.encode_text_batch(dataset.text_matrix()[classes])
    report = EvalReport(acoustic_ap(emb, labels), crossview_ap(emb, labels, classes, proxies))
    unseen = np.array([dataset.classes[c].unseen for c in labels])
    if unseen.any():
        report.unseen = unseen_query_ap(emb, labels, unseen)
    return report
