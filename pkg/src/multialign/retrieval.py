"""Fused cross-media similarity, ranking and Recall@K evaluation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import MODE_CHANNELS, knn_select
from .encoders import EmbeddingBundle

DIRECTIONS = ("image_to_text", "text_to_image")
RECALL_KS = (1, 5, 10)


def _arr(t):
    return None if t is None else np.asarray(getattr(t, "data", t), dtype=np.float64)


def cross_media_similarity(img: EmbeddingBundle, txt: EmbeddingBundle, k: int = 3, mode: str = "full") -> float:
    """Global dot product plus top-K mean local and relation dot products.

    The relation term is dropped (not renormalised) when the image has no
    relation candidates. ``mode`` restricts which terms take part.
    """
    channels = MODE_CHANNELS[mode]
    score = 0.0
    if "global" in channels:
        gi, gt = _arr(img.global_vec), _arr(txt.global_vec)
        if gi.shape != gt.shape:
            raise ValueError(f"similarity: global dims differ, {gi.shape} vs {gt.shape}")
        score += float(gi @ gt)
    if "local" in channels:
        score += _knn_term(_arr(img.locals), _arr(txt.locals)[0], k)
    if "relation" in channels and img.relation_enabled:
        score += _knn_term(_arr(img.relations), _arr(txt.relations)[0], k)
    return score


def _knn_term(candidates: np.ndarray, query: np.ndarray, k: int) -> float:
    if candidates.shape[1] != query.shape[0]:
        raise ValueError(f"similarity: dims differ, {candidates.shape} vs {query.shape}")
    idx = knn_select(query, candidates, k)
    return float(np.mean(candidates[idx] @ query))


def rank_scores(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties go to the lower index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def rank(
    query: EmbeddingBundle,
    gallery: Sequence[EmbeddingBundle],
    direction: str = "image_to_text",
    k: int = 3,
    mode: str = "full",
) -> np.ndarray:
    """Order gallery indices by descending similarity to ``query``."""
    if not gallery:
        raise ValueError("rank: empty gallery")
    if direction == "image_to_text":
        scores = [cross_media_similarity(query, g, k, mode) for g in gallery]
    elif direction == "text_to_image":
        scores = [cross_media_similarity(g, query, k, mode) for g in gallery]
    else:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    return rank_scores(np.array(scores))


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    """Fraction of 1-based ground-truth ranks that are <= ``k``."""
    if k < 1:
        raise ValueError(f"recall_at_k: K must be >= 1, got {k}")
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("recall_at_k: no ranks")
    if np.any(ranks < 1):
        raise ValueError("recall_at_k: ranks are 1-based")
    return float(np.mean(ranks <= k))


def similarity_matrix(images: Sequence[EmbeddingBundle], texts: Sequence[EmbeddingBundle], k: int = 3, mode: str = "full") -> np.ndarray:
    """(num images, num texts) fused similarities, vectorised over the gallery."""
    channels = MODE_CHANNELS[mode]
    sim = np.zeros((len(images), len(texts)))
    if "global" in channels:
        # einsum (no BLAS) keeps each entry's summation order independent of how rows are chunked
        sim += np.einsum("id,jd->ij", np.stack([_arr(b.global_vec) for b in images]), np.stack([_arr(b.global_vec) for b in texts]))
    if "local" in channels:
        sim += _topk_mean_matrix([_arr(b.locals) for b in images], np.stack([_arr(b.locals)[0] for b in texts]), k)
    if "relation" in channels:
        rel = [_arr(b.relations) if b.relation_enabled else None for b in images]
        sim += _topk_mean_matrix(rel, np.stack([_arr(b.relations)[0] for b in texts]), k)
    return sim


def _topk_mean_matrix(cands: list[np.ndarray | None], queries: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(cands), queries.shape[0]))
    for i, c in enumerate(cands):
        if c is None or c.shape[0] == 0:
            continue
        dots = c @ queries.T  # (n_i, texts)
        kk = min(k, c.shape[0])
        top = -np.sort(-dots, axis=0)[:kk]
        out[i] = top.mean(axis=0)
    return out


@dataclass
class RetrievalReport:
    direction: str
    ranks: list[int]
    recall_at: dict[int, float]
    mode: str = "full"
    relation_disabled: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def num_queries(self) -> int:
        return len(self.ranks)

    def to_json(self) -> dict:
        doc = {
            "direction": self.direction,
            "mode": self.mode,
            "num_queries": self.num_queries,
            **{f"R@{k}": v for k, v in sorted(self.recall_at.items())},
        }
        if self.relation_disabled:
            doc["relation_disabled_images"] = self.relation_disabled
        doc.update(self.extra)
        return doc


def ground_truth_ranks(sim: np.ndarray, gt: Sequence[set[int]]) -> list[int]:
    """Best 1-based rank of any ground-truth column, per row of ``sim``."""
    out = []
    for row, targets in zip(sim, gt):
        order = rank_scores(row)
        positions = np.flatnonzero(np.isin(order, list(targets)))
        out.append(int(positions[0]) + 1)
    return out


def evaluate_embeddings(
    images: Sequence[EmbeddingBundle],
    texts: Sequence[EmbeddingBundle],
    image_gt: Sequence[set[int]],
    k: int = 3,
    mode: str = "full",
    ks: Sequence[int] = RECALL_KS,
) -> tuple[RetrievalReport, RetrievalReport]:
    """Score both retrieval directions.

    ``image_gt[i]`` holds the text indices matching image ``i``; the
    text-side ground truth is its inverse.
    """
    if not images or not texts:
        raise ValueError("evaluate: need at least one image and one text")
    sim = similarity_matrix(images, texts, k, mode)
    text_gt: list[set[int]] = [set() for _ in texts]
    for i, targets in enumerate(image_gt):
        for t in targets:
            text_gt[t].add(i)
    disabled = sum(1 for b in images if "relation" in MODE_CHANNELS[mode] and not b.relation_enabled)
    reports = []
    for direction, mat, gt in (("image_to_text", sim, image_gt), ("text_to_image", sim.T, text_gt)):
        ranks = ground_truth_ranks(mat, gt)
        reports.append(RetrievalReport(direction, ranks, {kk: recall_at_k(ranks, kk) for kk in ks}, mode, disabled))
    return reports[0], reports[1]


def write_report(path, reports: Sequence[RetrievalReport], config: dict | None = None) -> None:
    doc = {"reports": [r.to_json() for r in reports]}
    if config is not None:
        doc["config"] = config
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_similarity_csv(path, sim: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image"] + [f"text_{j}" for j in range(sim.shape[1])])
        for i, row in enumerate(sim):
            writer.writerow([i] + [repr(float(v)) for v in row])


def format_table(i2t: RetrievalReport, t2i: RetrievalReport, ks: Sequence[int] = RECALL_KS) -> str:
    head = f"{'':8}|{'Image annotation':^{8 * len(ks)}}|{'Image retrieval':^{8 * len(ks)}}"
    cols = "".join(f"{'R@' + str(k):>8}" for k in ks)
    vals = "".join(f"{i2t.recall_at[k]:>8.3f}" for k in ks) + "|" + "".join(f"{t2i.recall_at[k]:>8.3f}" for k in ks)
    return "\n".join([head, f"{'':8}|{cols}|{cols}", f"{i2t.mode:8}|{vals}"])
