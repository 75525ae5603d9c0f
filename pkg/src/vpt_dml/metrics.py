"""
Retrieval metrics over L2-normalized embeddings.

Every item queries all other items (the query itself is excluded). Candidates
are ranked by cosine similarity, ties going to the lower index. Queries whose
class has no other member cannot be scored and are left out of the mean.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from rich.table import Table

from .utils import DMLError

logger = logging.getLogger(__name__)

RECALL_KS = (1, 2, 4, 8)
UNIT_NORM_TOLERANCE = 1e-4


class MetricError(DMLError):
    """Raised for invalid retrieval inputs."""


class RetrievalIndex:
    """
    Unit-norm embeddings with labels and their precomputed self-excluding ranking.

    Attributes:
        embeddings: M × E array, rows of norm 1
        labels: M class ids
        relevance: M × (M-1) booleans, candidate at rank i shares the query's class
    """

    def __init__(self, embeddings: np.ndarray, labels: Sequence[int] | np.ndarray) -> None:
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.labels):
            raise MetricError(
                f"Expected M × E embeddings with M labels, got {self.embeddings.shape} "
                f"and {self.labels.shape}"
            )
        if len(self.labels) < 2:
            raise MetricError("Retrieval needs at least two items")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE):
            raise MetricError("Embeddings must be L2-normalized")

        size = len(self.labels)
        similarity = self.embeddings @ self.embeddings.T
        ranked = np.empty((size, size - 1), dtype=np.int64)
        for query in range(size):
            candidates = np.delete(np.arange(size), query)
            order = np.argsort(-similarity[query, candidates], kind="stable")
            ranked[query] = candidates[order]
        self.ranked = ranked
        self.relevance = self.labels[ranked] == self.labels[:, None]
        self.relevant_counts = self.relevance.sum(axis=1)
        self.valid = self.relevant_counts > 0
        if not self.valid.all():
            logger.warning(
                "%d queries have no other member of their class and are not scored",
                int((~self.valid).sum()),
            )

    def __len__(self) -> int:
        return len(self.labels)


def recall_at_k(index: RetrievalIndex, k: int) -> float:
    """
    Fraction of scorable queries with a same-class item among the top k.

    Raises:
        MetricError: Unless 1 <= k < M
    """
    if not 1 <= k < len(index):
        raise MetricError(f"Recall@{k} needs 1 <= K < {len(index)}")
    if not index.valid.any():
        return 0.0
    hits = index.relevance[index.valid, :k].any(axis=1)
    return float(hits.mean())


def map_at_r(index: RetrievalIndex) -> float:
    """
    Mean over scorable queries of (1/R) Σ_{i ≤ R} P(i)·rel(i), where R is the
    number of other items in the query's class.
    """
    if not index.valid.any():
        return 0.0
    relevance = index.relevance[index.valid].astype(np.float64)
    counts = index.relevant_counts[index.valid]
    ranks = np.arange(1, relevance.shape[1] + 1)
    precision = np.cumsum(relevance, axis=1) / ranks
    within_r = ranks[None, :] <= counts[:, None]
    per_query = (precision * relevance * within_r).sum(axis=1) / counts
    return float(per_query.mean())


@dataclass
class RetrievalReport:
    recall: dict[int, float] = field(default_factory=dict)
    map_at_r: float = 0.0

    def as_row(self, ks: Sequence[int] = (1, 2, 4)) -> list[str]:
        return [f"{self.recall.get(k, float('nan')):.6f}" for k in ks] + [f"{self.map_at_r:.6f}"]


def evaluate(embeddings: np.ndarray, labels: Sequence[int] | np.ndarray,
             ks: Sequence[int] = RECALL_KS) -> RetrievalReport:
    """Recall@K for every K smaller than the index size, plus MAP@R."""
    index = RetrievalIndex(embeddings, labels)
    recall = {k: recall_at_k(index, k) for k in ks if k < len(index)}
    return RetrievalReport(recall=recall, map_at_r=map_at_r(index))


def report_table(report: RetrievalReport, title: str = "Retrieval") -> Table:
    table = Table(title=title)
    for k in report.recall:
        table.add_column(f"R@{k}", justify="right")
    table.add_column("MAP@R", justify="right")
    table.add_row(*[f"{100 * v:.2f}" for v in report.recall.values()],
                  f"{100 * report.map_at_r:.2f}")
    return table


def write_report_csv(path: str | Path, report: RetrievalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([f"R@{k}" for k in report.recall] + ["MAP@R"])
        writer.writerow([f"{v:.6f}" for v in report.recall.values()]
                        + [f"{report.map_at_r:.6f}"])
