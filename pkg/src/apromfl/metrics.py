"""Evaluation metrics: top-k classification accuracy and bidirectional
retrieval recall over cosine rankings. Ties break toward the lower class or
gallery index (stable sort), so results are fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import require_finite


@dataclass(frozen=True)
class EvalReport:
    """Per-client metric bundle.

    Classification clients fill ``acc_at``; retrieval clients fill the two
    recall maps. ``r1_sum``/``r5_sum`` are the summed bidirectional recalls.
    """

    acc_at: dict[int, float] = field(default_factory=dict)
    recall_i2t_at: dict[int, float] = field(default_factory=dict)
    recall_t2i_at: dict[int, float] = field(default_factory=dict)
    n_eval: int = 0

    @property
    def r1_sum(self) -> float:
        return self.recall_i2t_at.get(1, 0.0) + self.recall_t2i_at.get(1, 0.0)

    @property
    def r5_sum(self) -> float:
        return self.recall_i2t_at.get(5, 0.0) + self.recall_t2i_at.get(5, 0.0)

    def to_dict(self) -> dict:
        return {
            "acc_at": {str(k): v for k, v in self.acc_at.items()},
            "recall_i2t_at": {str(k): v for k, v in self.recall_i2t_at.items()},
            "recall_t2i_at": {str(k): v for k, v in self.recall_t2i_at.items()},
            "r1_sum": self.r1_sum,
            "r5_sum": self.r5_sum,
            "n_eval": self.n_eval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            acc_at={int(k): float(v) for k, v in d["acc_at"].items()},
            recall_i2t_at={int(k): float(v) for k, v in d["recall_i2t_at"].items()},
            recall_t2i_at={int(k): float(v) for k, v in d["recall_t2i_at"].items()},
            n_eval=int(d["n_eval"]),
        )


def acc_at_k(logits_list, labels, k: int) -> float:
    """Fraction of samples whose true label ranks among the k largest logits."""
    logits = require_finite(logits_list, "logits")
    labels = np.asarray(labels, dtype=int)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("need a non-empty (N, C) logits array")
    if len(labels) != len(logits):
        raise ValueError("logits and labels must align")
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    hits = (top == labels[:, None]).any(axis=1)
    return float(hits.mean())


def recall_at_k(query_embs, gallery_embs, ground_truth, k: int) -> float:
    """Fraction of queries whose true gallery item ranks in the cosine top-k."""
    queries = require_finite(query_embs, "query embeddings")
    gallery = require_finite(gallery_embs, "gallery embeddings")
    truth = np.asarray(ground_truth, dtype=int)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if gallery.ndim != 2 or len(gallery) == 0:
        raise ValueError("gallery must be non-empty")
    if queries.ndim != 2 or len(queries) == 0:
        raise ValueError("queries must be non-empty")
    if len(truth) != len(queries):
        raise ValueError("ground truth must align with queries")
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(gn == 0):
        raise ValueError("zero-norm embedding in retrieval evaluation")
    sims = (queries / qn) @ (gallery / gn).T
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    hits = (top == truth[:, None]).any(axis=1)
    return float(hits.mean())


def classification_report(logits, labels, ks=(1, 5)) -> EvalReport:
    return EvalReport(
        acc_at={int(k): acc_at_k(logits, labels, k) for k in ks},
        n_eval=len(labels),
    )


def retrieval_report(img_embs, txt_embs, ks=(1, 5)) -> EvalReport:
    """Bidirectional retrieval with identity ground truth (aligned pairs)."""
    n = len(img_embs)
    identity = np.arange(n)
    return EvalReport(
        recall_i2t_at={int(k): recall_at_k(img_embs, txt_embs, identity, k) for k in ks},
        recall_t2i_at={int(k): recall_at_k(txt_embs, img_embs, identity, k) for k in ks},
        n_eval=n,
    )
