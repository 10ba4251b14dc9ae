"""Prototype construction and server-side heterogeneous aggregation.

Unimodal clients summarise each class by the mean of its embeddings;
multimodal clients cluster fused image/text embeddings and emit one
(image mean, text mean) pair per cluster. The server completes the missing
modality of every unimodal prototype as a similarity-weighted sum over the
multimodal pairs, then clusters everything into K global pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _serde
from .numerics import ClusterAssignment, Rng, kmeans, require_finite

ORIGIN_MULTIMODAL = "multimodal-client"
ORIGIN_COMPLETED = "completed-from-unimodal"
ORIGIN_GLOBAL = "global"

EXCHANGE_FORMAT = "prototype-exchange/v1"

#: Below this total weight, completion falls back to uniform weights.
WEIGHT_EPS = 1e-12


def _checked_vector(vec, what: str) -> np.ndarray:
    vec = require_finite(vec, what)
    if vec.ndim != 1:
        raise ValueError(f"{what} must be a vector")
    if not np.any(vec):
        raise ValueError(f"{what} has zero norm")
    return vec


@dataclass(frozen=True)
class UnimodalPrototype:
    """Mean embedding of one class on one unimodal client."""

    modality: str  # "image" | "text"
    vector: np.ndarray
    class_id: int
    client_id: int

    def __post_init__(self):
        if self.modality not in ("image", "text"):
            raise ValueError(f"bad modality {self.modality!r}")
        _checked_vector(self.vector, "prototype vector")


@dataclass(frozen=True)
class PrototypePair:
    """Matched (image prototype, text prototype) couple."""

    image_vec: np.ndarray
    text_vec: np.ndarray
    origin: str

    def __post_init__(self):
        img = _checked_vector(self.image_vec, "image prototype")
        txt = _checked_vector(self.text_vec, "text prototype")
        if img.shape != txt.shape:
            raise ValueError("prototype pair vectors must share the embedding dim")
        if self.origin not in (ORIGIN_MULTIMODAL, ORIGIN_COMPLETED, ORIGIN_GLOBAL):
            raise ValueError(f"bad origin {self.origin!r}")


@dataclass(frozen=True)
class GlobalPrototypeSet:
    """The K server-side prototype pairs broadcast each round."""

    pairs: tuple[PrototypePair, ...]
    round_index: int

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("global prototype set cannot be empty")
        if any(p.origin != ORIGIN_GLOBAL for p in self.pairs):
            raise ValueError("global pairs must carry the global origin")

    def __len__(self) -> int:
        return len(self.pairs)

    def image_matrix(self) -> np.ndarray:
        return np.stack([p.image_vec for p in self.pairs])

    def text_matrix(self) -> np.ndarray:
        return np.stack([p.text_vec for p in self.pairs])


def label_guided_prototypes(
    embs, labels, modality: str = "image", client_id: int = -1
) -> list[UnimodalPrototype]:
    """One prototype per present class: the mean embedding of that class."""
    embs = require_finite(embs, "embeddings")
    labels = np.asarray(labels, dtype=int)
    if embs.ndim != 2 or len(embs) == 0:
        raise ValueError("need a non-empty (N, d) embedding array")
    if len(labels) != len(embs):
        raise ValueError("embeddings and labels must align")
    protos = []
    for class_id in np.unique(labels):
        mean = embs[labels == class_id].mean(axis=0)
        protos.append(
            UnimodalPrototype(
                modality=modality,
                vector=mean,
                class_id=int(class_id),
                client_id=client_id,
            )
        )
    return protos


def fuse(e_img, e_txt) -> np.ndarray:
    """Elementwise mean of the two modality embeddings."""
    e_img = np.asarray(e_img, dtype=float)
    e_txt = np.asarray(e_txt, dtype=float)
    if e_img.shape != e_txt.shape:
        raise ValueError(f"dimension mismatch: {e_img.shape} vs {e_txt.shape}")
    return (e_img + e_txt) / 2.0


def clustering_prototype_pairs(
    img_embs, txt_embs, k: int, rng: Rng
) -> tuple[list[PrototypePair], ClusterAssignment]:
    """Cluster fused embeddings into k pseudo-labels; per cluster, pair the
    mean image embedding with the mean text embedding."""
    img_embs = require_finite(img_embs, "image embeddings")
    txt_embs = require_finite(txt_embs, "text embeddings")
    if img_embs.shape != txt_embs.shape:
        raise ValueError("image/text embeddings must align pairwise")
    labels, _ = kmeans(fuse(img_embs, txt_embs), k, rng)
    assignment = ClusterAssignment.from_labels(labels)
    pairs = []
    for cluster in sorted(assignment.members):
        idx = assignment.members[cluster]
        pairs.append(
            PrototypePair(
                image_vec=img_embs[idx].mean(axis=0),
                text_vec=txt_embs[idx].mean(axis=0),
                origin=ORIGIN_MULTIMODAL,
            )
        )
    return pairs, assignment


def semantic_complete(
    uni: UnimodalPrototype, mm_pairs: list[PrototypePair], top_o: int
) -> PrototypePair:
    """Synthesise the missing modality of a unimodal prototype.

    Ranks the multimodal pairs by cosine similarity on the prototype's own
    modality, keeps the top_o most similar (ties broken by lower pair index),
    converts the kept similarities into weights by clamping negatives to zero
    and normalising, and returns the weighted sum of the opposite-modality
    prototypes paired with the original vector. If every kept similarity is
    non-positive the weights fall back to uniform.
    """
    if top_o < 1:
        raise ValueError(f"top_o must be >= 1, got {top_o}")
    if len(mm_pairs) < top_o:
        raise ValueError(f"need at least top_o={top_o} pairs, got {len(mm_pairs)}")
    own = np.stack(
        [p.image_vec if uni.modality == "image" else p.text_vec for p in mm_pairs]
    )
    other = np.stack(
        [p.text_vec if uni.modality == "image" else p.image_vec for p in mm_pairs]
    )
    unit = uni.vector / np.linalg.norm(uni.vector)
    sims = (own / np.linalg.norm(own, axis=1, keepdims=True)) @ unit
    keep = np.argsort(-sims, kind="stable")[:top_o]
    weights = np.maximum(sims[keep], 0.0)
    total = weights.sum()
    if total < WEIGHT_EPS:
        weights = np.full(top_o, 1.0 / top_o)
    else:
        weights = weights / total
    completed = weights @ other[keep]
    image_vec = uni.vector if uni.modality == "image" else completed
    text_vec = completed if uni.modality == "image" else uni.vector
    return PrototypePair(image_vec=image_vec, text_vec=text_vec, origin=ORIGIN_COMPLETED)


def build_global_prototypes(
    all_pairs: list[PrototypePair], k: int, rng: Rng, round_index: int = 0
) -> GlobalPrototypeSet:
    """Cluster fused pair representations into exactly k global pairs."""
    if len(all_pairs) < k:
        raise ValueError(f"need at least k={k} pairs, got {len(all_pairs)}")
    imgs = np.stack([p.image_vec for p in all_pairs])
    txts = np.stack([p.text_vec for p in all_pairs])
    labels, _ = kmeans(fuse(imgs, txts), k, rng)
    assignment = ClusterAssignment.from_labels(labels)
    pairs = []
    for cluster in sorted(assignment.members):
        idx = assignment.members[cluster]
        pairs.append(
            PrototypePair(
                image_vec=imgs[idx].mean(axis=0),
                text_vec=txts[idx].mean(axis=0),
                origin=ORIGIN_GLOBAL,
            )
        )
    return GlobalPrototypeSet(pairs=tuple(pairs), round_index=round_index)


# exchange records -----------------------------------------------------------


def _uni_to_dict(p: UnimodalPrototype) -> dict:
    return {
        "modality": p.modality,
        "vector": _serde.encode_array(p.vector),
        "class_id": p.class_id,
        "client_id": p.client_id,
    }


def _pair_to_dict(p: PrototypePair) -> dict:
    return {
        "image_vec": _serde.encode_array(p.image_vec),
        "text_vec": _serde.encode_array(p.text_vec),
        "origin": p.origin,
    }


def dump_prototype_exchange(
    path,
    *,
    unimodal: list[UnimodalPrototype] = (),
    pairs: list[PrototypePair] = (),
    global_set: GlobalPrototypeSet | None = None,
) -> None:
    """Write a versioned prototype exchange record (bit-exact round trip)."""
    payload = {
        "format": EXCHANGE_FORMAT,
        "unimodal": [_uni_to_dict(p) for p in unimodal],
        "pairs": [_pair_to_dict(p) for p in pairs],
        "global_set": None
        if global_set is None
        else {
            "round_index": global_set.round_index,
            "pairs": [_pair_to_dict(p) for p in global_set.pairs],
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_prototype_exchange(path):
    """Read a record written by :func:`dump_prototype_exchange`.

    Returns ``(unimodal, pairs, global_set)``.
    """
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != EXCHANGE_FORMAT:
        raise ValueError(f"unsupported exchange format {payload.get('format')!r}")
    unimodal = [
        UnimodalPrototype(
            modality=d["modality"],
            vector=_serde.decode_array(d["vector"]),
            class_id=int(d["class_id"]),
            client_id=int(d["client_id"]),
        )
        for d in payload["unimodal"]
    ]
    pairs = [
        PrototypePair(
            image_vec=_serde.decode_array(d["image_vec"]),
            text_vec=_serde.decode_array(d["text_vec"]),
            origin=d["origin"],
        )
        for d in payload["pairs"]
    ]
    global_set = None
    if payload["global_set"] is not None:
        blob = payload["global_set"]
        global_set = GlobalPrototypeSet(
            pairs=tuple(
                PrototypePair(
                    image_vec=_serde.decode_array(d["image_vec"]),
                    text_vec=_serde.decode_array(d["text_vec"]),
                    origin=d["origin"],
                )
                for d in blob["pairs"]
            ),
            round_index=int(blob["round_index"]),
        )
    return unimodal, pairs, global_set
