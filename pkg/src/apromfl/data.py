"""Synthetic multimodal data with a shared latent-class structure, plus
Dirichlet non-IID partitioning and role assignment.

Each sample owns a latent point near its class mean; both views are fixed
nonlinear projections of that same latent (tanh keeps them non-trivially
related), so paired views are alignable across modalities by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _serde
from .numerics import Rng, require_finite, seeded_rng

DATASET_FORMAT = "synthetic-dataset/v1"

ROLE_ORDER = ("multimodal", "image", "text")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    latent_dim: int = 16
    image_dim: int = 32
    text_dim: int = 24
    samples_per_class: int = 200
    view_noise_sigma: float = 0.25
    latent_noise_sigma: float = 1.0
    class_sep: float = 3.0
    seed: int | None = None  # None: harness derives it from the run seed

    def validate(self) -> None:
        for name in ("num_classes", "latent_dim", "image_dim", "text_dim", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"synthetic.{name}: must be >= 1")
        if self.view_noise_sigma < 0:
            raise ValueError("synthetic.view_noise_sigma: must be >= 0")
        if self.latent_noise_sigma < 0:
            raise ValueError("synthetic.latent_noise_sigma: must be >= 0")
        if self.class_sep <= 0:
            raise ValueError("synthetic.class_sep: must be > 0")


@dataclass(frozen=True)
class Sample:
    image_view: np.ndarray
    text_view: np.ndarray
    label: int


@dataclass(frozen=True)
class SyntheticDataset:
    """Array-backed sample collection; indexing yields :class:`Sample`."""

    spec: SyntheticSpec
    images: np.ndarray  # (N, image_dim)
    texts: np.ndarray  # (N, text_dim)
    labels: np.ndarray  # (N,) int

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], self.texts[i], int(self.labels[i]))

    def subset(self, indices) -> "SyntheticDataset":
        indices = np.asarray(indices, dtype=int)
        return SyntheticDataset(
            self.spec, self.images[indices], self.texts[indices], self.labels[indices]
        )


def generate(spec: SyntheticSpec) -> SyntheticDataset:
    """Draw the dataset. The spec seed fully determines every sample."""
    spec.validate()
    if spec.seed is None:
        raise ValueError("synthetic.seed must be resolved before generation")
    rng = seeded_rng(spec.seed, "synthetic-data")
    means = spec.class_sep * rng.standard_normal((spec.num_classes, spec.latent_dim))
    proj_img = rng.standard_normal((spec.latent_dim, spec.image_dim)) / np.sqrt(spec.latent_dim)
    proj_txt = rng.standard_normal((spec.latent_dim, spec.text_dim)) / np.sqrt(spec.latent_dim)
    images, texts, labels = [], [], []
    n = spec.samples_per_class
    for c in range(spec.num_classes):
        latent = means[c] + spec.latent_noise_sigma * rng.standard_normal((n, spec.latent_dim))
        images.append(
            np.tanh(latent @ proj_img)
            + spec.view_noise_sigma * rng.standard_normal((n, spec.image_dim))
        )
        texts.append(
            np.tanh(latent @ proj_txt)
            + spec.view_noise_sigma * rng.standard_normal((n, spec.text_dim))
        )
        labels.append(np.full(n, c, dtype=int))
    return SyntheticDataset(
        spec=spec,
        images=require_finite(np.concatenate(images), "image views"),
        texts=require_finite(np.concatenate(texts), "text views"),
        labels=np.concatenate(labels),
    )


def train_eval_split(dataset: SyntheticDataset, eval_fraction: float):
    """Per-class holdout taken before any partitioning, so eval membership
    never depends on the client split. Returns (train, eval)."""
    if not 0 <= eval_fraction < 1:
        raise ValueError(f"eval_fraction must be in [0, 1), got {eval_fraction}")
    eval_idx, train_idx = [], []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        cut = int(eval_fraction * len(idx))
        eval_idx.append(idx[:cut])
        train_idx.append(idx[cut:])
    return dataset.subset(np.concatenate(train_idx)), dataset.subset(np.concatenate(eval_idx))


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client, per-class sample index lists (a true partition)."""

    alpha: float
    client_shares: tuple[dict[int, np.ndarray], ...]

    @property
    def num_clients(self) -> int:
        return len(self.client_shares)

    def client_indices(self, client_id: int) -> np.ndarray:
        shares = self.client_shares[client_id]
        if not shares:
            return np.empty(0, dtype=int)
        return np.concatenate([shares[c] for c in sorted(shares)])


def dirichlet_partition(labels, num_clients: int, alpha: float, rng: Rng) -> PartitionPlan:
    """Split each class across clients by Dirichlet(alpha) proportions.

    Counts are rounded by largest remainder; if a client ends up empty it
    takes one sample from the currently largest client.
    """
    labels = np.asarray(labels, dtype=int)
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if num_clients < 1:
        raise ValueError(f"num_clients must be >= 1, got {num_clients}")
    if len(labels) < num_clients:
        raise ValueError(f"{len(labels)} samples cannot cover {num_clients} clients")

    shares: list[dict[int, list[np.ndarray]]] = [dict() for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        props = rng.dirichlet(np.full(num_clients, alpha))
        counts = _largest_remainder(props * len(idx))
        start = 0
        for client, count in enumerate(counts):
            if count:
                shares[client][int(c)] = idx[start : start + count]
            start += count

    plan = [dict((c, v.copy()) for c, v in s.items()) for s in shares]
    _repair_empty_clients(plan)
    return PartitionPlan(
        alpha=float(alpha),
        client_shares=tuple({c: np.asarray(v, dtype=int) for c, v in s.items()} for s in plan),
    )


def _largest_remainder(targets: np.ndarray) -> np.ndarray:
    floors = np.floor(targets).astype(int)
    remainder = int(round(targets.sum())) - int(floors.sum())
    if remainder > 0:
        fractional = targets - floors
        # ties fall to the lower client id via stable sort
        for slot in np.argsort(-fractional, kind="stable")[:remainder]:
            floors[slot] += 1
    return floors


def _repair_empty_clients(plan: list[dict[int, np.ndarray]]) -> None:
    sizes = [sum(len(v) for v in s.values()) for s in plan]
    for client, size in enumerate(sizes):
        if size:
            continue
        donor = int(np.argmax(sizes))
        donor_class = max(plan[donor], key=lambda c: (len(plan[donor][c]), -c))
        moved, rest = plan[donor][donor_class][-1], plan[donor][donor_class][:-1]
        if len(rest):
            plan[donor][donor_class] = rest
        else:
            del plan[donor][donor_class]
        plan[client][donor_class] = np.asarray([moved], dtype=int)
        sizes[donor] -= 1
        sizes[client] += 1


def role_partition(
    labels,
    counts: tuple[int, int, int],
    alpha: float,
    rng: Rng,
    disjoint_classes: bool = False,
) -> PartitionPlan:
    """Partition for (multimodal, image, text) client groups in that order.

    With ``disjoint_classes`` the classes are first split round-robin across
    the active roles, giving each role its own semantic pool; otherwise all
    clients draw from the shared pool.
    """
    labels = np.asarray(labels, dtype=int)
    num_clients = sum(counts)
    if num_clients < 1:
        raise ValueError("need at least one client")
    if not disjoint_classes:
        return dirichlet_partition(labels, num_clients, alpha, rng)

    active = [r for r, m in enumerate(counts) if m > 0]
    classes = np.unique(labels)
    role_classes = {r: set() for r in active}
    for j, c in enumerate(classes):
        role_classes[active[j % len(active)]].add(int(c))

    merged: list[dict[int, np.ndarray]] = [dict() for _ in range(num_clients)]
    offset = 0
    for role_id, role_count in enumerate(counts):
        if role_count == 0:
            continue
        pool = np.flatnonzero(np.isin(labels, sorted(role_classes[role_id])))
        sub = dirichlet_partition(labels[pool], role_count, alpha, rng)
        for local, share in enumerate(sub.client_shares):
            merged[offset + local] = {c: pool[v] for c, v in share.items()}
        offset += role_count
    return PartitionPlan(alpha=float(alpha), client_shares=tuple(merged))


@dataclass(frozen=True)
class ClientDataset:
    """One client's private view of the data.

    Multimodal clients hold paired views and no labels; unimodal clients
    hold a single view plus labels.
    """

    kind: str
    image_views: np.ndarray | None = None
    text_views: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ROLE_ORDER:
            raise ValueError(f"bad client kind {self.kind!r}")
        if self.kind == "multimodal":
            if self.image_views is None or self.text_views is None or self.labels is not None:
                raise ValueError("multimodal clients hold paired views and no labels")
        elif self.kind == "image":
            if self.image_views is None or self.text_views is not None or self.labels is None:
                raise ValueError("image clients hold image views and labels")
        else:
            if self.text_views is None or self.image_views is not None or self.labels is None:
                raise ValueError("text clients hold text views and labels")

    def __len__(self) -> int:
        views = self.image_views if self.image_views is not None else self.text_views
        return len(views)


def assign_roles(
    dataset: SyntheticDataset, plan: PartitionPlan, counts: tuple[int, int, int]
) -> list[ClientDataset]:
    """Materialise client datasets; ids run multimodal, then image, then text."""
    if sum(counts) != plan.num_clients:
        raise ValueError(f"counts {counts} do not sum to {plan.num_clients} clients")
    kinds = [kind for kind, m in zip(ROLE_ORDER, counts) for _ in range(m)]
    clients = []
    for client_id, kind in enumerate(kinds):
        idx = plan.client_indices(client_id)
        if kind == "multimodal":
            clients.append(
                ClientDataset(
                    kind=kind,
                    image_views=dataset.images[idx],
                    text_views=dataset.texts[idx],
                )
            )
        elif kind == "image":
            clients.append(
                ClientDataset(kind=kind, image_views=dataset.images[idx], labels=dataset.labels[idx])
            )
        else:
            clients.append(
                ClientDataset(kind=kind, text_views=dataset.texts[idx], labels=dataset.labels[idx])
            )
    return clients


# persistence ------------------------------------------------------------


def dump_dataset(dataset: SyntheticDataset, path) -> None:
    spec = dataset.spec
    payload = {
        "format": DATASET_FORMAT,
        "spec": {
            "num_classes": spec.num_classes,
            "latent_dim": spec.latent_dim,
            "image_dim": spec.image_dim,
            "text_dim": spec.text_dim,
            "samples_per_class": spec.samples_per_class,
            "view_noise_sigma": spec.view_noise_sigma,
            "latent_noise_sigma": spec.latent_noise_sigma,
            "class_sep": spec.class_sep,
            "seed": spec.seed,
        },
        "images": _serde.encode_array(dataset.images),
        "texts": _serde.encode_array(dataset.texts),
        "labels": _serde.encode_array(dataset.labels),
    }
    Path(path).write_text(json.dumps(payload))


def load_dataset(path) -> SyntheticDataset:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {payload.get('format')!r}")
    spec = SyntheticSpec(**payload["spec"])
    return SyntheticDataset(
        spec=spec,
        images=_serde.decode_array(payload["images"]),
        texts=_serde.decode_array(payload["texts"]),
        labels=_serde.decode_array(payload["labels"]).astype(int),
    )
