"""Prototype-based few-shot recognition of fine-grained food categories.

Episodes are C-way K-shot tasks: a support set with K samples for each of C
categories and a small query set over the same categories.  Category
prototypes are the mean support embeddings, class probabilities come from a
softmax over negative squared Euclidean distances, and the episodic loss is
the summed negative log-probability of the true query categories.  Prediction
restricts candidates to the item's hyper category and, optionally, to the
daily menu.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DailyMenu, Taxonomy, ValidationError


class EpisodeError(ValueError):
    """Episode construction or prediction precondition failed."""


# ---------------------------------------------------------------------------
# embedding providers


class LookupEmbeddingProvider:
    """Precomputed embeddings keyed by sample id."""

    def __init__(self, table: dict):
        self.table = {k: np.asarray(v, float) for k, v in table.items()}

    def embed(self, sample_id) -> np.ndarray:
        return self.table[sample_id]

    @classmethod
    def load(cls, path) -> "LookupEmbeddingProvider":
        table = {}
        with Path(path).open(newline="") as fh:
            for row in csv.reader(fh):
                table[row[0]] = np.array([float(v) for v in row[1:]])
        return cls(table)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            for sample_id in sorted(self.table):
                writer.writerow([sample_id] + [repr(float(v)) for v in self.table[sample_id]])


class AffineEmbeddingProvider:
    """Trainable affine map from raw feature vectors to embeddings.

    embed(x) = W x + b with W of shape (D, F).  Deterministic for fixed
    parameters; the training loop below updates W and b in place.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, float)
        self.bias = np.asarray(bias, float)
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValidationError("weight/bias dimension mismatch")

    @classmethod
    def initialize(cls, dim_out: int, dim_in: int, seed: int, scale: float = 0.1):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, size=(dim_out, dim_in)), np.zeros(dim_out))

    @classmethod
    def identity(cls, dim: int):
        return cls(np.eye(dim), np.zeros(dim))

    @property
    def dim_out(self) -> int:
        return self.weight.shape[0]

    @property
    def dim_in(self) -> int:
        return self.weight.shape[1]

    def embed(self, features) -> np.ndarray:
        x = np.asarray(features, float)
        return x @ self.weight.T + self.bias

    def save(self, path, seed: int = 0, iterations: int = 0):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dim_out", self.dim_out, "dim_in", self.dim_in,
                             "seed", seed, "iterations", iterations])
            for row in self.weight:
                writer.writerow([repr(float(v)) for v in row])
            writer.writerow([repr(float(v)) for v in self.bias])

    @classmethod
    def load(cls, path) -> "AffineEmbeddingProvider":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        dim_out = int(header[1])
        weight = np.array([[float(v) for v in row] for row in rows[1 : 1 + dim_out]])
        bias = np.array([float(v) for v in rows[1 + dim_out]])
        return cls(weight, bias)


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    """C-way K-shot task: support features/labels plus query features/labels."""

    support_x: np.ndarray  # (C*K, F)
    support_y: np.ndarray  # (C*K,) category ids (any hashable, stored as object)
    query_x: np.ndarray  # (n, F)
    query_y: np.ndarray  # (n,)
    way: int
    shot: int

    def __post_init__(self):
        cats, counts = np.unique(self.support_y, return_counts=True)
        if len(cats) != self.way or not (counts == self.shot).all():
            raise ValidationError("support set is not exactly C categories x K shots")
        if not set(self.query_y).issubset(set(cats)):
            raise ValidationError("query labels outside the support category space")

    @property
    def categories(self) -> np.ndarray:
        return np.unique(self.support_y)


def sample_episode(dataset: dict, way: int, shot: int, n_query: int, seed) -> Episode:
    """Sample a C-way K-shot episode from ``dataset`` (category -> (N, F) array).

    Categories and samples are chosen uniformly without replacement; support
    and query sets are disjoint.  ``seed`` may be an int or a Generator so a
    training loop can draw a fresh episode per iteration.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eligible = sorted(c for c, x in dataset.items() if len(x) >= shot + 1)
    if len(eligible) < way:
        raise EpisodeError(
            f"need {way} categories with at least {shot + 1} samples, have {len(eligible)}"
        )
    chosen = rng.choice(len(eligible), size=way, replace=False)
    chosen_cats = [eligible[i] for i in chosen]

    support_x, support_y, pool_x, pool_y = [], [], [], []
    for cat in chosen_cats:
        samples = np.asarray(dataset[cat], float)
        idx = rng.permutation(len(samples))
        support_x.append(samples[idx[:shot]])
        support_y.extend([cat] * shot)
        pool_x.append(samples[idx[shot:]])
        pool_y.extend([cat] * (len(samples) - shot))
    pool_x = np.concatenate(pool_x)
    pool_y = np.array(pool_y, dtype=object)
    if n_query > len(pool_x):
        raise EpisodeError(f"cannot draw {n_query} queries from {len(pool_x)} leftovers")
    pick = rng.choice(len(pool_x), size=n_query, replace=False)
    return Episode(
        support_x=np.concatenate(support_x),
        support_y=np.array(support_y, dtype=object),
        query_x=pool_x[pick],
        query_y=pool_y[pick],
        way=way,
        shot=shot,
    )


# ---------------------------------------------------------------------------
# prototypes, probabilities, loss


def squared_distance(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValidationError(f"embedding length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)


@dataclass(frozen=True)
class PrototypeSet:
    """Per-category mean support embeddings."""

    prototypes: dict  # category -> (D,) vector

    @property
    def categories(self) -> list:
        return sorted(self.prototypes)

    def matrix(self, categories=None):
        cats = self.categories if categories is None else list(categories)
        return cats, np.stack([self.prototypes[c] for c in cats])


def compute_prototypes(episode_or_support, provider) -> PrototypeSet:
    """Mean embedding per support category (provider maps raw features)."""
    if isinstance(episode_or_support, Episode):
        xs, ys = episode_or_support.support_x, episode_or_support.support_y
    else:
        xs, ys = episode_or_support
    emb = provider.embed(xs)
    protos = {}
    for cat in np.unique(ys):
        protos[cat] = emb[ys == cat].mean(axis=0)
    return PrototypeSet(protos)


def class_probabilities(query_emb, protos: PrototypeSet) -> dict:
    """Softmax over negative squared distances to each prototype."""
    if not protos.prototypes:
        raise EpisodeError("empty prototype set")
    cats, mat = protos.matrix()
    diffs = mat - np.asarray(query_emb, float)
    d = np.einsum("ij,ij->i", diffs, diffs)
    logits = -d
    logits -= logits.max()  # overflow-safe softmax
    w = np.exp(logits)
    p = w / w.sum()
    return dict(zip(cats, p))


def episode_loss(episode: Episode, provider) -> float:
    """Summed negative log-probability of the true query categories."""
    protos = compute_prototypes(episode, provider)
    cats, mat = protos.matrix()
    cat_index = {c: i for i, c in enumerate(cats)}
    emb = provider.embed(episode.query_x)
    total = 0.0
    for e, y in zip(emb, episode.query_y):
        diffs = mat - e
        d = np.einsum("ij,ij->i", diffs, diffs)
        logits = -d
        m = logits.max()
        log_z = m + np.log(np.exp(logits - m).sum())
        total += -(logits[cat_index[y]] - log_z)
    return float(total)


def loss_gradient(episode: Episode, provider: AffineEmbeddingProvider):
    """Analytic gradient of the episodic loss with respect to (W, b).

    The gradient flows through both the query embeddings and the prototypes
    (which depend on the support embeddings).  Returns (loss, grad_W, grad_b).
    """
    support_emb = provider.embed(episode.support_x)
    query_emb = provider.embed(episode.query_x)
    cats = sorted(np.unique(episode.support_y))
    cat_index = {c: i for i, c in enumerate(cats)}
    masks = np.stack([episode.support_y == c for c in cats])  # (C, C*K)
    protos = masks @ support_emb / masks.sum(axis=1, keepdims=True)  # (C, D)
    support_means = masks @ episode.support_x / masks.sum(axis=1, keepdims=True)  # (C, F)

    loss = 0.0
    grad_q = np.zeros_like(query_emb)  # dJ/d(query embeddings)
    grad_c = np.zeros_like(protos)  # dJ/d(prototypes)
    for j, (e, y) in enumerate(zip(query_emb, episode.query_y)):
        diffs = e - protos  # (C, D)
        d = np.einsum("ij,ij->i", diffs, diffs)
        logits = -d
        m = logits.max()
        with np.errstate(invalid="ignore"):  # divergence is caught by the caller
            w = np.exp(logits - m)
        p = w / w.sum()
        yi = cat_index[y]
        loss += -(logits[yi] - (m + np.log(w.sum())))  # -log p_true
        # dJ/dd_k = one_hot(y)_k - p_k ; dd_k/de = 2(e - c_k); dd_k/dc_k = -2(e - c_k)
        coeff = -p
        coeff[yi] += 1.0
        grad_q[j] += 2.0 * coeff @ diffs
        grad_c += -2.0 * coeff[:, None] * diffs
    # chain rule into the affine parameters
    grad_w = grad_q.T @ episode.query_x + grad_c.T @ support_means
    grad_b = grad_q.sum(axis=0) + grad_c.sum(axis=0)
    return float(loss), grad_w, grad_b


@dataclass
class TrainResult:
    provider: AffineEmbeddingProvider
    loss_trace: np.ndarray
    iterations: int
    seed: int


def train(
    dataset: dict,
    provider: AffineEmbeddingProvider,
    iterations: int,
    learning_rate: float = 1e-2,
    seed: int = 0,
    way: int = 10,
    shot: int = 1,
    n_query: int = 1,
) -> TrainResult:
    """SGD over freshly sampled episodes; deterministic for a fixed seed.

    Aborts with EpisodeError if the loss becomes non-finite (divergence).
    """
    rng = np.random.default_rng(seed)
    trace = np.zeros(iterations)
    for it in range(iterations):
        episode = sample_episode(dataset, way, shot, n_query, rng)
        loss, grad_w, grad_b = loss_gradient(episode, provider)
        if not np.isfinite(loss):
            raise EpisodeError(f"training diverged at iteration {it}: loss={loss}")
        provider.weight -= learning_rate * grad_w
        provider.bias -= learning_rate * grad_b
        trace[it] = loss
    return TrainResult(provider=provider, loss_trace=trace, iterations=iterations, seed=seed)


# ---------------------------------------------------------------------------
# candidate-filtered prediction


def candidate_categories(
    taxonomy: Taxonomy, hyper: int, menu: DailyMenu | None, available
) -> list:
    """Candidate set for one hyper category, optionally slimmed by the menu."""
    cands = [c for c in taxonomy.categories_of(hyper) if c in available]
    if menu is not None:
        on_menu = set(menu.candidates_for(hyper))
        cands = [c for c in cands if c in on_menu]
    return cands


def predict(
    query_emb,
    protos: PrototypeSet,
    hyper: int,
    taxonomy: Taxonomy,
    menu: DailyMenu | None = None,
) -> str:
    """Nearest-prototype category within the hyper (and menu) candidate set.

    Ties break toward the smallest category id for determinism.
    """
    cands = candidate_categories(taxonomy, hyper, menu, protos.prototypes)
    if not cands:
        raise EpisodeError(
            f"no candidate categories for hyper {hyper} (menu too restrictive?)"
        )
    cands = sorted(cands)
    _, mat = protos.matrix(cands)
    diffs = mat - np.asarray(query_emb, float)
    d = np.einsum("ij,ij->i", diffs, diffs)
    return cands[int(d.argmin())]
