"""Episode sampling, prototype math, analytic gradients and prediction."""
import numpy as np
import pytest

from trayintake.core import DailyMenu, Taxonomy, ValidationError
from trayintake.protonet import (
    AffineEmbeddingProvider,
    Episode,
    EpisodeError,
    LookupEmbeddingProvider,
    PrototypeSet,
    candidate_categories,
    class_probabilities,
    compute_prototypes,
    episode_loss,
    loss_gradient,
    predict,
    sample_episode,
    squared_distance,
    train,
)


def make_dataset(rng, n_categories=15, per_cat=8, dim=5, spread=4.0):
    return {
        f"cat_{i:02d}": rng.normal(scale=0.3, size=(per_cat, dim))
        + rng.normal(scale=spread, size=dim)
        for i in range(n_categories)
    }


def random_episode(rng, way=4, shot=2, n_query=3, dim=5):
    dataset = make_dataset(rng, n_categories=way + 3, per_cat=shot + 4, dim=dim)
    return sample_episode(dataset, way, shot, n_query, rng)


# ---------------------------------------------------------------------------
# providers


def test_affine_provider_embed_and_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    provider = AffineEmbeddingProvider.initialize(4, 6, seed=7)
    x = rng.normal(size=(10, 6))
    np.testing.assert_allclose(provider.embed(x), x @ provider.weight.T + provider.bias)
    provider.save(tmp_path / "ckpt.csv", seed=7, iterations=42)
    loaded = AffineEmbeddingProvider.load(tmp_path / "ckpt.csv")
    np.testing.assert_array_equal(loaded.weight, provider.weight)
    np.testing.assert_array_equal(loaded.bias, provider.bias)


def test_identity_provider_is_identity():
    provider = AffineEmbeddingProvider.identity(3)
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(provider.embed(x), x)


def test_lookup_provider_round_trip(tmp_path):
    table = {"a/0": [1.0, 2.0], "b/1": [0.25, -3.5]}
    provider = LookupEmbeddingProvider(table)
    provider.save(tmp_path / "emb.csv")
    loaded = LookupEmbeddingProvider.load(tmp_path / "emb.csv")
    np.testing.assert_array_equal(loaded.embed("b/1"), [0.25, -3.5])


# ---------------------------------------------------------------------------
# episodes


def test_sample_episode_structure():
    rng = np.random.default_rng(1)
    dataset = make_dataset(rng, n_categories=12, per_cat=6)
    ep = sample_episode(dataset, way=5, shot=2, n_query=4, seed=3)
    assert ep.support_x.shape == (10, 5)
    cats, counts = np.unique(ep.support_y, return_counts=True)
    assert len(cats) == 5 and (counts == 2).all()
    assert set(ep.query_y).issubset(set(cats))
    # support and query sets are disjoint (all feature rows are distinct)
    support_rows = {tuple(row) for row in ep.support_x}
    assert all(tuple(row) not in support_rows for row in ep.query_x)


def test_sample_episode_skips_underfilled_categories():
    rng = np.random.default_rng(2)
    dataset = {"big_a": rng.normal(size=(5, 3)), "big_b": rng.normal(size=(6, 3)),
               "tiny": rng.normal(size=(1, 3))}
    ep = sample_episode(dataset, way=2, shot=1, n_query=2, seed=0)
    assert "tiny" not in set(ep.support_y)
    with pytest.raises(EpisodeError):
        sample_episode(dataset, way=3, shot=1, n_query=1, seed=0)
    with pytest.raises(EpisodeError):
        sample_episode(dataset, way=2, shot=1, n_query=100, seed=0)


def test_episode_validates_shape():
    x = np.zeros((4, 2))
    y = np.array(["a", "a", "b", "b"], dtype=object)
    Episode(x, y, x[:1], y[:1], way=2, shot=2)
    with pytest.raises(ValidationError):
        Episode(x, y, x[:1], y[:1], way=3, shot=2)
    with pytest.raises(ValidationError):
        Episode(x, y, x[:1], np.array(["c"], dtype=object), way=2, shot=2)


def test_sample_episode_deterministic():
    rng = np.random.default_rng(4)
    dataset = make_dataset(rng)
    a = sample_episode(dataset, 4, 2, 3, seed=99)
    b = sample_episode(dataset, 4, 2, 3, seed=99)
    np.testing.assert_array_equal(a.support_x, b.support_x)
    np.testing.assert_array_equal(a.query_y, b.query_y)


# ---------------------------------------------------------------------------
# prototypes + probabilities


def test_compute_prototypes_is_support_mean():
    rng = np.random.default_rng(5)
    ep = random_episode(rng)
    protos = compute_prototypes(ep, AffineEmbeddingProvider.identity(5))
    for cat in np.unique(ep.support_y):
        np.testing.assert_allclose(
            protos.prototypes[cat], ep.support_x[ep.support_y == cat].mean(axis=0)
        )


def test_probabilities_normalize_and_rank_by_distance():
    rng = np.random.default_rng(6)
    for _ in range(200):
        dim = int(rng.integers(2, 8))
        n = int(rng.integers(2, 9))
        protos = PrototypeSet({f"c{i}": rng.normal(scale=5.0, size=dim) for i in range(n)})
        q = rng.normal(scale=5.0, size=dim)
        p = class_probabilities(q, protos)
        assert abs(sum(p.values()) - 1.0) < 1e-12
        dists = {c: squared_distance(q, protos.prototypes[c]) for c in p}
        ranked_p = sorted(p, key=p.get, reverse=True)
        ranked_d = sorted(dists, key=dists.get)
        assert ranked_p == ranked_d


def test_equidistant_query_gives_uniform_probabilities():
    # orthonormal prototypes are equidistant from the origin
    for c in (2, 5, 10):
        protos = PrototypeSet({f"c{i}": np.eye(c)[i] for i in range(c)})
        p = class_probabilities(np.zeros(c), protos)
        for v in p.values():
            assert abs(v - 1.0 / c) < 1e-12


def test_probabilities_overflow_safe():
    protos = PrototypeSet({"a": np.array([0.0]), "b": np.array([1e4])})
    p = class_probabilities(np.array([0.0]), protos)
    assert abs(sum(p.values()) - 1.0) < 1e-12 and p["a"] > 0.999


# ---------------------------------------------------------------------------
# loss + gradients


def test_equidistant_episode_loss_is_log_c():
    for c in (2, 4, 8):
        support_x = np.eye(c)
        support_y = np.array([f"c{i}" for i in range(c)], dtype=object)
        ep = Episode(
            support_x,
            support_y,
            np.zeros((1, c)),
            np.array(["c0"], dtype=object),
            way=c,
            shot=1,
        )
        loss = episode_loss(ep, AffineEmbeddingProvider.identity(c))
        assert abs(loss - np.log(c)) < 1e-12


def test_loss_matches_probability_sum():
    rng = np.random.default_rng(7)
    ep = random_episode(rng)
    provider = AffineEmbeddingProvider.initialize(5, 5, seed=1)
    protos = compute_prototypes(ep, provider)
    expected = 0.0
    for x, y in zip(ep.query_x, ep.query_y):
        p = class_probabilities(provider.embed(x), protos)
        expected += -np.log(p[y])
    assert abs(episode_loss(ep, provider) - expected) < 1e-9


def central_difference_gradient(episode, provider, eps=1e-6):
    grad_w = np.zeros_like(provider.weight)
    grad_b = np.zeros_like(provider.bias)
    for idx in np.ndindex(provider.weight.shape):
        provider.weight[idx] += eps
        hi = episode_loss(episode, provider)
        provider.weight[idx] -= 2 * eps
        lo = episode_loss(episode, provider)
        provider.weight[idx] += eps
        grad_w[idx] = (hi - lo) / (2 * eps)
    for i in range(len(provider.bias)):
        provider.bias[i] += eps
        hi = episode_loss(episode, provider)
        provider.bias[i] -= 2 * eps
        lo = episode_loss(episode, provider)
        provider.bias[i] += eps
        grad_b[i] = (hi - lo) / (2 * eps)
    return grad_w, grad_b


@pytest.mark.parametrize("seed", range(25))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    way = int(rng.integers(2, 5))
    shot = int(rng.integers(1, 4))
    dim = int(rng.integers(2, 5))
    # overlapping clusters keep the softmax away from saturation so the
    # numerical gradient is well conditioned
    dataset = make_dataset(rng, n_categories=way + 3, per_cat=shot + 4, dim=dim,
                           spread=0.8)
    ep = sample_episode(dataset, way, shot, 3, rng)
    provider = AffineEmbeddingProvider.initialize(dim, dim, seed=seed + 100, scale=0.4)
    loss, grad_w, grad_b = loss_gradient(ep, provider)
    assert abs(loss - episode_loss(ep, provider)) < 1e-9
    num_w, num_b = central_difference_gradient(ep, provider)
    scale = max(np.abs(num_w).max(), np.abs(num_b).max(), 1e-3)
    assert np.abs(grad_w - num_w).max() / scale < 1e-4
    assert np.abs(grad_b - num_b).max() / scale < 1e-4


# ---------------------------------------------------------------------------
# training


def test_train_deterministic_and_reduces_loss():
    rng = np.random.default_rng(8)
    dataset = make_dataset(rng, n_categories=14, per_cat=10, dim=6, spread=1.0)
    a = train(dataset, AffineEmbeddingProvider.initialize(6, 6, seed=0),
              iterations=150, seed=5, way=5, shot=2, n_query=2)
    b = train(dataset, AffineEmbeddingProvider.initialize(6, 6, seed=0),
              iterations=150, seed=5, way=5, shot=2, n_query=2)
    np.testing.assert_array_equal(a.provider.weight, b.provider.weight)
    np.testing.assert_array_equal(a.loss_trace, b.loss_trace)
    assert a.loss_trace[-30:].mean() < a.loss_trace[:30].mean()


def test_train_zero_iterations_keeps_initialization():
    rng = np.random.default_rng(9)
    dataset = make_dataset(rng)
    init = AffineEmbeddingProvider.initialize(5, 5, seed=3)
    w0 = init.weight.copy()
    result = train(dataset, init, iterations=0, seed=0, way=4, shot=2, n_query=1)
    np.testing.assert_array_equal(result.provider.weight, w0)
    assert len(result.loss_trace) == 0


def test_train_divergence_aborts():
    rng = np.random.default_rng(10)
    dataset = make_dataset(rng, dim=3)
    provider = AffineEmbeddingProvider.identity(3)
    with pytest.raises(EpisodeError):
        train(dataset, provider, iterations=500, learning_rate=1e6,
              seed=0, way=4, shot=2, n_query=2)


# ---------------------------------------------------------------------------
# prediction


def taxonomy_and_protos():
    tax = Taxonomy({"soup_a": 5, "soup_b": 5, "soup_c": 5, "salad_a": 6})
    protos = PrototypeSet(
        {
            "soup_a": np.array([0.0, 0.0]),
            "soup_b": np.array([3.0, 0.0]),
            "soup_c": np.array([0.0, 3.0]),
            "salad_a": np.array([0.1, 0.1]),
        }
    )
    return tax, protos


def test_predict_restricts_to_hyper_and_menu():
    tax, protos = taxonomy_and_protos()
    # nearest overall is salad_a, but the item is a soup
    assert predict([0.2, 0.2], protos, hyper=5, taxonomy=tax) == "soup_a"
    menu = DailyMenu({5: ("soup_b", "soup_c")})
    assert predict([0.2, 0.2], protos, hyper=5, taxonomy=tax, menu=menu) == "soup_b"
    with pytest.raises(EpisodeError):
        predict([0.0, 0.0], protos, hyper=5, taxonomy=tax, menu=DailyMenu({5: ()}))


def test_predict_tie_breaks_to_smallest_id():
    tax = Taxonomy({"soup_a": 5, "soup_b": 5})
    protos = PrototypeSet({"soup_b": np.array([1.0]), "soup_a": np.array([-1.0])})
    assert predict([0.0], protos, hyper=5, taxonomy=tax) == "soup_a"


def test_predict_invariant_to_common_embedding_shift():
    tax, protos = taxonomy_and_protos()
    shift = np.array([17.0, -9.0])
    shifted = PrototypeSet({c: v + shift for c, v in protos.prototypes.items()})
    q = np.array([0.4, 1.1])
    assert predict(q, protos, 5, tax) == predict(q + shift, shifted, 5, tax)


def test_candidate_categories_intersection():
    tax, protos = taxonomy_and_protos()
    menu = DailyMenu({5: ("soup_a", "soup_x")})  # soup_x has no prototype
    cands = candidate_categories(tax, 5, menu, protos.prototypes)
    assert cands == ["soup_a"]
