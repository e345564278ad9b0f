"""Train a prototypical embedding on episodic tasks and evaluate it.

Builds a small synthetic feature dataset (12 well-separated categories),
fits an affine embedding with 10-way 1-shot episodes, and reports the
training loss trajectory plus held-out nearest-prototype accuracy.

Run with:  python demos/few_shot_recognition.py
"""
import numpy as np

from trayintake.protonet import (
    AffineEmbeddingProvider,
    compute_prototypes,
    train,
)


def main():
    rng = np.random.default_rng(7)
    dim = 16
    centers = rng.normal(size=(12, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    train_set, heldout = {}, {}
    for i in range(12):
        pts = centers[i] + 0.08 * rng.normal(size=(40, dim))
        train_set[f"cat_{i:02d}"] = pts[:25]
        heldout[f"cat_{i:02d}"] = pts[25:]

    provider = AffineEmbeddingProvider.initialize(dim, dim, seed=0)
    result = train(train_set, provider, iterations=500, learning_rate=0.05,
                   seed=1, way=10, shot=1, n_query=1)

    trace = np.asarray(result.loss_trace)
    for k in (0, 99, 249, 499):
        print(f"iteration {k + 1:>3}: episode loss {trace[k]:.4f}")

    xs = np.concatenate(list(train_set.values()))
    ys = np.concatenate([[c] * len(v) for c, v in train_set.items()])
    protos = compute_prototypes((xs, ys), result.provider)
    cats, mat = protos.matrix()
    correct = total = 0
    for cat, vectors in heldout.items():
        emb = result.provider.embed(vectors)
        d = ((emb[:, None, :] - mat[None]) ** 2).sum(axis=2)
        correct += sum(cats[j] == cat for j in np.argmin(d, axis=1))
        total += len(vectors)
    print(f"held-out nearest-prototype accuracy: {correct / total:.1%}")


if __name__ == "__main__":
    main()
