import os
import tempfile

import numpy as np
import pytest

from structsparse import autodiff as ad
from structsparse.data import DATA_ENV, load_mnist, load_mnist_idx, normalize, split, write_mnist_idx, MNIST_MEAN, MNIST_STD


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (``x`` is perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(build, tensors, h: float = 1e-6) -> float:
    """Largest relative error between autodiff and finite differences over ``tensors``.

    ``build()`` must return a scalar Tensor computed from ``tensors``.
    """
    analytic = ad.grad(build(), tensors)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = numeric_grad(lambda: float(build().data), t.data, h)
        worst = max(worst, rel_err(a, n))
    return worst


def weighted_sum(y):
    """A scalar reduction with fixed random weights, so every output entry matters."""
    w = np.random.default_rng(1234).normal(size=y.shape)
    return ad.tensor_sum(ad.mul(y, ad.Tensor(w)))


def mnist_desk(n_train: int = 10_000):
    """Desk-scale MNIST: official files under $STRUCTSPARSE_DATA if present, else the 5k bundled sample.

    Returns (train, test, source). The bundled sample goes through the IDX
    writer and parser so the same loading path is exercised.
    """
    if os.environ.get(DATA_ENV):
        try:
            train, test = load_mnist()
            return train.subset(slice(0, n_train)), test, "official"
        except FileNotFoundError:
            pass
    mlx = pytest.importorskip("mlxtend.data")
    X, y = mlx.mnist_data()
    with tempfile.TemporaryDirectory() as d:
        ip, lp = os.path.join(d, "images"), os.path.join(d, "labels")
        write_mnist_idx(X.reshape(-1, 28, 28), y, ip, lp)
        ds = normalize(load_mnist_idx(ip, lp), MNIST_MEAN, MNIST_STD)
    train, test = split(ds, [0.8, 0.2], seed=0)
    return train, test, f"bundled-{len(ds)}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
