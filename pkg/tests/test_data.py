import gzip
import struct

import numpy as np
import pytest

from structsparse.data import (CIFAR10_MEAN, DATA_ENV, Dataset, batches, load_cifar10, load_cifar10_binary,
                               load_mnist, load_mnist_idx, load_named, normalize, prefetch, split,
                               synthetic_blobs, write_mnist_idx)
from structsparse.exceptions import ContractError, FormatError


@pytest.fixture
def idx_files(tmp_path, rng):
    images = rng.integers(0, 256, size=(7, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lbl"
    write_mnist_idx(images, labels, ip, lp)
    return images, labels, ip, lp


def test_idx_round_trip(idx_files):
    images, labels, ip, lp = idx_files
    ds = load_mnist_idx(ip, lp)
    assert ds.images.shape == (7, 1, 28, 28)
    np.testing.assert_allclose(ds.images[:, 0] * 255, images)
    np.testing.assert_array_equal(ds.labels, labels)
    raw = ip.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert struct.unpack(">III", raw[4:16]) == (7, 28, 28)


def test_idx_gzip_and_normalization(idx_files, tmp_path):
    images, labels, ip, lp = idx_files
    gi, gl = tmp_path / "img.gz", tmp_path / "lbl.gz"
    gi.write_bytes(gzip.compress(ip.read_bytes()))
    gl.write_bytes(gzip.compress(lp.read_bytes()))
    ds = load_mnist_idx(gi, gl, normalize_pixels=True)
    np.testing.assert_allclose(ds.images[:, 0], (images / 255.0 - 0.1307) / 0.3081)


def test_idx_bad_magic(idx_files, tmp_path):
    _, _, ip, lp = idx_files
    with pytest.raises(FormatError, match="expected 0x00000803, got 0x00000801"):
        load_mnist_idx(lp, lp)


def test_idx_truncation_reports_offset(idx_files, tmp_path):
    _, _, ip, lp = idx_files
    short = tmp_path / "short"
    short.write_bytes(ip.read_bytes()[:1000])
    with pytest.raises(FormatError, match="byte offset 1000"):
        load_mnist_idx(short, lp)
    tiny = tmp_path / "tiny"
    tiny.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError, match="byte offset 2"):
        load_mnist_idx(tiny, lp)


def _cifar_file(path, rng, n):
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    pixels = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
    path.write_bytes(np.concatenate([labels[:, None], pixels], axis=1).tobytes())
    return labels, pixels


def test_cifar_binary_layout(tmp_path, rng):
    labels, pixels = _cifar_file(tmp_path / "b.bin", rng, 4)
    ds = load_cifar10_binary(tmp_path / "b.bin", normalize_pixels=False)
    assert ds.images.shape == (4, 3, 32, 32)
    np.testing.assert_array_equal(ds.labels, labels)
    np.testing.assert_allclose(ds.images[2, 1, 0, 5] * 255, pixels[2, 1024 + 5])
    norm = load_cifar10_binary([tmp_path / "b.bin"])
    np.testing.assert_allclose(norm.images[0, 0].mean() * 0.2470 + CIFAR10_MEAN[0], ds.images[0, 0].mean())


def test_cifar_bad_length(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 3074)
    with pytest.raises(FormatError, match="3073"):
        load_cifar10_binary(tmp_path / "bad.bin")


def test_dataset_root_discovery(tmp_path, monkeypatch, rng):
    monkeypatch.delenv(DATA_ENV, raising=False)
    with pytest.raises(FileNotFoundError):
        load_mnist()
    for prefix, n in (("train", 5), ("t10k", 3)):
        write_mnist_idx(rng.integers(0, 256, size=(n, 28, 28)), rng.integers(0, 10, size=n),
                        tmp_path / f"{prefix}-images-idx3-ubyte", tmp_path / f"{prefix}-labels-idx1-ubyte")
    monkeypatch.setenv(DATA_ENV, str(tmp_path))
    train, test = load_mnist()
    assert (len(train), len(test)) == (5, 3)
    train, _ = load_named("mnist", n=2)
    assert len(train) == 2
    cdir = tmp_path / "cifar-10-batches-bin"
    cdir.mkdir()
    for i in range(1, 6):
        _cifar_file(cdir / f"data_batch_{i}.bin", rng, 2)
    _cifar_file(cdir / "test_batch.bin", rng, 3)
    train, test = load_cifar10()
    assert (len(train), len(test)) == (10, 3)
    with pytest.raises(ContractError):
        load_named("imagenet")


def test_split_and_batches():
    ds = synthetic_blobs(103, 4, 5, seed=1)
    a, b, c = split(ds, [0.5, 0.3, 0.2], seed=0)
    assert len(a) + len(b) + len(c) == 103
    together = np.concatenate([a.images, b.images, c.images])
    assert sorted(map(tuple, together.reshape(103, -1))) == sorted(map(tuple, ds.images.reshape(103, -1)))
    with pytest.raises(ContractError):
        split(ds, [0.5, 0.4])
    sizes = [len(y) for _, y in batches(ds, 25, seed=0)]
    assert sizes == [25, 25, 25, 25, 3]
    first = [y for _, y in batches(ds, 25, seed=3)]
    again = [y for _, y in batches(ds, 25, seed=3)]
    assert all((x == y).all() for x, y in zip(first, again))
    ordered = np.concatenate([y for _, y in batches(ds, 10, shuffle=False)])
    np.testing.assert_array_equal(ordered, ds.labels)
    with pytest.raises(ContractError):
        next(batches(ds, 0))


def test_prefetch_preserves_order():
    assert list(prefetch(iter(range(50)), depth=3)) == list(range(50))


def test_blobs_are_separable_and_balanced():
    ds = synthetic_blobs(1000, 10, 32, seed=0)
    assert ds.images.shape == (1000, 32, 1, 1)
    assert np.bincount(ds.labels).tolist() == [100] * 10
    x = ds.images[:, :, 0, 0]
    centres = np.stack([x[ds.labels == k].mean(0) for k in range(10)])
    nearest = np.argmin(((x[:, None] - centres[None]) ** 2).sum(-1), axis=1)
    assert (nearest == ds.labels).mean() > 0.99


def test_dataset_contracts():
    with pytest.raises(ContractError):
        Dataset(np.zeros((3, 1, 2, 2)), np.zeros(2, dtype=int))
    with pytest.raises(ContractError):
        Dataset(np.zeros((3, 4)), np.zeros(3, dtype=int))
    with pytest.raises(ContractError):
        Dataset(np.zeros((1, 1, 1, 1)), np.array([10]))
    ds = normalize(Dataset(np.ones((2, 1, 1, 1)), np.zeros(2, dtype=int)), (0.5,), (0.25,))
    np.testing.assert_allclose(ds.images, 2.0)
