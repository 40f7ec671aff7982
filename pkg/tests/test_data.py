import gzip
import struct

import numpy as np
import pytest

from linmove.data import (IMAGE_MAGIC, LABEL_MAGIC, BadMagic, CountMismatch, DatasetError,
                          Truncated, ingest_idx, load_mnist, pad_images, synthetic_dataset,
                          write_idx)


@pytest.fixture
def fixture_pair(tmp_path):
    """Two hand-built 2x2 images and their labels."""
    img = tmp_path / "img"
    lab = tmp_path / "lab"
    img.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 51, 102, 1, 2, 3, 4]))
    lab.write_bytes(struct.pack(">II", 0x801, 2) + bytes([7, 3]))
    return str(img), str(lab)


def test_parse_fixture(fixture_pair):
    ds = ingest_idx(*fixture_pair)
    assert ds.images.shape == (2, 1, 2, 2) and len(ds) == 2
    np.testing.assert_array_equal(ds.labels, [7, 3])
    np.testing.assert_allclose(ds.images[0, 0], [[0.0, 1.0], [0.2, 0.4]])
    assert ds.labels.dtype == np.int64


def test_truncated_payload(tmp_path, fixture_pair):
    bad = tmp_path / "short"
    bad.write_bytes(open(fixture_pair[0], "rb").read()[:-1])
    with pytest.raises(Truncated, match="truncated"):
        ingest_idx(str(bad), fixture_pair[1])


def test_truncated_header(tmp_path, fixture_pair):
    bad = tmp_path / "tiny"
    bad.write_bytes(b"\x00\x00")
    with pytest.raises(Truncated):
        ingest_idx(fixture_pair[0], str(bad))


def test_bad_magic(tmp_path, fixture_pair):
    with pytest.raises(BadMagic, match="magic"):
        ingest_idx(fixture_pair[1], fixture_pair[1])


def test_count_mismatch(tmp_path, fixture_pair):
    lab = tmp_path / "lab3"
    lab.write_bytes(struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(CountMismatch):
        ingest_idx(fixture_pair[0], str(lab))


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        ingest_idx(str(tmp_path / "a"), str(tmp_path / "b"))


def test_errors_are_distinct():
    assert len({BadMagic, Truncated, CountMismatch}) == 3
    assert all(issubclass(e, DatasetError) for e in (BadMagic, Truncated, CountMismatch))


def test_write_read_round_trip_and_gzip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    labs = rng.integers(0, 10, 5, dtype=np.uint8)
    names = {"train-images-idx3-ubyte": (imgs, IMAGE_MAGIC), "train-labels-idx1-ubyte": (labs, LABEL_MAGIC),
             "t10k-images-idx3-ubyte": (imgs[:2], IMAGE_MAGIC), "t10k-labels-idx1-ubyte": (labs[:2], LABEL_MAGIC)}
    for name, (arr, magic) in names.items():
        write_idx(str(tmp_path / name), arr, magic)
    # gzip one of them to check transparent decompression
    raw = (tmp_path / "t10k-labels-idx1-ubyte").read_bytes()
    (tmp_path / "t10k-labels-idx1-ubyte").unlink()
    with gzip.open(tmp_path / "t10k-labels-idx1-ubyte.gz", "wb") as fh:
        fh.write(raw)
    train, test = load_mnist(str(tmp_path))
    np.testing.assert_array_equal(train.images[:, 0] * 255, imgs)
    np.testing.assert_array_equal(test.labels, labs[:2])


def test_load_mnist_missing_dir(tmp_path):
    with pytest.raises(DatasetError):
        load_mnist(str(tmp_path))


def test_pad_images():
    x = np.ones((2, 1, 28, 28))
    y = pad_images(x, 32)
    assert y.shape == (2, 1, 32, 32) and y.sum() == x.sum() and y[0, 0, 1, 1] == 0
    with pytest.raises(DatasetError):
        pad_images(np.ones((1, 1, 33, 33)), 32)


def test_synthetic_dataset():
    a = synthetic_dataset(20, seed=3)
    b = synthetic_dataset(20, seed=3)
    assert a.images.shape == (20, 1, 28, 28)
    assert a.images.min() >= 0 and a.images.max() <= 1
    np.testing.assert_array_equal(a.images, b.images)
    assert set(a.labels.tolist()) <= set(range(10))
