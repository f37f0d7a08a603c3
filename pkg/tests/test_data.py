import numpy as np
import pytest

from cnds import data as dt


def test_idx_round_trip(tmp_path, rng):
    images = rng.uniform(0, 1, size=(20, 1, 6, 5))
    labels = rng.integers(0, 7, size=20)
    ds = dt.Dataset(images, labels, 7)
    dt.save_idx(ds, tmp_path / "x.idx", tmp_path / "y.idx")
    back = dt.load_idx(tmp_path / "x.idx", tmp_path / "y.idx", 7)
    assert back.images.shape == images.shape
    assert np.max(np.abs(back.images - images)) <= 1 / 255
    np.testing.assert_array_equal(back.labels, labels)


def test_idx_header_is_big_endian():
    raw = dt.encode_idx(np.zeros((2, 3, 258), np.uint8))
    assert raw[:4] == bytes([0, 0, 0x08, 3])
    assert raw[4:16] == b"\x00\x00\x00\x02\x00\x00\x00\x03\x00\x00\x01\x02"


@pytest.mark.parametrize("mutate,message", [
    (lambda raw: b"\x00\x00\x09\x03" + raw[4:], "bad magic"),
    (lambda raw: raw[:6], "truncated header"),
    (lambda raw: raw[:-1], "truncated payload"),
])
def test_idx_errors(tmp_path, mutate, message):
    good = dt.encode_idx(np.zeros((2, 3, 3), np.uint8))
    (tmp_path / "x").write_bytes(mutate(good))
    (tmp_path / "y").write_bytes(dt.encode_idx(np.zeros(2, np.uint8)))
    with pytest.raises(dt.IDXError, match=message):
        dt.load_idx(tmp_path / "x", tmp_path / "y")


def test_idx_count_mismatch(tmp_path):
    (tmp_path / "x").write_bytes(dt.encode_idx(np.zeros((2, 3, 3), np.uint8)))
    (tmp_path / "y").write_bytes(dt.encode_idx(np.zeros(3, np.uint8)))
    with pytest.raises(dt.IDXError, match="count mismatch"):
        dt.load_idx(tmp_path / "x", tmp_path / "y")


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        dt.Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        dt.Dataset(np.zeros((2, 1, 2, 2)), np.array([0]), 3)


def test_synthetic_is_balanced_and_deterministic():
    a = dt.synthetic_dataset(5, 100, (1, 8, 8), 10)
    assert np.bincount(a.labels).tolist() == [10] * 10
    b = dt.synthetic_dataset(5, 100, (1, 8, 8), 10)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_augment_identity_and_flip():
    img = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(dt.augment(img, 4, False), img)
    np.testing.assert_array_equal(dt.augment(img, 4, True), img[:, ::-1])
    np.testing.assert_array_equal(dt.augment(dt.augment(img, 4, True), 4, True), img)
    np.testing.assert_array_equal(dt.augment(img, 2, False), [[5, 6], [9, 10]])
    crop = dt.augment(img, 3, False, np.random.default_rng(0))
    assert crop.shape == (3, 3)
    with pytest.raises(ValueError):
        dt.augment(img, 5, False)


def test_batches_cover_dataset_once_and_repeat():
    ds = dt.synthetic_dataset(0, 50, (1, 4, 4), 5)
    run = lambda: [y.tolist() for _, y in dt.batches(ds, 8, seed=3, epoch=1)]
    first = run()
    assert first == run()
    assert [len(b) for b in first] == [8] * 6 + [2]
    assert sorted(sum(first, [])) == sorted(ds.labels.tolist())
    other = [y.tolist() for _, y in dt.batches(ds, 8, seed=3, epoch=2)]
    assert other != first
