import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dlcaps.data_io import (
    Dataset,
    batches,
    load_cifar_binary,
    load_dataset,
    load_idx,
    resize_bilinear_2x,
    write_cifar_binary,
    write_idx,
)
from dlcaps.errors import FormatError, UsageError


@pytest.fixture
def idx_pair(tmp_path, rng):
    x = rng.integers(0, 256, (5, 28, 28), dtype=np.uint8)
    y = rng.integers(0, 10, 5, dtype=np.uint8)
    xp, yp = tmp_path / "img", tmp_path / "lbl"
    write_idx(xp, yp, x, y)
    return xp, yp, x, y


def test_idx_magic_bytes_and_round_trip(idx_pair):
    xp, yp, x, y = idx_pair
    assert xp.read_bytes()[:4] == bytes([0, 0, 8, 3])
    assert yp.read_bytes()[:4] == bytes([0, 0, 8, 1])
    ds = load_idx(xp, yp)
    assert ds.images.shape == (5, 28, 28, 1)
    assert np.array_equal(ds.images[..., 0] * 255, x.astype(np.float32))
    assert np.array_equal(ds.labels, y)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_idx_header_is_big_endian(idx_pair):
    xp, *_ = idx_pair
    assert struct.unpack(">4I", xp.read_bytes()[:16]) == (0x803, 5, 28, 28)


def test_idx_wrong_magic_shows_bytes(idx_pair):
    xp, yp, *_ = idx_pair
    raw = bytearray(xp.read_bytes())
    raw[2] = 0x09
    xp.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="00 00 09 03"):
        load_idx(xp, yp)


def test_idx_swapped_files_rejected(idx_pair):
    xp, yp, *_ = idx_pair
    with pytest.raises(FormatError):
        load_idx(yp, xp)


@pytest.mark.parametrize("cut", [3, 10, 100])
def test_idx_truncated(idx_pair, cut):
    xp, yp, *_ = idx_pair
    xp.write_bytes(xp.read_bytes()[:-cut] if cut == 100 else xp.read_bytes()[:cut])
    with pytest.raises(FormatError):
        load_idx(xp, yp)


def test_idx_count_mismatch(tmp_path, idx_pair):
    xp, _, _, y = idx_pair
    other = tmp_path / "lbl2"
    write_idx(tmp_path / "unused", other, np.zeros((4, 2, 2)), y[:4])
    with pytest.raises(FormatError, match="5 images"):
        load_idx(xp, other)


def test_idx_label_out_of_range(tmp_path):
    write_idx(tmp_path / "x", tmp_path / "y", np.zeros((2, 3, 3)), [1, 12])
    with pytest.raises(FormatError, match="labels"):
        load_idx(tmp_path / "x", tmp_path / "y")


def test_idx_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_idx(tmp_path / "nope", tmp_path / "nope2")


def test_idx_loader_is_pure(idx_pair):
    xp, yp, *_ = idx_pair
    a, b = load_idx(xp, yp), load_idx(xp, yp)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_cifar_single_record(tmp_path):
    p = tmp_path / "one.bin"
    p.write_bytes(bytes([7]) + bytes([255]) * 3072)
    assert p.stat().st_size == 3073
    ds = load_cifar_binary([p])
    assert ds.images.shape == (1, 32, 32, 3) and np.all(ds.images == 1.0)
    assert ds.labels.tolist() == [7]


def test_cifar_channel_planar_order(tmp_path):
    p = tmp_path / "planar.bin"
    # red plane 10, green plane 20, blue plane 30
    p.write_bytes(bytes([1]) + bytes([10]) * 1024 + bytes([20]) * 1024 + bytes([30]) * 1024)
    img = load_cifar_binary(p).images[0] * 255
    assert np.allclose(img[0, 0], [10, 20, 30])
    # a single bright pixel at row 1, column 2 of the green plane
    raw = bytearray(3073)
    raw[1 + 1024 + 1 * 32 + 2] = 255
    p.write_bytes(bytes(raw))
    img = load_cifar_binary(p).images[0]
    assert img[1, 2, 1] == 1.0 and img.sum() == 1.0


def test_cifar_write_read_round_trip(tmp_path, rng):
    x = rng.integers(0, 256, (3, 32, 32, 3), dtype=np.uint8)
    write_cifar_binary(tmp_path / "b.bin", x, [1, 2, 3])
    ds = load_cifar_binary([tmp_path / "b.bin"])
    assert np.array_equal(np.rint(ds.images * 255).astype(np.uint8), x)


def test_cifar100_fine_and_coarse_labels(tmp_path, rng):
    x = rng.integers(0, 256, (4, 32, 32, 3), dtype=np.uint8)
    coarse, fine = [0, 5, 19, 3], [99, 0, 42, 7]
    write_cifar_binary(tmp_path / "c.bin", x, coarse, fine)
    assert (tmp_path / "c.bin").stat().st_size == 4 * 3074
    f = load_cifar_binary([tmp_path / "c.bin"], cifar100=True)
    c = load_cifar_binary([tmp_path / "c.bin"], cifar100=True, coarse=True)
    assert f.labels.tolist() == fine and f.num_classes == 100
    assert c.labels.tolist() == coarse and c.num_classes == 20
    assert f.labels.min() >= 0 and f.labels.max() < 100


def test_cifar_bad_size(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(bytes(3073 * 2 - 1))
    with pytest.raises(FormatError, match="3073"):
        load_cifar_binary([p])


def test_load_dataset_resizes_colour(tmp_path, rng):
    write_cifar_binary(tmp_path / "svhn_test.bin", rng.integers(0, 256, (2, 32, 32, 3)), [0, 9])
    ds = load_dataset("svhn", tmp_path, "test")
    assert ds.images.shape == (2, 64, 64, 3)
    assert load_dataset("svhn", tmp_path, "test", resize="none").images.shape == (2, 32, 32, 3)
    with pytest.raises(UsageError):
        load_dataset("svhn", tmp_path, "val")


# ---- resize ----------------------------------------------------------------------------


def test_resize_constant_image():
    x = np.full((1, 32, 32, 3), 0.37, np.float32)
    assert np.array_equal(resize_bilinear_2x(x), np.full((1, 64, 64, 3), 0.37, np.float32))


@given(arrays(np.float64, (1, 32, 32, 1), elements=st.floats(0, 1)))
def test_resize_stays_within_input_bounds(x):
    y = resize_bilinear_2x(x)
    assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12


def test_resize_horizontal_ramp_monotone():
    ramp = np.broadcast_to(np.linspace(0, 1, 32)[None, None, :, None], (1, 32, 32, 1))
    y = resize_bilinear_2x(ramp)[0, :, :, 0]
    assert np.all(np.diff(y, axis=1) >= 0)
    assert y[0, 0] == 0 and y[0, -1] == 1


def test_resize_direct_evaluation(rng):
    x = rng.uniform(0, 1, (1, 32, 32, 1))
    y = resize_bilinear_2x(x)
    # output 5 samples input 2.25 -> 0.75 * x[2] + 0.25 * x[3] per axis
    w = {2: 0.75, 3: 0.25}
    ref = sum(w[i] * w[j] * x[0, i, j, 0] for i in w for j in w)
    assert y[0, 5, 5, 0] == pytest.approx(ref, abs=1e-12)


def test_resize_nearest_and_errors():
    x = np.arange(32 * 32, dtype=float).reshape(1, 32, 32, 1)
    assert np.array_equal(resize_bilinear_2x(x, "nearest")[0, ::2, ::2], x[0])
    with pytest.raises(UsageError):
        resize_bilinear_2x(np.zeros((1, 28, 28, 1)))
    with pytest.raises(UsageError):
        resize_bilinear_2x(x, "cubic")


# ---- batches ---------------------------------------------------------------------------


def _ds(n=10, k=3):
    return Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n) % k, "train", k)


def test_batch_sizes_with_partial_tail():
    assert [len(x) for x, _ in batches(_ds(), 4)] == [4, 4, 2]


def test_batches_one_hot():
    for x, y in batches(_ds(), 4, shuffle=False):
        assert np.array_equal(y.argmax(1), x[:, 0, 0, 0].astype(int) % 3)
        assert np.all(y.sum(1) == 1)


def test_batch_order_deterministic_and_unshuffled():
    order = lambda **kw: np.concatenate([x.ravel() for x, _ in batches(_ds(), 3, **kw)])  # noqa: E731
    assert np.array_equal(order(seed=5), order(seed=5))
    assert not np.array_equal(order(seed=5), order(seed=6))
    assert np.array_equal(order(shuffle=False), np.arange(10))


@given(st.integers(1, 50), st.integers(1, 20), st.integers(0, 1000))
def test_every_index_visited_once(n, bs, seed):
    seen = np.concatenate([x.ravel() for x, _ in batches(_ds(n), bs, seed=seed)])
    assert sorted(seen.tolist()) == list(range(n))


def test_batch_size_zero():
    with pytest.raises(UsageError):
        list(batches(_ds(), 0))


def test_dataset_invariants():
    with pytest.raises(FormatError):
        Dataset(np.zeros((3, 1, 1, 1)), np.zeros(2, int))
    with pytest.raises(FormatError):
        Dataset(np.zeros((1, 1, 1, 1)), np.array([10]), num_classes=10)
