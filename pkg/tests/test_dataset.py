import gzip
import math
import struct

import numpy as np
import pytest

from trunlearn.dataset import (
    BiasSpec,
    Dataset,
    FormatError,
    InfeasibleSpecError,
    class_marginal_kl,
    deletion_count_for_kl,
    gen_synthetic,
    load_csv,
    load_idx,
    sample_biased_deletion,
    save_csv,
    split_from_forget,
    verify_shift,
    write_idx,
)
from trunlearn.model import LossConfig, ModelSpec, TrainConfig, micro_f1, train


def _fixture_bytes():
    """Ten 2x3 images; image i holds pixel value 25*i at flat position i % 6."""
    images = bytearray(struct.pack(">IIII", 0x803, 10, 2, 3))
    for i in range(10):
        px = [0] * 6
        px[i % 6] = 25 * i
        images += bytes(px)
    labels = struct.pack(">II", 0x801, 10) + bytes([9, 8, 7, 6, 5, 4, 3, 2, 1, 0])
    return bytes(images), labels


@pytest.fixture
def idx_fixture(tmp_path):
    images, labels = _fixture_bytes()
    (tmp_path / "img").write_bytes(images)
    (tmp_path / "lab").write_bytes(labels)
    return tmp_path / "img", tmp_path / "lab"


class TestLoadIdx:
    def test_crafted_fixture_decodes(self, idx_fixture):
        data = load_idx(*idx_fixture)
        assert (data.n, data.dim, data.num_classes) == (10, 6, 10)
        np.testing.assert_array_equal(data.y, [9, 8, 7, 6, 5, 4, 3, 2, 1, 0])
        for i in range(10):
            expect = np.zeros(6)
            expect[i % 6] = 25 * i / 255
            np.testing.assert_array_equal(data.X[i], expect)

    def test_gzip_round_trip(self, tmp_path, idx_fixture):
        for src in idx_fixture:
            (tmp_path / (src.name + ".gz")).write_bytes(gzip.compress(src.read_bytes()))
        plain = load_idx(*idx_fixture)
        zipped = load_idx(tmp_path / "img.gz", tmp_path / "lab.gz")
        np.testing.assert_array_equal(plain.X, zipped.X)

    def test_truncated_labels_names_file(self, tmp_path, idx_fixture):
        img, lab = idx_fixture
        bad = tmp_path / "short-labels"
        bad.write_bytes(lab.read_bytes()[:-3])
        with pytest.raises(FormatError, match="short-labels"):
            load_idx(img, bad)

    def test_bad_magic(self, tmp_path, idx_fixture):
        img, lab = idx_fixture
        bad = tmp_path / "swapped"
        bad.write_bytes(lab.read_bytes())
        with pytest.raises(FormatError, match="swapped"):
            load_idx(bad, lab)

    def test_count_mismatch(self, tmp_path, idx_fixture):
        img, _ = idx_fixture
        lab = tmp_path / "nine"
        lab.write_bytes(struct.pack(">II", 0x801, 9) + bytes(9))
        with pytest.raises(FormatError):
            load_idx(img, lab)

    def test_write_then_load(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
        labels = np.array([0, 1, 2, 3], dtype=np.uint8)
        write_idx(tmp_path / "a.gz", tmp_path / "b.gz", imgs, labels)
        data = load_idx(tmp_path / "a.gz", tmp_path / "b.gz", num_classes=4)
        np.testing.assert_array_equal(np.rint(data.X * 255).astype(np.uint8), imgs.reshape(4, -1))

    def test_shipped_mnist_subset(self):
        root = "data/mnist"
        train = load_idx(f"{root}/train-images-idx3-ubyte.gz", f"{root}/train-labels-idx1-ubyte.gz")
        test = load_idx(f"{root}/test-images-idx3-ubyte.gz", f"{root}/test-labels-idx1-ubyte.gz")
        assert (train.n, train.dim, test.n) == (10000, 784, 10000)
        assert train.X.min() >= 0 and train.X.max() <= 1
        # every digit present in both splits
        assert np.all(train.class_counts() > 800) and np.all(test.class_counts() > 800)


def test_csv_round_trip(tmp_path, blobs3):
    path = tmp_path / "d.csv"
    save_csv(blobs3, path)
    assert path.read_text().splitlines()[0] == "label,f0,f1,f2,f3,f4"
    back = load_csv(path, 3)
    np.testing.assert_array_equal(back.y, blobs3.y)
    np.testing.assert_allclose(back.X, blobs3.X, rtol=0, atol=0)


class TestSynthetic:
    def test_two_blobs_separable(self):
        data = gen_synthetic(2, 2, 100, 4.0, 7)
        assert data.n == 200
        spec = ModelSpec("logistic", 2, 2)
        w = train(spec, data, None, TrainConfig(), LossConfig(spec, 1e-3)).w
        assert micro_f1(w, data, None, spec) >= 0.99

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            gen_synthetic(3, 5, 0, 4.0, 1)

    def test_deterministic(self):
        a = gen_synthetic(3, 4, 20, 2.0, 5)
        b = gen_synthetic(3, 4, 20, 2.0, 5)
        assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()

    def test_features_in_unit_interval(self):
        data = gen_synthetic(4, 3, 50, 6.0, 2)
        assert data.X.min() == 0.0 and data.X.max() == 1.0

    def test_mean_separation(self):
        data = gen_synthetic(3, 4, 4000, 4.0, 9)
        means = np.array([data.X[data.y == c].mean(0) for c in range(3)])
        dists = [np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3)]
        # separation is preserved up to the global affine scale
        assert max(dists) / min(dists) == pytest.approx(1.0, abs=0.03)


class TestBiasedDeletion:
    def test_concentrates_on_biased_classes(self):
        data = gen_synthetic(10, 10, 500, 4.0, 0)
        split = sample_biased_deletion(data, BiasSpec({0: 99, 7: 99}, 600, seed=4))
        counts = data.class_counts(split.forget_indices)
        assert counts[0] + counts[7] > 0.9 * split.m

    def test_uniform_small_kl(self):
        data = gen_synthetic(10, 5, 5000, 4.0, 0)
        split = sample_biased_deletion(data, BiasSpec({}, 1000, seed=1))
        assert split.achieved_kl < 1e-4

    def test_exhaustive_class_deletion(self, blobs3):
        m = int((blobs3.y == 0).sum())
        split = sample_biased_deletion(blobs3, BiasSpec({0: 1.0}, m, seed=0, default_weight=0.0))
        assert blobs3.class_counts(split.retain_indices)[0] == 0

    def test_infeasible(self, blobs3):
        m = int((blobs3.y == 0).sum()) + 1
        with pytest.raises(InfeasibleSpecError):
            sample_biased_deletion(blobs3, BiasSpec({0: 1.0}, m, default_weight=0.0))
        with pytest.raises(InfeasibleSpecError):
            sample_biased_deletion(blobs3, BiasSpec({}, blobs3.n))

    def test_deterministic_and_partition(self, blobs3):
        spec = BiasSpec({1: 5.0}, 40, seed=9)
        a = sample_biased_deletion(blobs3, spec)
        b = sample_biased_deletion(blobs3, spec)
        np.testing.assert_array_equal(a.forget_indices, b.forget_indices)
        assert a.m == 40
        assert np.intersect1d(a.forget_indices, a.retain_indices).size == 0
        np.testing.assert_array_equal(np.union1d(a.forget_indices, a.retain_indices), np.arange(blobs3.n))

    def test_kl_grows_with_m(self):
        data = gen_synthetic(10, 5, 300, 4.0, 0)
        kls = [sample_biased_deletion(data, BiasSpec({0: 99, 7: 99}, m, seed=2)).achieved_kl
               for m in (50, 150, 300, 450)]
        assert kls == sorted(kls)

    def test_deletion_count_for_kl(self):
        data = gen_synthetic(10, 5, 300, 4.0, 0)
        m = deletion_count_for_kl(data, {0: 99, 7: 99}, 0.05, seed=2)
        kl = lambda k: sample_biased_deletion(data, BiasSpec({0: 99, 7: 99}, k, seed=2)).achieved_kl
        assert kl(m) >= 0.05 > kl(m - 1)

    def test_bias_spec_validation(self):
        with pytest.raises(ValueError):
            BiasSpec({0: -1.0}, 3)
        with pytest.raises(ValueError):
            BiasSpec({0: 0.0}, 3, default_weight=0.0)
        with pytest.raises(ValueError):
            BiasSpec({}, 0)


class TestClassMarginalKL:
    def test_identical_is_zero(self, blobs3):
        assert class_marginal_kl(blobs3, np.arange(blobs3.n)) == 0.0

    def test_hand_closed_form(self):
        y = np.array([0] * 100 + [1] * 100)
        data = Dataset(np.zeros((200, 1)), y, 2)
        retained = np.arange(150)  # 100 of class 0, 50 of class 1
        p, q = np.array([0.5, 0.5]), np.array([2 / 3, 1 / 3])
        expect = float(np.sum(p * np.log(p / q)))
        assert class_marginal_kl(data, retained, 1e-9) == pytest.approx(expect, rel=1e-8)


class TestVerifyShift:
    def test_proportional_deletion(self):
        y = np.repeat(np.arange(4), 10)
        data = Dataset(np.zeros((40, 1)), y, 4)
        forget = np.concatenate([np.flatnonzero(y == c)[:3] for c in range(4)])
        assert not verify_shift(data, split_from_forget(data, forget)).shifted

    def test_biased_split_has_witness(self):
        data = gen_synthetic(10, 10, 200, 4.0, 0)
        split = sample_biased_deletion(data, BiasSpec({0: 99, 7: 99}, 300, seed=1))
        w = verify_shift(data, split)
        assert w.shifted and w.witness_class in (0, 7)

    def test_single_class(self):
        data = Dataset(np.zeros((5, 1)), np.zeros(5, dtype=int), 1)
        assert not verify_shift(data, split_from_forget(data, [2])).shifted


def test_uniform_kl_small_over_many_seeds():
    data = gen_synthetic(10, 2, 1000, 4.0, 0)
    kls = [sample_biased_deletion(data, BiasSpec({}, 2000, seed=s)).achieved_kl for s in range(1000)]
    assert float(np.mean(kls)) < 1e-3
