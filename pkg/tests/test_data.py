import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ferronet.data import (
    CIFAR_RECORD_BYTES,
    Dataset,
    NormalizationStats,
    batches,
    compute_normalization,
    expand_dataset_offline,
    find_cifar10_files,
    load_cifar10_binary,
    load_image_folder,
    make_mini_cifar10,
    mini_cifar10_indices,
    read_ppm,
    resize_nearest,
    synthetic_cifar10,
    write_cifar10_binary,
    write_ppm,
)
from ferronet.errors import ContractError, DataError

NAMES = tuple("abcdefghij")


def dataset(n, rng, side=4, classes=10):
    return Dataset(rng.integers(0, 256, size=(n, 3, side, side), dtype=np.uint8),
                   np.arange(n) % classes, NAMES[:classes])


class TestCifar:
    def test_round_trip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, size=(7, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, size=7)
        write_cifar10_binary(tmp_path / "b.bin", imgs, labels)
        ds = load_cifar10_binary(tmp_path / "b.bin")
        np.testing.assert_array_equal(ds.images, imgs)
        np.testing.assert_array_equal(ds.class_labels, labels)
        assert ds.class_names[0] == "airplane"

    def test_record_layout(self, tmp_path):
        rec = np.zeros(CIFAR_RECORD_BYTES, np.uint8)
        rec[0] = 3
        rec[1:1025] = 255
        (tmp_path / "one.bin").write_bytes(rec.tobytes())
        ds = load_cifar10_binary([tmp_path / "one.bin"])
        assert ds.class_labels.tolist() == [3]
        assert np.all(ds.images[0, 0] == 255) and np.all(ds.images[0, 1:] == 0)

    def test_two_records(self, tmp_path):
        (tmp_path / "two.bin").write_bytes(bytes(2 * 3073))
        assert len(load_cifar10_binary(tmp_path / "two.bin")) == 2

    def test_batch_file_size(self, tmp_path):
        write_cifar10_binary(tmp_path / "full.bin", np.zeros((10_000, 3, 32, 32), np.uint8), np.zeros(10_000))
        assert (tmp_path / "full.bin").stat().st_size == 30_730_000

    def test_bad_size(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(bytes(3072))
        with pytest.raises(DataError, match="multiple"):
            load_cifar10_binary(tmp_path / "bad.bin")

    def test_bad_label(self, tmp_path):
        rec = bytearray(3073)
        rec[0] = 10
        (tmp_path / "bad.bin").write_bytes(bytes(rec))
        with pytest.raises(DataError, match="label"):
            load_cifar10_binary(tmp_path / "bad.bin")

    def test_find_files(self, tmp_path):
        sub = tmp_path / "cifar-10-batches-bin"
        sub.mkdir()
        for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
            (sub / name).write_bytes(b"")
        train, test = find_cifar10_files(tmp_path)
        assert len(train) == 5 and test.name == "test_batch.bin"
        with pytest.raises(DataError):
            find_cifar10_files(tmp_path / "nowhere")


class TestMini:
    labels = np.repeat(np.arange(10), 130)

    def test_default(self):
        idx = mini_cifar10_indices(self.labels, 100, seed=3)
        assert len(idx) == 1000
        assert np.all(np.bincount(self.labels[idx]) == 100)
        assert len(set(idx.tolist())) == 1000

    def test_seeded(self):
        np.testing.assert_array_equal(mini_cifar10_indices(self.labels, 100, 1), mini_cifar10_indices(self.labels, 100, 1))
        assert not np.array_equal(mini_cifar10_indices(self.labels, 100, 1), mini_cifar10_indices(self.labels, 100, 2))

    def test_full_class(self):
        idx = mini_cifar10_indices(self.labels, 130, 0)
        np.testing.assert_array_equal(idx, np.arange(1300))

    def test_insufficient(self):
        with pytest.raises(ContractError):
            mini_cifar10_indices(self.labels, 131, 0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 130))
    def test_balance_any_seed(self, seed, per_class):
        idx = mini_cifar10_indices(self.labels, per_class, seed)
        assert np.all(np.bincount(self.labels[idx], minlength=10) == per_class)

    def test_make_mini(self, rng):
        ds = dataset(300, rng)
        mini = make_mini_cifar10(ds, 20, 0)
        assert len(mini) == 200 and np.all(np.bincount(mini.class_labels) == 20)

    def test_synthetic_balanced(self):
        imgs, labels = synthetic_cifar10(5, seed=0)
        assert imgs.shape == (50, 3, 32, 32) and imgs.dtype == np.uint8
        assert np.all(np.bincount(labels) == 5)
        a, _ = synthetic_cifar10(5, seed=0)
        np.testing.assert_array_equal(a, imgs)


class TestPpmFolder:
    def test_known_bytes(self, tmp_path):
        (tmp_path / "x.ppm").write_bytes(b"P6\n# comment\n2 2\n255\n" + bytes(range(12)))
        img = read_ppm(tmp_path / "x.ppm")
        assert img.shape == (3, 2, 2)
        assert img[:, 0, 0].tolist() == [0, 1, 2] and img[:, 1, 1].tolist() == [9, 10, 11]

    def test_write_read(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(3, 5, 7), dtype=np.uint8)
        write_ppm(tmp_path / "y.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "y.ppm"), img)

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(DataError, match="p3.ppm"):
            read_ppm(tmp_path / "p3.ppm")

    def test_truncated(self, tmp_path):
        (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(DataError, match="truncated"):
            read_ppm(tmp_path / "t.ppm")

    def test_resize(self):
        img = np.arange(4, dtype=np.uint8).reshape(1, 2, 2)
        np.testing.assert_array_equal(resize_nearest(img, 4)[0], np.kron(img[0], np.ones((2, 2), np.uint8)))

    def test_folder(self, tmp_path, rng):
        lines = []
        for i, cls in enumerate(["fatigue", "sphere", "fatigue", "oxide"]):
            write_ppm(tmp_path / f"{i}.ppm", rng.integers(0, 256, size=(3, 9, 11), dtype=np.uint8))
            lines.append(f"{i}.ppm,{cls}")
        (tmp_path / "m.txt").write_text("\n".join(lines) + "\n")
        ds = load_image_folder(tmp_path, "m.txt", image_size=8)
        assert ds.images.shape == (4, 3, 8, 8)
        assert ds.class_names == ("fatigue", "sphere", "oxide")
        assert ds.class_labels.tolist() == [0, 1, 0, 2]

    def test_empty_manifest(self, tmp_path):
        (tmp_path / "m.txt").write_text("")
        assert len(load_image_folder(tmp_path, "m.txt")) == 0

    def test_missing_file_names_path(self, tmp_path):
        (tmp_path / "m.txt").write_text("gone.ppm,a\n")
        with pytest.raises(DataError, match="gone.ppm"):
            load_image_folder(tmp_path, "m.txt")


class TestNormalization:
    def test_zero_images(self):
        ds = Dataset(np.zeros((2, 3, 2, 2), np.uint8), [0, 1], NAMES)
        stats = compute_normalization(ds)
        assert stats.mean == (0.0, 0.0, 0.0) and stats.std == (1e-6,) * 3

    def test_full_images(self):
        stats = compute_normalization(Dataset(np.full((2, 3, 2, 2), 255, np.uint8), [0, 1], NAMES))
        assert stats.mean == (1.0, 1.0, 1.0)

    def test_loop_oracle(self, rng):
        ds = dataset(2, rng, side=2)
        stats = compute_normalization(ds)
        for c in range(3):
            vals = [ds.images[n, c, i, j] / 255.0 for n in range(2) for i in range(2) for j in range(2)]
            mu = sum(vals) / len(vals)
            sd = (sum((v - mu) ** 2 for v in vals) / len(vals)) ** 0.5
            assert abs(stats.mean[c] - mu) <= 1e-9 and abs(stats.std[c] - sd) <= 1e-9

    def test_empty(self):
        with pytest.raises(ContractError):
            compute_normalization(Dataset(np.zeros((0, 3, 2, 2), np.uint8), [], NAMES))

    def test_inverse(self, rng):
        ds = dataset(5, rng)
        stats = compute_normalization(ds)
        np.testing.assert_allclose(stats.denormalize(stats.normalize(ds.images)), ds.images / 255.0, atol=1e-6)

    def test_std_positive(self):
        with pytest.raises(ContractError):
            NormalizationStats((0, 0, 0), (1, 0, 1))


class TestBatches:
    def test_counts(self, rng):
        sizes = [len(b.class_labels) for b in batches(dataset(1000, rng, side=2), 64, shuffle_seed=0)]
        assert len(sizes) == 16 and sizes[-1] == 40

    def test_epoch_orders(self, rng):
        ds = dataset(50, rng, side=2)

        def order(epoch):
            return np.concatenate([b.unpermuted.reshape(len(b.unpermuted), -1)[:, 0] for b in
                                   batches(ds, 8, shuffle_seed=4, epoch=epoch)])

        np.testing.assert_array_equal(order(0), order(0))
        assert not np.array_equal(order(0), order(1))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 40), st.integers(0, 5))
    def test_coverage(self, seed, batch_size, epoch):
        ds = Dataset(np.zeros((37, 3, 2, 2), np.uint8), np.arange(37) % 10, NAMES)
        ids = []
        for b in batches(ds, batch_size, shuffle_seed=seed, epoch=epoch):
            ids.extend(b.class_labels.tolist())
        assert sorted(ids) == sorted(ds.class_labels.tolist())

    def test_identity_mode(self, rng):
        assert all(np.all(b.perm_labels == 0) for b in batches(dataset(30, rng), 7, shuffle_seed=1))

    def test_online_permutes(self, rng):
        from ferronet.permute import enumerate_permutations, permute_image

        ds = dataset(40, rng)
        perms = enumerate_permutations()
        seen = set()
        for b in batches(ds, 16, shuffle_seed=2, augmentation="online_uniform"):
            for img, raw, p in zip(b.images.data, b.unpermuted, b.perm_labels):
                np.testing.assert_allclose(img, permute_image(raw, perms[p]) / 255.0)
                seen.add(int(p))
        assert len(seen) > 10

    def test_offline_dataset(self, rng):
        big = expand_dataset_offline(dataset(3, rng))
        assert len(big) == 72
        labels = np.concatenate([b.perm_labels for b in batches(big, 10)])
        np.testing.assert_array_equal(labels, np.tile(np.arange(24), 3))
        with pytest.raises(ContractError):
            next(batches(big, 10, augmentation="online_uniform"))

    def test_normalized(self, rng):
        ds = dataset(20, rng)
        stats = compute_normalization(ds)
        x = np.concatenate([b.images.data for b in batches(ds, 20, stats=stats)])
        np.testing.assert_allclose(x.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(x.std(axis=(0, 2, 3)), 1.0, atol=1e-12)

    def test_flip_crop_shape(self, rng):
        b = next(batches(dataset(4, rng, side=8), 4, shuffle_seed=0, flip_crop=True))
        assert b.images.shape == (4, 3, 8, 8)

    def test_bad_batch_size(self, rng):
        with pytest.raises(ContractError):
            next(batches(dataset(4, rng), 0))


class TestDatasetContract:
    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            Dataset(np.zeros((1, 3, 2, 2), np.uint8), [3], ("a", "b"))

    def test_odd_sides(self):
        with pytest.raises(ContractError):
            Dataset(np.zeros((1, 3, 3, 2), np.uint8), [0], ("a",))
