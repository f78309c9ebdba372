import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from vitpatch.data import (
    DatasetError,
    LabeledPatch,
    extract_patches_grid,
    generate_synthetic_dataset,
    grid_positions,
    load_dataset,
    read_class_map,
    split_dataset,
    stack,
    write_split_manifest,
)


def write_png(path, side=100, value=128):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((side, side, 3), value, dtype=np.uint8)).save(path)


def labelled(counts):
    out = []
    for label, n in enumerate(counts):
        out += [LabeledPatch(np.zeros((1, 2, 2), np.float32), label, path=f"{label}/{i}") for i in range(n)]
    return out


class TestLoadDataset:
    def test_two_folders_of_600(self, tmp_path):
        for name in ("ALCL", "CHL"):
            for i in range(600):
                write_png(tmp_path / name / f"{i:04d}.png", value=i % 256)
        patches, names = load_dataset(tmp_path)
        assert len(patches) == 1200
        assert names == ["ALCL", "CHL"]
        assert [sum(p.label == c for p in patches) for c in (0, 1)] == [600, 600]
        first = patches[0]
        assert first.pixels.shape == (3, 100, 100) and first.pixels.dtype == np.float32
        assert first.pixels.max() == 0.0 and patches[1].pixels.max() == pytest.approx(1 / 255)

    def test_pixel_scaling(self, tmp_path):
        write_png(tmp_path / "a" / "x.png", value=255)
        patches, _ = load_dataset(tmp_path)
        assert patches[0].pixels.min() == 1.0

    def test_empty_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_empty_class_directory(self, tmp_path):
        write_png(tmp_path / "a" / "x.png")
        (tmp_path / "b").mkdir()
        with pytest.raises(DatasetError, match="no images"):
            load_dataset(tmp_path)

    def test_wrong_size_names_the_file(self, tmp_path):
        write_png(tmp_path / "a" / "good.png")
        write_png(tmp_path / "a" / "small.png", side=80)
        with pytest.raises(DatasetError, match="small.png.*80x80"):
            load_dataset(tmp_path)

    def test_class_map_override(self, tmp_path):
        write_png(tmp_path / "ALCL" / "x.png")
        write_png(tmp_path / "CHL" / "y.png")
        map_file = tmp_path / "map.tsv"
        map_file.write_text("# name\tindex\nCHL\t0\nALCL\t1\n")
        patches, names = load_dataset(tmp_path, class_map=read_class_map(map_file))
        assert names == ["CHL", "ALCL"]
        assert {p.source_id: p.label for p in patches} == {"ALCL": 1, "CHL": 0}

    def test_class_map_missing_entry(self, tmp_path):
        write_png(tmp_path / "ALCL" / "x.png")
        with pytest.raises(DatasetError):
            load_dataset(tmp_path, class_map={"CHL": 0})


class TestGridExtraction:
    def test_capacity_below_limit(self):
        patches = extract_patches_grid(np.zeros((3, 500, 500)), 100, limit=60)
        assert len(patches) == 25
        assert all(p.shape == (3, 100, 100) for p in patches)

    def test_rectangular(self):
        image = np.arange(200 * 100, dtype=float).reshape(200, 100)
        patches = extract_patches_grid(image, 100, limit=60)
        assert len(patches) == 2
        np.testing.assert_array_equal(patches[1], image[100:, :])

    def test_sampled_positions_distinct_and_seeded(self):
        a = grid_positions(1000, 1000, 100, limit=60, rng=np.random.default_rng(7))
        b = grid_positions(1000, 1000, 100, limit=60, rng=np.random.default_rng(7))
        assert a == b
        assert len(a) == len(set(a)) == 60
        assert all(r % 100 == 0 and c % 100 == 0 and r < 1000 and c < 1000 for r, c in a)

    def test_sampling_needs_generator(self):
        with pytest.raises(ValueError):
            grid_positions(1000, 1000, 100, limit=60)

    def test_image_smaller_than_patch(self):
        with pytest.raises(DatasetError):
            extract_patches_grid(np.zeros((3, 50, 50)), 100)


class TestSplit:
    def test_default_ratios_on_1200(self):
        split = split_dataset(labelled([600, 600]), (0.9, 0.0, 0.1), seed=0)
        assert split.sizes() == (1080, 0, 120)
        assert [sum(p.label == c for p in split.test) for c in (0, 1)] == [60, 60]

    def test_everything_in_train(self):
        assert split_dataset(labelled([10, 10]), (1.0, 0.0, 0.0)).sizes() == (20, 0, 0)

    def test_three_way_balanced(self):
        split = split_dataset(labelled([500, 500]), (0.8, 0.1, 0.1), seed=1)
        assert split.sizes() == (800, 100, 100)
        for part in (split.validation, split.test):
            assert [sum(p.label == c for p in part) for c in (0, 1)] == [50, 50]

    def test_seed_determines_partition(self):
        patches = labelled([30, 30])
        ids = lambda s: [[p.path for p in part] for part in (s.train, s.validation, s.test)]
        assert ids(split_dataset(patches, seed=3)) == ids(split_dataset(patches, seed=3))
        assert ids(split_dataset(patches, seed=3)) != ids(split_dataset(patches, seed=4))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
    def test_disjoint_and_exhaustive(self, counts, seed):
        patches = labelled(counts)
        try:
            split = split_dataset(patches, (0.7, 0.15, 0.15), seed=seed)
        except DatasetError:
            return
        ids = [p.path for part in (split.train, split.validation, split.test) for p in part]
        assert len(ids) == len(set(ids)) == len(patches)

    def test_rounds_to_zero(self):
        with pytest.raises(DatasetError, match="test split"):
            split_dataset(labelled([3, 3]), (0.9, 0.0, 0.1))

    @pytest.mark.parametrize("ratios", [(0.5, 0.2, 0.2), (1.1, 0.0, -0.1), (0.0, 0.0, 0.0), (0.9, 0.1)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(DatasetError):
            split_dataset(labelled([10, 10]), ratios)

    def test_manifest(self, tmp_path):
        split = split_dataset(labelled([10, 10]), (0.8, 0.0, 0.2), seed=0)
        path = tmp_path / "split.tsv"
        write_split_manifest(split, path)
        rows = [line.split("\t") for line in path.read_text().splitlines()]
        assert len(rows) == 20
        assert sum(r[2] == "test" for r in rows) == 4
        assert {r[0] for r in rows} == {p.path for p in labelled([10, 10])}


def nearest_neighbour_accuracy(train, test, k=3):
    """Majority vote among the k closest training images in L2."""
    x_train, y_train = stack(train)
    x_test, y_test = stack(test)
    a = x_train.reshape(len(train), -1).astype(np.float64)
    b = x_test.reshape(len(test), -1).astype(np.float64)
    d = (b**2).sum(1)[:, None] - 2 * b @ a.T + (a**2).sum(1)[None, :]
    votes = y_train[np.argsort(d, axis=1)[:, :k]]
    pred = (votes.sum(axis=1) * 2 > k).astype(int)
    return float(np.mean(pred == y_test))


class TestSynthetic:
    def test_size_and_range(self):
        patches = generate_synthetic_dataset(600, seed=42)
        assert len(patches) == 1200
        assert [sum(p.label == c for p in patches) for c in (0, 1)] == [600, 600]
        x, _ = stack(patches[:50])
        assert x.dtype == np.float32 and x.shape == (50, 3, 100, 100)
        assert x.min() >= 0.0 and x.max() <= 1.0

    def test_deterministic(self):
        a, b = generate_synthetic_dataset(5, seed=9), generate_synthetic_dataset(5, seed=9)
        assert all(np.array_equal(p.pixels, q.pixels) for p, q in zip(a, b))
        c = generate_synthetic_dataset(5, seed=10)
        assert not np.array_equal(a[0].pixels, c[0].pixels)

    def test_channels_differ_by_offset(self):
        pixels = generate_synthetic_dataset(1, seed=0)[1].pixels
        assert not np.array_equal(pixels[0], pixels[1])
        assert np.max(np.abs(pixels[0] - pixels[1])) <= 0.1 + 1e-6

    def test_separable_by_nearest_neighbours(self):
        split = split_dataset(generate_synthetic_dataset(600, seed=42), (0.9, 0.0, 0.1), seed=42)
        assert nearest_neighbour_accuracy(split.train, split.test) > 0.95
