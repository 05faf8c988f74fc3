import numpy as np
import pytest

from fvnet.data import (DatasetManifest, generate_synthetic, load_manifest,
                        load_video, make_video, save_manifest)


def read_all_bytes(root):
    blobs = {}
    for path in sorted(root.iterdir()):
        blobs[path.name] = path.read_bytes()
    return blobs


class TestGenerate:
    def test_same_seed_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_synthetic(a, 11, 2, 3, 16, 32, 32)
        generate_synthetic(b, 11, 2, 3, 16, 32, 32)
        assert read_all_bytes(a) == read_all_bytes(b)

    def test_different_seed_differs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_synthetic(a, 11, 2, 1, 16, 32, 32)
        generate_synthetic(b, 12, 2, 1, 16, 32, 32)
        assert read_all_bytes(a) != read_all_bytes(b)

    def test_per_class_zero_gives_empty_manifest(self, tmp_path):
        manifest = generate_synthetic(tmp_path, 0, 3, 0, 16, 32, 32)
        assert len(manifest) == 0
        assert manifest.num_classes == 3

    def test_invalid_dims_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="32x32"):
            generate_synthetic(tmp_path, 0, 2, 1, 16, 8, 8)
        with pytest.raises(ValueError, match="frames"):
            generate_synthetic(tmp_path, 0, 2, 1, 5, 32, 32)
        with pytest.raises(ValueError, match="num_classes"):
            generate_synthetic(tmp_path, 0, 9, 1, 16, 32, 32)

    def test_videos_load_as_f64(self, tmp_path):
        manifest = generate_synthetic(tmp_path, 3, 2, 1, 16, 32, 32)
        sample = load_video(tmp_path, manifest.entries[0])
        assert sample.video.dtype == np.float64
        assert sample.video.shape == (16, 32, 32, 1)
        assert np.all(np.isfinite(sample.video))

    def test_marginal_frame_stats_match_across_classes(self):
        # classes must be separable only through temporal information: the
        # per-frame mean/variance deviates across classes by < 1% on average
        rng = np.random.default_rng(42)
        num_classes, per_class = 4, 25
        means = np.zeros(num_classes)
        variances = np.zeros(num_classes)
        for label in range(num_classes):
            for _ in range(per_class):
                video = make_video(rng, label, 16, 32, 32)
                means[label] += video.mean() / per_class
                variances[label] += video.var() / per_class
        for stats in (means, variances):
            deviation = np.mean(np.abs(stats - stats.mean()))
            assert deviation / abs(stats.mean()) < 0.01, stats


class TestManifest:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("")
        manifest = load_manifest(path)
        assert len(manifest) == 0

    def test_single_entry(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a.fvnt,3\n")
        manifest = load_manifest(path)
        assert manifest.entries == [("a.fvnt", 3)]
        assert manifest.num_classes == 4

    def test_label_out_of_range(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a.fvnt,3\n")
        with pytest.raises(ValueError, match="label 3"):
            load_manifest(path, num_classes=3)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a.fvnt,0\nnot a line\n")
        with pytest.raises(ValueError, match=":2"):
            load_manifest(path)

    def test_non_integer_label(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a.fvnt,x\n")
        with pytest.raises(ValueError, match="not an integer"):
            load_manifest(path)

    def test_order_preserved_roundtrip(self, tmp_path):
        entries = [("c.fvnt", 1), ("a.fvnt", 0), ("b.fvnt", 1)]
        path = tmp_path / "m.csv"
        save_manifest(path, DatasetManifest(entries, 2))
        assert load_manifest(path, num_classes=2).entries == entries
