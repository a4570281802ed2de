import json

import numpy as np
import pytest

from xlsor import data
from xlsor.errors import DataError


class TestPGM:
    def test_round_trip(self, tmp_path):
        gray = np.random.default_rng(0).integers(0, 256, (5, 7), dtype=np.uint8)
        data.write_pgm(tmp_path / "a.pgm", gray)
        np.testing.assert_array_equal(data.read_pgm(tmp_path / "a.pgm"), gray)

    def test_header(self, tmp_path):
        data.write_pgm(tmp_path / "a.pgm", np.zeros((2, 3), np.uint8))
        assert (tmp_path / "a.pgm").read_bytes()[:11] == b"P5\n3 2\n255\n"

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
        np.testing.assert_array_equal(data.read_pgm(tmp_path / "c.pgm"), [[1, 2]])

    def test_rejects_ascii(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(DataError):
            data.read_pgm(tmp_path / "a.pgm")

    def test_rejects_short_payload(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
        with pytest.raises(DataError):
            data.read_pgm(tmp_path / "a.pgm")

    def test_writer_needs_uint8(self, tmp_path):
        with pytest.raises(DataError):
            data.write_pgm(tmp_path / "a.pgm", np.zeros((2, 2)))


class TestQuantisation:
    def test_half_rounds_up(self):
        np.testing.assert_array_equal(data.to_u8(np.array([0.5 / 255, 1.5 / 255, 0.0, 1.0])), [1, 2, 0, 255])

    def test_clips(self):
        np.testing.assert_array_equal(data.to_u8(np.array([-0.3, 1.7])), [0, 255])

    def test_round_trip_error(self):
        x = np.random.default_rng(1).uniform(size=1000)
        assert np.abs(data.from_u8(data.to_u8(x)) - x).max() <= 0.5 / 255 + 1e-12


class TestSplits:
    @pytest.mark.parametrize("n,counts", [(40, (28, 4, 8)), (100, (70, 10, 20)), (10, (7, 1, 2))])
    def test_counts(self, n, counts):
        labels = data.split_assignment(n, seed=3)
        assert tuple(labels.count(s) for s in data.SPLITS) == counts

    def test_seeded(self):
        assert data.split_assignment(40, 1) == data.split_assignment(40, 1)
        assert data.split_assignment(40, 1) != data.split_assignment(40, 2)


class TestDataset:
    def make(self, root):
        rng = np.random.default_rng(0)
        images = rng.uniform(size=(3, 4, 4))
        masks = rng.integers(0, 2, (3, 4, 4))
        recs = [
            {"id": "p0", "split": "train", "style": "normal"},
            {"id": "p1", "split": "test", "style": "normal"},
            {"id": "p1_haze", "split": "test", "style": "diffuse_haze"},
        ]
        data.write_dataset(root, recs, images, masks, {"kind": "phantoms"})
        return images, masks

    def test_round_trip(self, tmp_path):
        images, masks = self.make(tmp_path)
        pairs = data.load_pairs(tmp_path)
        assert len(pairs) == 3
        for p, im, m in zip(pairs, images, masks):
            np.testing.assert_array_equal(p.mask, m)
            assert np.abs(p.image - im).max() <= 0.5 / 255 + 1e-12
        assert json.loads((tmp_path / data.MANIFEST).read_text())["kind"] == "phantoms"

    def test_filters(self, tmp_path):
        self.make(tmp_path)
        assert [p.meta["id"] for p in data.load_pairs(tmp_path, split="test")] == ["p1", "p1_haze"]
        assert [p.meta["id"] for p in data.load_pairs(tmp_path, style="normal")] == ["p0", "p1"]
        assert [p.meta["id"] for p in data.load_pairs(tmp_path, style="abnormal")] == ["p1_haze"]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            data.load_pairs(tmp_path / "nowhere")

    def test_non_binary_mask_file(self, tmp_path):
        self.make(tmp_path)
        data.write_pgm(tmp_path / "p0_mask.pgm", np.full((4, 4), 7, np.uint8))
        with pytest.raises(DataError):
            data.load_pairs(tmp_path)
