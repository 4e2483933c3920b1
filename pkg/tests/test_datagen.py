import os

import numpy as np
import pytest
from scipy import stats as sps

from ioreward.datagen import (CORRUPTION_IDS, DatasetSpec, PairSample,
                              corpus_stats, gen_cd25_pair, gen_dataset,
                              gen_pair, gen_seg_pair, iou, mixup, one_hot,
                              read_dataset, read_header, sample_seed,
                              seg_truth_mask, split_dataset,
                              valid_pairing_relation, write_dataset)
from ioreward.errors import (ChecksumError, ConfigError, ContractError,
                             DataFormatError)


def cd25_spec(n=200, seed=0, **kw):
    return DatasetSpec(kind="cd25", num_categories=5, num_samples=n,
                       image_size=32, seed=seed, **kw)


def seg_spec(n=200, seed=0, **kw):
    return DatasetSpec(kind="seg", num_samples=n, image_size=32, seed=seed,
                       **kw)


class TestSpecValidation:
    def test_kind_checked(self):
        with pytest.raises(ConfigError):
            DatasetSpec(kind="imagenet")

    def test_category_range(self):
        with pytest.raises(ConfigError):
            DatasetSpec(num_categories=1)
        with pytest.raises(ConfigError):
            DatasetSpec(num_categories=26)

    def test_corruption_menu_checked(self):
        with pytest.raises(ConfigError):
            DatasetSpec(kind="seg", corruption_menu=("blur",))

    def test_split_fractions_sum(self):
        with pytest.raises(ConfigError):
            DatasetSpec(split_fractions=(0.8, 0.3))


class TestCD25:
    def test_identity_relation_positive_keeps_category(self):
        spec = cd25_spec()
        for i in range(0, 40, 2):
            s = gen_cd25_pair(spec, i + 1)   # odd indices are positives
            if s.label == 1:
                assert s.category_out == s.category_in

    def test_negative_not_in_relation(self):
        spec = cd25_spec()
        rel = valid_pairing_relation(spec)
        for i in range(40):
            s = gen_cd25_pair(spec, i)
            if s.label == 0:
                assert s.category_out != rel[s.category_in]
            else:
                assert s.category_out == rel[s.category_in]

    def test_permuted_relation_is_derangement(self):
        spec = cd25_spec(pairing="permuted")
        rel = valid_pairing_relation(spec)
        assert sorted(rel) == list(range(5))
        assert not np.any(rel == np.arange(5))

    def test_label_balance_and_category_uniformity(self):
        spec = cd25_spec(n=1000, seed=7)
        samples = gen_dataset(spec)
        stats = corpus_stats(samples)
        assert abs(stats["label_balance"] - 0.5) <= 0.01
        counts = np.array([stats["category_in_histogram"].get(k, 0)
                           for k in range(5)])
        assert sps.chisquare(counts).pvalue > 0.01

    def test_bit_identical_regeneration(self):
        spec = cd25_spec(seed=3)
        a = gen_cd25_pair(spec, 42)
        b = gen_cd25_pair(spec, 42)
        assert a.seed == b.seed == sample_seed(3, 42)
        assert np.array_equal(a.input_image, b.input_image)
        assert np.array_equal(a.output_image, b.output_image)

    def test_images_in_unit_range(self):
        s = gen_cd25_pair(cd25_spec(), 5)
        for img in (s.input_image, s.output_image):
            assert img.dtype == np.float32
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_index_bound(self):
        with pytest.raises(ContractError):
            gen_cd25_pair(cd25_spec(n=10), 10)

    def test_pixel_logistic_baseline_below_80(self):
        # frozen separability threshold: the pair relation must not be
        # linearly solvable from raw pixels
        from sklearn.linear_model import LogisticRegression
        spec = cd25_spec(n=1200, seed=21)
        samples = gen_dataset(spec)
        x = np.stack([np.concatenate([s.input_image[:, ::2, ::2].ravel(),
                                      s.output_image[:, ::2, ::2].ravel()])
                      for s in samples])
        y = np.array([s.label for s in samples])
        clf = LogisticRegression(max_iter=500)
        clf.fit(x[:1000], y[:1000])
        acc = clf.score(x[1000:], y[1000:])
        assert acc < 0.80, f"linear baseline reached {acc}"


class TestSeg:
    def test_positive_mask_is_exact_foreground(self):
        spec = seg_spec()
        for i in (1, 3, 5, 7):
            s = gen_seg_pair(spec, i)
            assert s.label == 1 and s.category_out == 0
            mask = s.output_image[0] > 0.5
            truth = seg_truth_mask(spec, i)
            assert iou(mask, truth) == 1.0
            assert np.array_equal(s.output_image[0], s.output_image[1])

    def test_negatives_below_iou_ceiling(self):
        spec = seg_spec(n=240, seed=4)
        for i in range(0, 240, 2):
            s = gen_seg_pair(spec, i)
            assert s.label == 0 and s.category_out != 0
            mask = s.output_image[0] > 0.5
            truth = seg_truth_mask(spec, i)
            assert iou(mask, truth) < 0.8, f"index {i}"

    def test_translate_magnitude_at_least_ten_percent(self):
        spec = seg_spec(n=200, seed=6, corruption_menu=("translate",))
        checked = 0
        for i in range(0, 60, 2):
            s = gen_seg_pair(spec, i)
            truth = seg_truth_mask(spec, i)
            mask = s.output_image[0] > 0.5
            found = None
            for dy in range(-16, 16):
                for dx in range(-16, 16):
                    if np.array_equal(np.roll(truth, (dy, dx), (0, 1)),
                                      mask):
                        found = (dy, dx)
                        break
                if found:
                    break
            assert found is not None, "corrupted mask is not a translation"
            assert max(abs(found[0]), abs(found[1])) >= 3
            checked += 1
        assert checked == 30

    def test_translate_label_undecidable_from_mask_alone(self):
        # constructive: the corrupted mask is exactly the foreground of a
        # different valid input (the toroidally translated input image)
        spec = seg_spec(n=60, seed=8, corruption_menu=("translate",))
        s = gen_seg_pair(spec, 0)
        assert s.label == 0
        truth = seg_truth_mask(spec, 0)
        mask = s.output_image[0] > 0.5
        for dy in range(-16, 16):
            for dx in range(-16, 16):
                if np.array_equal(np.roll(truth, (dy, dx), (0, 1)), mask):
                    translated_input = np.roll(s.input_image, (dy, dx),
                                               (1, 2))
                    # the translated input's true foreground is the mask
                    fg = np.roll(truth, (dy, dx), (0, 1))
                    assert np.array_equal(fg, mask)
                    assert translated_input.shape == s.input_image.shape
                    return
        pytest.fail("no translation found")

    def test_drop_requires_two_shapes(self):
        spec = seg_spec(n=100, seed=9, corruption_menu=("drop",))
        for i in range(0, 30, 2):
            s = gen_seg_pair(spec, i)
            assert s.category_in >= 2   # shape count

    def test_all_menu_items_occur(self):
        spec = seg_spec(n=400, seed=10)
        ids = {gen_seg_pair(spec, i).category_out for i in range(0, 400, 2)}
        assert set(CORRUPTION_IDS.values()) <= ids

    def test_deterministic_regeneration(self):
        spec = seg_spec(seed=11)
        a, b = gen_seg_pair(spec, 42), gen_seg_pair(spec, 42)
        assert np.array_equal(a.input_image, b.input_image)
        assert np.array_equal(a.output_image, b.output_image)


class TestMixup:
    def _batch(self, n=6, seed=0):
        rng = np.random.default_rng(seed)
        x_in = rng.random((n, 3, 8, 8), dtype=np.float32)
        x_out = rng.random((n, 3, 8, 8), dtype=np.float32)
        y = one_hot([i % 2 for i in range(n)])
        return x_in, x_out, y

    def test_lambda_one_keeps_batch(self):
        x_in, x_out, y = self._batch()
        mixed = mixup(x_in, x_out, y, 0.8, np.random.default_rng(0),
                      lam=1.0)
        assert np.array_equal(mixed.x_in, x_in)
        assert np.array_equal(mixed.targets, y)

    def test_half_lambda_soft_labels(self):
        x_in, x_out, y = self._batch(n=2)
        mixed = mixup(x_in, x_out, y, 0.8, np.random.default_rng(3),
                      lam=0.5)
        partner = mixed.partner
        if partner[0] == 1:   # mixed with the opposite label
            assert np.allclose(mixed.targets[0], [0.5, 0.5])

    def test_mean_linearity(self):
        x_in, x_out, y = self._batch(n=8, seed=5)
        rng = np.random.default_rng(7)
        mixed = mixup(x_in, x_out, y, 0.8, rng, lam=0.3)
        want = 0.3 * x_in.mean() + 0.7 * x_in[mixed.partner].mean()
        assert abs(mixed.x_in.mean() - want) < 1e-6

    def test_same_lambda_for_all_streams(self):
        x_in, x_out, y = self._batch(n=4, seed=8)
        mixed = mixup(x_in, x_out, y, 0.8, np.random.default_rng(9))
        lam = mixed.lam
        want_out = lam * x_out + (1 - lam) * x_out[mixed.partner]
        assert np.allclose(mixed.x_out, want_out, atol=1e-6)

    def test_batch_of_one_rejected(self):
        x_in, x_out, y = self._batch(n=1)
        with pytest.raises(ContractError):
            mixup(x_in, x_out, y, 0.8, np.random.default_rng(0))

    def test_nonpositive_alpha_rejected(self):
        x_in, x_out, y = self._batch()
        with pytest.raises(ContractError):
            mixup(x_in, x_out, y, 0.0, np.random.default_rng(0))


class TestFileFormat:
    def test_roundtrip_identical(self, tmp_path):
        spec = cd25_spec(n=100, seed=12)
        samples = gen_dataset(spec)
        path = tmp_path / "c.iord"
        assert write_dataset(spec, path, samples) == 100
        back = list(read_dataset(path))
        assert len(back) == 100
        for a, b in zip(samples, back):
            assert np.array_equal(a.input_image, b.input_image)
            assert np.array_equal(a.output_image, b.output_image)
            assert (a.label, a.seed, a.category_in, a.category_out) == \
                (b.label, b.seed, b.category_in, b.category_out)

    def test_write_read_write_byte_identical(self, tmp_path):
        spec = seg_spec(n=40, seed=13)
        p1, p2 = tmp_path / "a.iord", tmp_path / "b.iord"
        write_dataset(spec, p1)
        write_dataset(spec, p2, list(read_dataset(p1)))
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_dataset_valid(self, tmp_path):
        spec = cd25_spec(n=0)
        path = tmp_path / "empty.iord"
        write_dataset(spec, path)
        assert read_header(path).count == 0
        assert list(read_dataset(path)) == []

    def test_payload_corruption_names_record(self, tmp_path):
        spec = cd25_spec(n=10, seed=14)
        path = tmp_path / "c.iord"
        write_dataset(spec, path)
        raw = bytearray(path.read_bytes())
        header = 13
        rec_len = 13 + 2 * 3 * 32 * 32 * 4 + 4
        # flip one payload byte inside record 3
        raw[header + 3 * rec_len + 200] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError) as exc:
            list(read_dataset(path))
        assert "record 3" in str(exc.value)

    def test_truncation_detected(self, tmp_path):
        spec = cd25_spec(n=5, seed=15)
        path = tmp_path / "c.iord"
        write_dataset(spec, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(DataFormatError):
            list(read_dataset(path))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "c.iord"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(DataFormatError):
            read_header(path)

    def test_split_by_index_range(self):
        spec = cd25_spec(n=10)
        samples = gen_dataset(spec)
        train, val = split_dataset(spec, samples)
        assert len(train) == 8 and len(val) == 2
        assert {s.seed for s in train}.isdisjoint({s.seed for s in val})
