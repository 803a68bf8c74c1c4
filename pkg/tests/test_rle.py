import numpy as np
import pytest

from mcsam.exceptions import ShapeError
from mcsam.rle import counts_to_string, decode_rle, encode_rle, mask_area, string_to_counts


class TestUncompressed:
    def test_hand_fixture_column_major(self):
        mask = np.array([[1, 0], [1, 1]], dtype=bool)
        rle = encode_rle(mask)
        # column-major: T T | F T -> leading zero-run of 0, then 2, 1, 1
        assert rle == {"size": [2, 2], "counts": [0, 2, 1, 1]}
        assert np.array_equal(decode_rle(rle), mask)

    def test_empty_and_full(self):
        empty = np.zeros((3, 4), dtype=bool)
        assert encode_rle(empty)["counts"] == [12]
        full = np.ones((3, 4), dtype=bool)
        assert encode_rle(full)["counts"] == [0, 12]

    @pytest.mark.parametrize("seed", range(8))
    def test_round_trip_random(self, seed):
        rng = np.random.default_rng(seed)
        mask = rng.random((13, 9)) > 0.6
        assert np.array_equal(decode_rle(encode_rle(mask)), mask)

    def test_bad_total_rejected(self):
        with pytest.raises(ShapeError):
            decode_rle({"size": [2, 2], "counts": [1, 1]})

    def test_area(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[1:4, 2:5] = True
        assert mask_area(encode_rle(mask)) == 9


class TestCompressedString:
    @pytest.mark.parametrize("seed", range(8))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(100 + seed)
        counts = rng.integers(0, 2000, size=rng.integers(1, 30)).tolist()
        assert string_to_counts(counts_to_string(counts)) == counts

    def test_decode_inside_rle(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[2:5, 1:4] = True
        rle = encode_rle(mask)
        compressed = {"size": rle["size"], "counts": counts_to_string(rle["counts"])}
        assert np.array_equal(decode_rle(compressed), mask)

    def test_small_values_single_char(self):
        # values < 16 fit one 6-bit character with no continuation
        assert len(counts_to_string([5])) == 1
        assert string_to_counts(counts_to_string([5])) == [5]

    def test_bytes_accepted(self):
        counts = [3, 7, 2]
        s = counts_to_string(counts).encode("ascii")
        assert string_to_counts(s) == counts
