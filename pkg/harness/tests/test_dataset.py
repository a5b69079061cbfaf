import numpy as np
import pytest

from toyharness.dataset import SliceAccessor, SliceBoundsError, StreamSpec, build_stream


def spec(**overrides):
    base = dict(length=50000, vocab_size=64, doc_len=64, p_follow=0.8,
                follow_mult=5, follow_inc=1, seed=1234)
    base.update(overrides)
    return StreamSpec(**base)


class TestBuildStream:
    def test_same_spec_bit_identical(self):
        a = build_stream(spec())
        b = build_stream(spec())
        assert np.array_equal(a, b)

    def test_different_seed_differs(self):
        assert not np.array_equal(build_stream(spec()), build_stream(spec(seed=99)))

    def test_follow_fraction_near_p(self):
        stream = build_stream(spec())
        follows = (stream[1:] == (5 * stream[:-1] + 1) % 64).mean()
        # follow-rate includes accidental matches from the uniform branch
        assert 0.78 < follows < 0.84

    def test_validation(self):
        with pytest.raises(ValueError):
            build_stream(spec(length=0))
        with pytest.raises(ValueError):
            build_stream(spec(p_follow=1.5))


class TestSliceAccessor:
    def make(self):
        stream = build_stream(spec(length=1000))
        return stream, SliceAccessor(stream, 100, 900, "train")

    def test_window_matches_stream(self):
        stream, acc = self.make()
        assert np.array_equal(acc.window(100, 50), stream[100:150])
        assert np.array_equal(acc.window(850, 50), stream[850:900])

    def test_window_is_read_only(self):
        _, acc = self.make()
        w = acc.window(200, 10)
        with pytest.raises(ValueError):
            w[0] = 1

    def test_out_of_bounds_raises(self):
        _, acc = self.make()
        with pytest.raises(SliceBoundsError):
            acc.window(99, 10)  # before the slice
        with pytest.raises(SliceBoundsError):
            acc.window(895, 10)  # runs past the end
        with pytest.raises(SliceBoundsError):
            acc.window(950, 10)  # entirely outside
        with pytest.raises(SliceBoundsError):
            acc.window(200, 0)  # degenerate length

    def test_len(self):
        _, acc = self.make()
        assert len(acc) == 800

    def test_bad_slice_rejected(self):
        stream = build_stream(spec(length=100))
        with pytest.raises(ValueError):
            SliceAccessor(stream, 50, 200, "val")
