import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ganbert import tokenizer as tk
from ganbert.tokenizer import (
    BEGIN,
    END,
    MASK,
    SEP,
    TOTAL_LEN,
    SummarySequence,
    TokenizerError,
    assemble,
    dequantize,
    dumps_tokens,
    loads_tokens,
    plan_mask,
    quantize,
    quantize_tensor,
    summarize,
    unmask,
)
from ganbert.volume import Modality, Volume


def brute_summarize(arr: np.ndarray) -> np.ndarray:
    """Loop-over-regions reference: signed value of max |v|, first in (t, d, h, w) order."""
    if arr.ndim == 3:
        arr = arr[None]
    _, d, h, w = arr.shape
    bd, bh, bw = (tk.region_bounds(n) for n in (d, h, w))
    out = []
    for i in range(8):
        for j in range(8):
            for k in range(8):
                block = arr[:, bd[i]:bd[i + 1], bh[j]:bh[j + 1], bw[k]:bw[k + 1]].ravel()
                best = block[0]
                for v in block[1:]:
                    if abs(v) > abs(best):
                        best = v
                out.append(best)
    return np.array(out, dtype=np.float64)


class TestSummarize:
    def test_constant(self):
        s = summarize(Volume(np.full((16, 16, 16), 2.5), Modality.MRI))
        assert s.values.shape == (512,)
        assert np.all(s.values == 2.5)

    def test_single_spike(self):
        arr = np.zeros((24, 19, 19), dtype=np.float32)
        arr[13, 2, 17] = 9.5
        s = summarize(Volume(arr, Modality.MRI))
        assert np.count_nonzero(s.values) == 1
        assert s.values.max() == 9.5

    def test_signed_abs_max(self):
        arr = np.zeros((16, 16, 16), dtype=np.float32)
        arr[0, 0, 0], arr[0, 0, 1], arr[1, 1, 1] = -5, 3, 0
        assert summarize(Volume(arr, Modality.MRI)).values[0] == -5

    @pytest.mark.parametrize("shape", [(8, 8, 8), (24, 19, 19), (2, 24, 19, 19), (1, 9, 15, 11), (64, 64, 64)])
    def test_matches_brute_force(self, shape):
        arr = np.random.default_rng(sum(shape)).standard_normal(shape).astype(np.float32)
        mod = Modality.PET if len(shape) == 4 else Modality.MRI
        got = summarize(Volume(arr, mod)).values
        np.testing.assert_array_equal(got, brute_summarize(arr).astype(np.float32))

    def test_pet_spans_time(self):
        arr = np.zeros((2, 8, 8, 8), dtype=np.float32)
        arr[1, 0, 0, 0] = -7
        assert summarize(Volume(arr, Modality.PET)).values[0] == -7

    def test_sign_flip_commutes(self):
        arr = np.random.default_rng(3).standard_normal((16, 12, 10)).astype(np.float32)
        a = summarize(Volume(arr, Modality.MRI)).values
        b = summarize(Volume(-arr, Modality.MRI)).values
        np.testing.assert_array_equal(a, -b)

    def test_small_dims_rejected(self):
        with pytest.raises(TokenizerError):
            summarize(Volume(np.zeros((7, 8, 8)), Modality.MRI))

    def test_gradient_reaches_selected_voxel(self):
        x = torch.zeros(1, 1, 8, 8, 8, requires_grad=True)
        with torch.no_grad():
            x[0, 0, 0, 0, 0] = 3.0
        tk.summarize_tensor(x)[0, 0].backward()
        assert x.grad[0, 0, 0, 0, 0] == 1.0
        assert x.grad.sum() == 1.0


class TestQuantize:
    def test_examples(self):
        np.testing.assert_array_equal(quantize([0.123, -0.7, 12.346]), [123, 200, 846])

    def test_zero_maps_to_one(self):
        assert quantize([0.0])[0] == 1
        assert quantize([-0.5])[0] == 1  # |-500| mod 500 == 0 -> 1

    def test_half_away_from_zero(self):
        assert quantize([0.0025])[0] == 3
        assert quantize([-0.0025])[0] == 3

    def test_band_edges(self):
        np.testing.assert_array_equal(quantize([0.001, 10.0, 10.001, 10.5]), [1, 10_000, 501, 500])

    def test_nan_rejected(self):
        with pytest.raises(TokenizerError):
            quantize([0.1, float("nan")])

    def test_summary_input(self):
        seq = SummarySequence(np.full(512, 0.25), Modality.PET)
        assert np.all(quantize(seq) == 250)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-1e5, 1e5, allow_nan=False))
    def test_range_and_fold_bands(self, v):
        q = int(quantize([v])[0])
        assert 1 <= q <= 10_000
        if v * 1000 <= -0.5:
            assert 1 <= q < 500
        if v * 1000 > 10_000.5:
            assert 500 <= q < 1000

    def test_monotone_on_band(self):
        v = np.sort(np.random.default_rng(0).uniform(0.001, 10, 5000))
        assert np.all(np.diff(quantize(v)) >= 0)

    def test_dequantize(self):
        assert dequantize([123])[0] == pytest.approx(0.123)
        v = np.random.default_rng(1).uniform(0.001, 10, 2000)
        assert np.max(np.abs(dequantize(quantize(v)) - v)) <= 5e-4 + 1e-12
        with pytest.raises(TokenizerError):
            dequantize([BEGIN])
        with pytest.raises(TokenizerError):
            dequantize([0])

    def test_torch_twin_agrees(self):
        v = np.random.default_rng(2).uniform(-200, 2000, 20_000).astype(np.float32)
        ids, ste = quantize_tensor(torch.from_numpy(v))
        np.testing.assert_array_equal(ids.numpy(), quantize(v))
        assert torch.all(ste == 0)

    def test_straight_through_gradient(self):
        v = torch.tensor([0.5, -0.3, 20.0], requires_grad=True)
        _, ste = quantize_tensor(v)
        ste.sum().backward()
        # identity-through-rounding on the band, blocked through either fold
        np.testing.assert_allclose(v.grad.numpy(), [1000.0, 0.0, 0.0])


class TestAssemble:
    def test_layout(self):
        seq = assemble(np.arange(1, 513), np.arange(513, 1025))
        assert len(seq.ids) == TOTAL_LEN == 1027
        assert seq.ids[0] == BEGIN and seq.ids[513] == SEP and seq.ids[1026] == END
        assert seq.ids[1] == 1 and seq.ids[514] == 513
        assert list(np.unique(seq.segments[1:513])) == [tk.Segment.MRI]
        assert list(np.unique(seq.segments[514:1026])) == [tk.Segment.PET]
        np.testing.assert_array_equal(seq.positions, np.arange(1027))

    def test_wrong_lengths(self):
        with pytest.raises(TokenizerError):
            assemble(np.ones(511), np.ones(512))

    def test_dump_round_trip(self):
        seq = assemble(np.arange(1, 513), np.full(512, 7))
        back = loads_tokens(dumps_tokens(seq))
        np.testing.assert_array_equal(back.ids, seq.ids)
        np.testing.assert_array_equal(back.segments, seq.segments)
        assert dumps_tokens(seq).count("\n") == 2


class TestMask:
    def seq(self):
        rng = np.random.default_rng(0)
        return assemble(rng.integers(1, 10_001, 512), rng.integers(1, 10_001, 512))

    def test_counts(self):
        seq = self.seq()
        for seed in range(50):
            masked, plan = plan_mask(seq, seed)
            pos = plan.masked_positions
            assert np.sum((pos >= 1) & (pos <= 512)) == 26
            assert np.sum((pos >= 514) & (pos <= 1025)) == 128
            assert len(np.unique(pos)) == len(pos) == 154
            assert np.all(np.diff(pos) > 0)
            assert np.all(masked.ids[pos] == MASK)
            assert masked.ids[0] == BEGIN and masked.ids[513] == SEP and masked.ids[1026] == END

    def test_deterministic(self):
        seq = self.seq()
        a, b = plan_mask(seq, 42)[1], plan_mask(seq, 42)[1]
        np.testing.assert_array_equal(a.masked_positions, b.masked_positions)
        np.testing.assert_array_equal(a.original_ids, b.original_ids)

    def test_unmask_restores(self):
        seq = self.seq()
        masked, plan = plan_mask(seq, 9)
        np.testing.assert_array_equal(unmask(masked, plan).ids, seq.ids)
