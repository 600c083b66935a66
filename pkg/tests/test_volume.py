import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganbert.volume import (
    EPS,
    DataConfig,
    Modality,
    NormalizationStats,
    Volume,
    VolumeError,
    VolumeFormatError,
    compute_stats,
    load_volume,
    normalize_mri,
    normalize_pet,
    restore_pet,
    save_volume,
    synth_pair,
)


def mri(values):
    return Volume(np.asarray(values, dtype=np.float32).reshape(-1, 1, 1), Modality.MRI)


def pet(values):
    return Volume(np.asarray(values, dtype=np.float32).reshape(1, -1, 1, 1), Modality.PET)


class TestVolume:
    def test_modality_rank(self):
        with pytest.raises(VolumeError):
            Volume(np.zeros((2, 2, 2, 2)), Modality.MRI)
        with pytest.raises(VolumeError):
            Volume(np.zeros((2, 2, 2)), Modality.PET)

    def test_rejects_non_finite_and_empty(self):
        with pytest.raises(VolumeError):
            Volume(np.array([[[np.nan]]]), Modality.MRI)
        with pytest.raises(VolumeError):
            Volume(np.zeros((0, 2, 2)), Modality.MRI)

    def test_float32_storage(self):
        v = Volume(np.ones((2, 2, 2), dtype=np.float64), "MRI")
        assert v.data.dtype == np.float32
        assert v.modality is Modality.MRI
        assert v.dims == (2, 2, 2)


class TestStats:
    def test_constant_is_clamped(self):
        s = compute_stats(mri([5.0] * 8))
        assert s.mean == 5.0
        assert s.std == EPS

    def test_direct_formula(self):
        s = compute_stats(mri([0, 0, 0, 4]))
        assert s.mean == pytest.approx(1.0)
        assert s.std == pytest.approx(math.sqrt(3), rel=1e-7)

    def test_normal_draws(self):
        buf = np.random.default_rng(1234).standard_normal((64, 64, 64)).astype(np.float32)
        s = compute_stats(Volume(buf, Modality.MRI))
        # oracle: direct mean / population std over the same buffer
        assert s.mean == pytest.approx(float(buf.astype(np.float64).mean()), abs=1e-9)
        assert s.std == pytest.approx(float(buf.astype(np.float64).std()), rel=1e-9)
        assert abs(s.mean) < 0.02
        assert abs(s.std - 1) < 0.02

    def test_std_must_be_positive(self):
        with pytest.raises(VolumeError):
            NormalizationStats(0.0, 0.0)


class TestNormalization:
    def test_normalize_mri_example(self):
        out, stats = normalize_mri(mri([0, 4]))
        assert (stats.mean, stats.std) == (2.0, 2.0)
        np.testing.assert_array_equal(out.data.ravel(), [-1, 1])

    def test_constant_mri_goes_to_zero(self):
        out, _ = normalize_mri(mri([7.0] * 10))
        assert np.all(out.data == 0)

    def test_normalized_mri_is_standard(self):
        buf = np.random.default_rng(5).uniform(0, 255, (16, 16, 16))
        out, _ = normalize_mri(Volume(buf, Modality.MRI))
        s = compute_stats(out)
        assert abs(s.mean) < 1e-5
        assert abs(s.std - 1) < 1e-5

    def test_normalize_mri_rejects_pet(self):
        with pytest.raises(VolumeError):
            normalize_mri(pet([1, 2]))

    def test_pet_examples(self):
        stats = NormalizationStats(100.0, 20.0)
        assert normalize_pet(pet([50.0]), stats).data.item() == pytest.approx(20.0)
        assert normalize_pet(pet([10.0]), stats).data.item() == 0.0
        assert restore_pet(pet([20.0]), stats).data.item() == pytest.approx(50.0)
        assert restore_pet(pet([0.0]), stats).data.item() == pytest.approx(10.0)

    def test_normalize_pet_rejects_mri(self):
        with pytest.raises(VolumeError):
            normalize_pet(mri([1, 2]), NormalizationStats(1, 1))

    def test_round_trip_dense(self):
        values = np.random.default_rng(0).uniform(-100, 1000, 10_000)
        stats = NormalizationStats(37.2, 61.9)
        back = restore_pet(normalize_pet(pet(values), stats), stats).data.astype(np.float64).ravel()
        ref = values.astype(np.float32).astype(np.float64)
        rel = np.abs(back - ref) / np.maximum(np.abs(ref), 1.0)
        assert rel.max() <= 1e-4

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.floats(-1e6, 1e6, allow_nan=False, width=32), min_size=1, max_size=50),
        st.floats(0.1, 300.0),
        st.floats(0.5, 200.0),
    )
    def test_round_trip_property(self, values, mean, std):
        stats = NormalizationStats(mean, std)
        p = pet(values)
        back = restore_pet(normalize_pet(p, stats), stats).data.astype(np.float64)
        ref = p.data.astype(np.float64)
        # relative to the value, with the normalization offset as a floor
        scale = np.maximum(np.abs(ref), max(mean / 10.0, std / 10.0, 1.0))
        assert np.all(np.abs(back - ref) / scale <= 1e-4)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_pair(7), synth_pair(7)
        assert a.mri.data.tobytes() == b.mri.data.tobytes()
        assert a.pet.data.tobytes() == b.pet.data.tobytes()
        assert a.id == b.id

    def test_seeds_differ(self):
        assert synth_pair(1).pet.data.tobytes() != synth_pair(2).pet.data.tobytes()

    def test_dims(self):
        p = synth_pair(0, DataConfig(mri_dims=(64, 64, 64), pet_dims=(2, 24, 19, 19)))
        assert p.mri.dims == (64, 64, 64)
        assert p.pet.dims == (2, 24, 19, 19)
        assert p.mri_stats == compute_stats(p.mri)

    def test_mri_range(self):
        p = synth_pair(3)
        assert p.mri.data.min() >= 0 and p.mri.data.max() <= 255

    def test_intensity_regime(self):
        vals = np.concatenate([synth_pair(s).pet.data.ravel() for s in range(16)])
        assert vals.min() < -10
        assert vals.max() > 500
        assert np.mean(np.abs(vals) < 1) >= 0.5

    def test_invalid_dims(self):
        with pytest.raises(VolumeError):
            DataConfig(mri_dims=(4, 64, 64))
        with pytest.raises(VolumeError):
            DataConfig(pet_dims=(0, 24, 19, 19))


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        p = synth_pair(11)
        for vol in (p.mri, p.pet):
            path = tmp_path / f"{vol.modality.value}.vol"
            save_volume(path, vol)
            back = load_volume(path)
            assert back.modality is vol.modality
            assert back.dims == vol.dims
            assert back.data.tobytes() == vol.data.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=8, max_size=8))
    def test_round_trip_property(self, tmp_path_factory, values):
        vol = Volume(np.array(values, dtype=np.float32).reshape(2, 2, 2), Modality.MRI)
        path = tmp_path_factory.mktemp("v") / "x.vol"
        save_volume(path, vol)
        assert load_volume(path).data.tobytes() == vol.data.tobytes()

    def test_little_endian_layout(self, tmp_path):
        vol = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2), Modality.MRI)
        path = tmp_path / "a.vol"
        save_volume(path, vol)
        raw = path.read_bytes()
        assert raw[:4] == b"GBVL"
        assert np.frombuffer(raw[-32:], dtype="<f4").tolist() == list(range(8))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vol"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(VolumeFormatError) as err:
            load_volume(path)
        assert err.value.code == "bad_magic"

    def test_truncated(self, tmp_path):
        vol = Volume(np.ones((2, 2, 2)), Modality.MRI)
        path = tmp_path / "t.vol"
        save_volume(path, vol)
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(VolumeFormatError) as err:
            load_volume(path)
        assert err.value.code == "truncated_payload"

    def test_dim_payload_mismatch(self, tmp_path):
        vol = Volume(np.ones((2, 2, 2)), Modality.MRI)
        path = tmp_path / "m.vol"
        save_volume(path, vol)
        # header still declares 2x2x2, only 7 floats follow
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(VolumeFormatError) as err:
            load_volume(path)
        assert err.value.code == "dim_mismatch"
