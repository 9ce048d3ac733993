"""Volume I/O, normalization, downsampling, masks, and noise."""

import struct

import numpy as np
import pytest

from volsynth import volumes as vol
from volsynth.volumes import Mask, Volume


class TestVVOLRoundTrip:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        v = Volume(rng.uniform(size=(2, 2, 2)).astype(np.float32))
        path = tmp_path / "v.vvol"
        vol.write_volume(v, path)
        back = vol.read_volume(path)
        assert back.dims == (2, 2, 2)
        assert np.array_equal(back.data, v.data)

    def test_constant_half_round_trip(self, tmp_path):
        v = Volume(np.full((2, 2, 2), 0.5, dtype=np.float32))
        path = tmp_path / "v.vvol"
        vol.write_volume(v, path)
        assert vol.read_volume(path) == v

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vvol"
        path.write_bytes(b"XXXX" + bytes([1]) + struct.pack("<III", 1, 1, 1) + b"\x00" * 4)
        with pytest.raises(vol.BadMagicError):
            vol.read_volume(path)

    def test_length_mismatch(self, tmp_path):
        path = tmp_path / "short.vvol"
        payload = np.zeros(63, dtype="<f4").tobytes()
        path.write_bytes(b"VVOL" + bytes([1]) + struct.pack("<III", 4, 4, 4) + payload)
        with pytest.raises(vol.LengthMismatchError):
            vol.read_volume(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.vvol"
        payload = np.zeros(64, dtype="<f4").tobytes()[:-2]   # cut mid-float
        path.write_bytes(b"VVOL" + bytes([1]) + struct.pack("<III", 4, 4, 4) + payload)
        with pytest.raises(vol.TruncatedPayloadError):
            vol.read_volume(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "header.vvol"
        path.write_bytes(b"VVOL" + bytes([1]) + b"\x01\x00")
        with pytest.raises(vol.TruncatedPayloadError):
            vol.read_volume(path)

    def test_error_classes_are_distinct(self):
        assert issubclass(vol.BadMagicError, vol.VolumeFormatError)
        assert not issubclass(vol.BadMagicError, vol.TruncatedPayloadError)
        assert not issubclass(vol.LengthMismatchError, vol.TruncatedPayloadError)


class TestNormalize:
    def test_affine_map(self):
        v = Volume(np.array([[[2.0, 3.0], [4.0, 2.0]], [[2.0, 2.0], [2.0, 2.0]]]))
        out = vol.normalize_minmax(v)
        assert out.data.min() == 0.0 and out.data.max() == 1.0
        assert out.data[0, 0, 1] == pytest.approx(0.5)

    def test_constant_volume_maps_to_zeros(self):
        out = vol.normalize_minmax(Volume(np.full((3, 3, 3), 7.0)))
        assert np.array_equal(out.data, np.zeros((3, 3, 3)))

    def test_idempotent_when_endpoints_attained(self, rng):
        data = rng.uniform(size=(4, 4, 4)).astype(np.float32)
        data.flat[0], data.flat[1] = 0.0, 1.0
        v = Volume(data)
        out = vol.normalize_minmax(v)
        assert np.abs(out.data - v.data).max() <= 1e-7

    def test_range_exact_for_nonconstant(self, rng):
        for seed in range(5):
            v = Volume(np.random.default_rng(seed).normal(size=(3, 4, 5)))
            out = vol.normalize_minmax(v)
            assert out.data.min() == 0.0
            assert out.data.max() == 1.0


class TestDownsample:
    def test_identity_when_target_equals_source(self, rng):
        v = Volume(rng.uniform(size=(5, 6, 7)))
        out = vol.downsample(v, (5, 6, 7))
        assert np.array_equal(out.data, v.data)

    def test_octant_block_average(self):
        data = np.zeros((4, 4, 4))
        values = np.arange(8.0).reshape(2, 2, 2)
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    data[2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2] = values[i, j, k]
        out = vol.downsample(Volume(data), (2, 2, 2))
        assert np.abs(out.data - values).max() <= 1e-12

    def test_matches_direct_weighted_average_oracle(self, rng):
        src = rng.uniform(size=(9, 10, 11))
        target = (5, 5, 5)
        out = vol.downsample(Volume(src), target)

        def overlaps(n_in, n_out, i):
            ratio = n_in / n_out
            lo, hi = i * ratio, (i + 1) * ratio
            cells = []
            for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
                w = min(hi, j + 1) - max(lo, j)
                if w > 0:
                    cells.append((j, w / ratio))
            return cells

        ref = np.zeros(target)
        for i in range(target[0]):
            for j in range(target[1]):
                for k in range(target[2]):
                    acc = 0.0
                    for a, wa in overlaps(9, 5, i):
                        for b, wb in overlaps(10, 5, j):
                            for c, wc in overlaps(11, 5, k):
                                acc += wa * wb * wc * src[a, b, c]
                    ref[i, j, k] = acc
        assert np.abs(out.data - ref).max() <= 1e-10

    def test_mean_preserved_for_integer_block_ratio(self, rng):
        src = rng.uniform(size=(8, 8, 8))
        out = vol.downsample(Volume(src), (4, 4, 4))
        assert abs(out.data.mean() - src.mean()) <= 1e-10

    def test_output_within_input_envelope(self, rng):
        src = rng.uniform(size=(7, 6, 5))
        out = vol.downsample(Volume(src), (3, 3, 3))
        assert out.data.min() >= src.min() - 1e-12
        assert out.data.max() <= src.max() + 1e-12

    def test_upsample_rejected(self, rng):
        with pytest.raises(vol.UnsupportedUpsampleError):
            vol.downsample(Volume(rng.uniform(size=(4, 4, 4))), (5, 4, 4))

    def test_nearest_neighbor_flag(self, rng):
        src = rng.uniform(size=(4, 4, 4))
        out = vol.downsample(Volume(src), (2, 2, 2), method="nearest")
        assert np.array_equal(out.data, src[::2, ::2, ::2])


class TestMasks:
    def test_background_border_excludes_zero_shell(self, rng):
        data = np.zeros((5, 5, 5), dtype=np.float32)
        data[1:-1, 1:-1, 1:-1] = rng.uniform(0.1, 1.0, size=(3, 3, 3))
        mask = vol.compute_mask([Volume(data)], strategy="background_border")
        expected = np.zeros((5, 5, 5), dtype=bool)
        expected[1:-1, 1:-1, 1:-1] = True
        assert np.array_equal(mask.bits, expected)

    def test_border_fill_does_not_cross_positive_wall(self, rng):
        # zero pocket enclosed by positive voxels stays valid (unreachable)
        data = np.full((5, 5, 5), 0.5, dtype=np.float32)
        data[2, 2, 2] = 0.0
        mask = vol.compute_mask([Volume(data)], strategy="background_border")
        assert mask.bits[2, 2, 2]
        assert mask.valid_count == 125

    def test_constant_voxel_invalid_under_nonconstant(self, rng):
        vols = [Volume(rng.uniform(size=(3, 3, 3))) for _ in range(4)]
        for v in vols:
            v.data[1, 1, 1] = 0.25
        mask = vol.compute_mask(vols, strategy="nonconstant")
        assert not mask.bits[1, 1, 1]
        assert mask.valid_count == 26

    def test_valid_count_matches_variance_scan(self, rng):
        from volsynth.datasets import make_blob_dataset
        ds = make_blob_dataset(3, 6, (8, 8, 8), seed=5)
        mask = vol.compute_mask(ds.volumes, strategy="nonconstant")
        stack = np.stack([v.data.astype(np.float64) for v in ds.volumes])
        expected = int((stack.var(axis=0) > 0).sum())
        assert mask.valid_count == expected

    def test_empty_training_set_rejected(self):
        with pytest.raises(ValueError):
            vol.compute_mask([])


class TestApplyScatter:
    def test_full_mask_flattens(self, rng):
        v = Volume(rng.uniform(size=(3, 3, 3)))
        mask = Mask(np.ones((3, 3, 3), dtype=bool))
        assert np.array_equal(vol.apply_mask(v, mask), v.data.reshape(-1))

    def test_empty_mask_gives_empty_vector(self, rng):
        v = Volume(rng.uniform(size=(2, 2, 2)))
        mask = Mask(np.zeros((2, 2, 2), dtype=bool))
        assert vol.apply_mask(v, mask).size == 0

    def test_scatter_restores_valid_voxels(self, rng):
        v = Volume(rng.uniform(size=(4, 4, 4)).astype(np.float32))
        bits = rng.uniform(size=(4, 4, 4)) > 0.4
        mask = Mask(bits)
        feats = vol.apply_mask(v, mask)
        back = vol.scatter_mask(feats, mask)
        assert np.allclose(back.data[bits], v.data[bits])
        assert np.array_equal(back.data[~bits], np.zeros((~bits).sum()))

    def test_dims_mismatch(self, rng):
        with pytest.raises(ValueError):
            vol.apply_mask(Volume(np.zeros((2, 2, 2))), Mask(np.ones((3, 3, 3), dtype=bool)))


class TestNoise:
    def test_zero_variance_is_identity(self, rng):
        v = Volume(rng.uniform(size=(3, 3, 3)))
        out = vol.add_gaussian_noise(v, 0.0, seed=1)
        assert np.array_equal(out.data, v.data)

    def test_clamped_to_unit_interval(self):
        v = Volume(np.full((8, 8, 8), 0.999, dtype=np.float32))
        out = vol.add_gaussian_noise(v, 0.25, seed=3)
        assert out.data.max() <= 1.0
        assert out.data.min() >= 0.0
        assert (out.data == 1.0).any()   # a large positive draw hit the clamp

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            vol.add_gaussian_noise(Volume(np.zeros((2, 2, 2))), -0.1, seed=0)

    def test_preclamp_variance_statistics(self):
        v = Volume(np.full((100, 100, 100), 0.5, dtype=np.float32))
        out = vol.add_gaussian_noise(v, 0.01, seed=7)
        # values stay far from the clamp, so the sample variance is unbiased
        sample_var = out.data.astype(np.float64).var()
        assert abs(sample_var - 0.01) <= 0.05 * 0.01

    def test_deterministic_under_seed(self, rng):
        v = Volume(rng.uniform(size=(4, 4, 4)))
        a = vol.add_gaussian_noise(v, 0.01, seed=9)
        b = vol.add_gaussian_noise(v, 0.01, seed=9)
        assert np.array_equal(a.data, b.data)
