import struct

import numpy as np
import pytest

from adaptsmooth.errors import DataError
from adaptsmooth.volume_io import (
    DatasetManifest,
    ManifestEntry,
    Volume,
    add_gaussian_noise,
    normalize_subject,
    read_manifest,
    read_nifti,
    read_volume,
    write_manifest,
    write_volume,
)


def test_volume_flat_order_is_x_fastest():
    v = Volume(np.arange(24, dtype=float).reshape(2, 3, 4))
    flat = v.flat_x_fastest()
    h, w, d = v.dims
    for hh in range(h):
        for ww in range(w):
            for dd in range(d):
                assert flat[ww + w * (hh + h * dd)] == v.data[hh, ww, dd]
    back = Volume.from_flat_x_fastest(flat, v.dims)
    np.testing.assert_array_equal(back.data, v.data)


class TestNormalizeSubject:
    def test_single_volume_affine_map(self):
        v = Volume(np.array([0.0, 5.0, 10.0]).reshape(1, 1, 3))
        out = normalize_subject([v])[0]
        np.testing.assert_allclose(out.data.ravel(), [0.0, 0.5, 1.0])

    def test_shared_extrema_across_volumes(self):
        a = Volume(np.full((2, 2, 2), 2.0))
        b = Volume(np.linspace(0.0, 4.0, 8).reshape(2, 2, 2))
        out_a, out_b = normalize_subject([a, b])
        np.testing.assert_allclose(out_a.data, 0.5)
        assert out_b.data.min() == 0.0 and out_b.data.max() == 1.0

    def test_formula_value(self):
        # min=-1.3, max=2.7: value 0.7 maps to 0.5
        v = Volume(np.array([-1.3, 0.7, 2.7, 1.0]).reshape(1, 2, 2))
        out = normalize_subject([v])[0]
        assert out.data[0, 0, 1] == pytest.approx(0.5, abs=1e-12)

    def test_idempotent_within_tolerance(self):
        rng = np.random.default_rng(5)
        vols = [Volume(rng.uniform(-3, 7, (4, 4, 4))) for _ in range(3)]
        once = normalize_subject(vols)
        twice = normalize_subject(once)
        for u, w in zip(once, twice):
            np.testing.assert_allclose(u.data, w.data, atol=1e-6)

    def test_errors(self):
        with pytest.raises(DataError):
            normalize_subject([])
        with pytest.raises(DataError):
            normalize_subject([Volume(np.zeros((2, 2, 2))), Volume(np.zeros((2, 2, 3)))])
        with pytest.raises(DataError):
            normalize_subject([Volume(np.full((2, 2, 2), 3.0))])


class TestAddGaussianNoise:
    def test_sigma_zero_identity(self):
        v = Volume(np.random.default_rng(0).uniform(size=(4, 4, 4)))
        out = add_gaussian_noise(v, 0.0, seed=1)
        np.testing.assert_array_equal(out.data, v.data)

    def test_sample_std_concentration(self):
        # chi-distribution bound: sample std in 0.2 +/- 3*0.2/sqrt(2*32^3)
        v = Volume(np.zeros((32, 32, 32)))
        out = add_gaussian_noise(v, 0.2, seed=11)
        tol = 3 * 0.2 / np.sqrt(2 * 32**3)
        assert abs(out.data.std() - 0.2) < tol

    def test_deterministic_per_seed(self):
        v = Volume(np.zeros((8, 8, 8)))
        a = add_gaussian_noise(v, 0.3, seed=7)
        b = add_gaussian_noise(v, 0.3, seed=7)
        np.testing.assert_array_equal(a.data, b.data)
        c = add_gaussian_noise(v, 0.3, seed=8)
        assert not np.array_equal(a.data, c.data)

    def test_increment_mean_near_zero(self):
        # empirical mean over >= 1e5 voxels within 4 standard errors of 0
        n = 50**3
        v = Volume(np.zeros((50, 50, 50)))
        out = add_gaussian_noise(v, 0.25, seed=3)
        se = 0.25 / np.sqrt(n)
        assert abs(out.data.mean()) < 4 * se

    def test_negative_sigma_rejected(self):
        with pytest.raises(DataError):
            add_gaussian_noise(Volume(np.zeros((2, 2, 2))), -0.1, 0)


class TestVol1:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        data = rng.uniform(size=(2, 3, 4)).astype(np.float32).astype(np.float64)
        v = Volume(data, voxel_size_mm=2.5)
        p = tmp_path / "v.vol"
        write_volume(v, p)
        back = read_volume(p)
        np.testing.assert_array_equal(back.data, v.data)
        assert back.voxel_size_mm == pytest.approx(2.5)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "bad.vol"
        payload = struct.pack("<f", 0.0) * 7  # dims say 8 voxels
        p.write_bytes(b"VOL1" + struct.pack("<IIIf", 2, 2, 2, 3.0) + payload)
        with pytest.raises(DataError, match="truncated"):
            read_volume(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.vol"
        p.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            read_volume(p)


def _make_nifti(path, data, datatype, slope=1.0, inter=0.0, nt=None):
    """Minimal single-file NIfTI-1 writer for tests. data is (nx, ny, nz[, nt])
    in x-fastest storage order."""
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    ndim = 3 if nt is None else 4
    dims = [ndim, data.shape[0], data.shape[1], data.shape[2],
            nt if nt is not None else 1, 1, 1, 1]
    struct.pack_into("<8h", header, 40, *dims)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<8f", header, 76, 0.0, 3.0, 3.0, 3.0, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<f", header, 112, slope)
    struct.pack_into("<f", header, 116, inter)
    header[344:348] = b"n+1\x00"
    dtype = {4: "<i2", 16: "<f4"}[datatype]
    with open(path, "wb") as f:
        f.write(header)
        f.write(b"\x00" * 4)  # pad to vox_offset 352
        f.write(np.asfortranarray(data).astype(dtype).tobytes(order="F"))


class TestNifti:
    def test_int16_with_scaling(self, tmp_path):
        p = tmp_path / "a.nii"
        data = np.zeros((3, 3, 3), dtype=np.int16)
        data[0, 0, 0] = 4
        _make_nifti(p, data, datatype=4, slope=0.5, inter=1.0)
        v = read_volume(p)
        # raw 4 -> 0.5*4 + 1.0 = 3.0; raw 0 -> 1.0
        assert v.data[0, 0, 0] == pytest.approx(3.0)
        assert v.data[1, 1, 1] == pytest.approx(1.0)
        assert v.voxel_size_mm == pytest.approx(3.0)

    def test_float32_values(self, tmp_path):
        p = tmp_path / "b.nii"
        rng = np.random.default_rng(4)
        data = rng.uniform(size=(4, 3, 2)).astype(np.float32)
        _make_nifti(p, data, datatype=16)
        v = read_volume(p)
        assert v.dims == (3, 4, 2)  # (H=ny, W=nx, D=nz)
        # x is the NIfTI fastest axis and maps to width
        assert v.data[1, 2, 0] == pytest.approx(float(data[2, 1, 0]))

    def test_unsupported_datatype(self, tmp_path):
        p = tmp_path / "c.nii"
        data = np.zeros((3, 3, 3), dtype=np.int16)
        _make_nifti(p, data, datatype=4)
        blob = bytearray(p.read_bytes())
        struct.pack_into("<h", blob, 70, 8)  # int32: not supported
        p.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="datatype"):
            read_volume(p)

    def test_4d_exposed_as_sequence(self, tmp_path):
        p = tmp_path / "d.nii"
        data = np.stack([np.full((3, 3, 3), i, dtype=np.float32) for i in range(4)], axis=-1)
        _make_nifti(p, data, datatype=16, nt=4)
        vols = read_nifti(p)
        assert len(vols) == 4
        assert vols[2].data[0, 0, 0] == pytest.approx(2.0)
        with pytest.raises(DataError, match="4D"):
            read_volume(p)


class TestManifest:
    def _manifest(self):
        m = DatasetManifest()
        m.split = {"s1": "train", "s2": "test"}
        m.entries = [
            ManifestEntry("a.vol", 0, "s1", 0.0),
            ManifestEntry("b.vol", 1, "s1", 0.1),
            ManifestEntry("c.vol", 1, "s2", 0.1),
        ]
        return m

    def test_round_trip(self, tmp_path):
        p = tmp_path / "m.csv"
        write_manifest(self._manifest(), p)
        back = read_manifest(p)
        assert back.split == {"s1": "train", "s2": "test"}
        assert [(e.path, e.label, e.subject_id, e.noise_level) for e in back.entries] == \
            [("a.vol", 0, "s1", 0.0), ("b.vol", 1, "s1", 0.1), ("c.vol", 1, "s2", 0.1)]

    def test_subject_spanning_splits_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("path,label,subject_id,noise_level,split\n"
                     "a.vol,0,s1,0.0,train\n"
                     "b.vol,1,s1,0.0,test\n")
        with pytest.raises(DataError, match="both"):
            read_manifest(p)

    def test_bad_label_rejected(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("path,label,subject_id,noise_level,split\n"
                     "a.vol,2,s1,0.0,train\n")
        with pytest.raises(DataError, match="label"):
            read_manifest(p)
