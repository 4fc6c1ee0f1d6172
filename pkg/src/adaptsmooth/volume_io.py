"""Volume data type, file formats, dataset manifests, normalization and noise.

Voxel ordering convention: the in-memory array is indexed ``data[h, w, d]``
(height, width, depth).  On disk and in any flattened view the order is
x-fastest: x (width) varies fastest, then y (height), then z (depth), so the
flat index of voxel (h, w, d) is ``w + W * (h + H * d)``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

VOL1_MAGIC = b"VOL1"

_NIFTI_HEADER_SIZE = 348
_NIFTI_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}


@dataclass
class Volume:
    """Dense 3D scalar field of voxel intensities."""

    data: np.ndarray  # shape (H, W, D), float64
    voxel_size_mm: float = 3.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise DataError(f"volume dims must be positive, got {self.data.shape}")
        if self.voxel_size_mm <= 0:
            raise DataError(f"voxel size must be positive, got {self.voxel_size_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def flat_x_fastest(self) -> np.ndarray:
        """Flattened copy in x-fastest (w, then h, then d) order."""
        return np.transpose(self.data, (2, 0, 1)).ravel()

    @staticmethod
    def from_flat_x_fastest(flat, dims, voxel_size_mm=3.0) -> "Volume":
        h, w, d = dims
        arr = np.asarray(flat, dtype=np.float64).reshape(d, h, w)
        return Volume(np.transpose(arr, (1, 2, 0)), voxel_size_mm)


@dataclass
class ManifestEntry:
    path: str
    label: int
    subject_id: str
    noise_level: float


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: dict[str, str] = field(default_factory=dict)  # subject_id -> split name

    def validate(self):
        for e in self.entries:
            if e.label not in (0, 1):
                raise DataError(f"label must be 0 or 1, got {e.label} for {e.path}")
            if e.noise_level < 0:
                raise DataError(f"negative noise level for {e.path}")
            if e.subject_id not in self.split:
                raise DataError(f"subject {e.subject_id} has no split assignment")
        for sid, sp in self.split.items():
            if sp not in ("train", "validation", "test"):
                raise DataError(f"unknown split {sp!r} for subject {sid}")

    def subjects(self, split_name: str) -> list[str]:
        return sorted(s for s, sp in self.split.items() if sp == split_name)


def normalize_subject(volumes: list[Volume]) -> list[Volume]:
    """Rescale a subject's volumes to [0, 1] using the shared extrema.

    The minimum and maximum are taken over all voxels of all volumes in the
    list, so relative intensities across the subject's scans are preserved.
    """
    if not volumes:
        raise DataError("normalize_subject: empty volume list")
    dims = volumes[0].dims
    for v in volumes[1:]:
        if v.dims != dims:
            raise DataError(f"dim mismatch: {v.dims} vs {dims}")
    lo = min(float(v.data.min()) for v in volumes)
    hi = max(float(v.data.max()) for v in volumes)
    if hi <= lo:
        raise DataError("normalize_subject: constant data (max == min)")
    scale = 1.0 / (hi - lo)
    return [Volume((v.data - lo) * scale, v.voxel_size_mm) for v in volumes]


def add_gaussian_noise(v: Volume, sigma: float, seed: int) -> Volume:
    """Add iid zero-mean Gaussian noise to every voxel. Deterministic per seed.

    The result is intentionally not re-clipped to [0, 1]: clipping would bias
    downstream noise estimation.
    """
    if sigma < 0:
        raise DataError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Volume(v.data.copy(), v.voxel_size_mm)
    rng = np.random.default_rng(seed)
    return Volume(v.data + rng.normal(0.0, sigma, size=v.dims), v.voxel_size_mm)


def write_volume(v: Volume, path):
    """Write a volume in the native VOL1 format (float32 payload)."""
    h, w, d = v.dims
    with open(path, "wb") as f:
        f.write(VOL1_MAGIC)
        f.write(struct.pack("<IIIf", h, w, d, v.voxel_size_mm))
        f.write(v.flat_x_fastest().astype("<f4").tobytes())


def _read_vol1(path) -> Volume:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20:
        raise DataError(f"{path}: truncated VOL1 header")
    if blob[:4] != VOL1_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    h, w, d, voxel = struct.unpack_from("<IIIf", blob, 4)
    if h < 1 or w < 1 or d < 1:
        raise DataError(f"{path}: non-positive dims ({h}, {w}, {d})")
    n = h * w * d
    payload = blob[20:]
    if len(payload) != 4 * n:
        raise DataError(
            f"{path}: truncated payload, expected {n} voxels, got {len(payload) // 4}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    return Volume.from_flat_x_fastest(flat, (h, w, d), voxel)


def _parse_nifti_header(blob, path):
    if len(blob) < _NIFTI_HEADER_SIZE:
        raise DataError(f"{path}: truncated NIfTI header")
    sizeof_hdr = struct.unpack_from("<i", blob, 0)[0]
    swap = ""
    if sizeof_hdr != 348:
        sizeof_hdr = struct.unpack_from(">i", blob, 0)[0]
        if sizeof_hdr != 348:
            raise DataError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
        swap = ">"
    end = swap or "<"
    dim = struct.unpack_from(end + "8h", blob, 40)
    datatype = struct.unpack_from(end + "h", blob, 70)[0]
    pixdim = struct.unpack_from(end + "8f", blob, 76)
    vox_offset = struct.unpack_from(end + "f", blob, 108)[0]
    scl_slope = struct.unpack_from(end + "f", blob, 112)[0]
    scl_inter = struct.unpack_from(end + "f", blob, 116)[0]
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataError(f"{path}: bad NIfTI magic {magic!r}")
    return dim, datatype, pixdim, vox_offset, scl_slope, scl_inter, end


def read_nifti(path) -> list[Volume]:
    """Read a single-file .nii, returning one Volume per time point.

    Only int16 and float32 payloads are accepted; scl_slope/scl_inter are
    applied when the slope is nonzero.
    """
    with open(path, "rb") as f:
        blob = f.read()
    dim, datatype, pixdim, vox_offset, slope, inter, end = _parse_nifti_header(blob, path)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise DataError(f"{path}: only 3D or 4D NIfTI supported, got dim[0]={ndim}")
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"{path}: unsupported NIfTI datatype {datatype}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    nt = dim[4] if ndim == 4 else 1
    if min(nx, ny, nz) < 1 or nt < 1:
        raise DataError(f"{path}: non-positive dims {dim[1:5]}")
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(end)
    n = nx * ny * nz * nt
    offset = int(vox_offset) if vox_offset >= _NIFTI_HEADER_SIZE else _NIFTI_HEADER_SIZE
    payload = blob[offset:]
    if len(payload) < n * dtype.itemsize:
        raise DataError(f"{path}: truncated NIfTI payload")
    raw = np.frombuffer(payload[: n * dtype.itemsize], dtype=dtype).astype(np.float64)
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        raw = raw * slope + inter
    voxel = float(pixdim[1]) if pixdim[1] > 0 else 3.0
    # NIfTI stores x fastest, then y, then z, then t.
    vols = []
    per = nx * ny * nz
    for t in range(nt):
        vols.append(Volume.from_flat_x_fastest(raw[t * per : (t + 1) * per], (ny, nx, nz), voxel))
    return vols


def read_volume(path) -> Volume:
    """Read a single 3D volume from VOL1 or single-timepoint NIfTI-1."""
    p = str(path)
    if p.endswith(".nii"):
        vols = read_nifti(path)
        if len(vols) != 1:
            raise DataError(
                f"{path}: 4D NIfTI with {len(vols)} time points; use read_nifti() for the sequence"
            )
        return vols[0]
    return _read_vol1(path)


def write_manifest(manifest: DatasetManifest, path):
    manifest.validate()
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["path", "label", "subject_id", "noise_level", "split"])
        for e in manifest.entries:
            wr.writerow([e.path, e.label, e.subject_id, repr(e.noise_level), manifest.split[e.subject_id]])


def read_manifest(path) -> DatasetManifest:
    """Load a manifest CSV, rejecting subjects that span multiple splits."""
    manifest = DatasetManifest()
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd, None)
        if header != ["path", "label", "subject_id", "noise_level", "split"]:
            raise DataError(f"{path}: bad manifest header {header}")
        for lineno, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            vpath, label_s, sid, noise_s, split = row
            try:
                label = int(label_s)
                noise = float(noise_s)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if sid in manifest.split and manifest.split[sid] != split:
                raise DataError(
                    f"{path}:{lineno}: subject {sid} assigned to both "
                    f"{manifest.split[sid]!r} and {split!r}"
                )
            manifest.split[sid] = split
            manifest.entries.append(ManifestEntry(vpath, label, sid, noise))
    manifest.validate()
    return manifest
