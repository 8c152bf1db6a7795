"""File formats: single-file NIfTI-1, FSL-style bvals/bvecs, 4x4 affine text.

Only the subset needed for DWI work is handled: ``n+1`` single files
(optionally gzipped), 3-D or 4-D, datatypes uint8/int16/int32/float32/float64.
Extensions are skipped.  Values are always returned as float32.

Affine policy on read: sform if ``sform_code > 0``, else qform if
``qform_code > 0``, else a diagonal built from ``pixdim``.  Files written
here carry the affine in the sform (code 1) and leave the qform unset.
"""

from __future__ import annotations

import gzip
import io
import struct
import warnings
from pathlib import Path

import numpy as np

from .core import GradientTable, Mask3D, Volume3D, Volume4D, B0_THRESHOLD
from .errors import FormatError, TruncatedFileError, UnsupportedError

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype (endianness applied at read time)
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}

# field name, struct code, offset
_FIELDS = [
    ("sizeof_hdr", "i", 0), ("dim_info", "B", 39), ("dim", "8h", 40),
    ("intent_p1", "f", 56), ("intent_p2", "f", 60), ("intent_p3", "f", 64),
    ("intent_code", "h", 68), ("datatype", "h", 70), ("bitpix", "h", 72),
    ("slice_start", "h", 74), ("pixdim", "8f", 76), ("vox_offset", "f", 108),
    ("scl_slope", "f", 112), ("scl_inter", "f", 116), ("slice_end", "h", 120),
    ("slice_code", "B", 122), ("xyzt_units", "B", 123), ("cal_max", "f", 124),
    ("cal_min", "f", 128), ("slice_duration", "f", 132), ("toffset", "f", 136),
    ("descrip", "80s", 148), ("aux_file", "24s", 228),
    ("qform_code", "h", 252), ("sform_code", "h", 254),
    ("quatern_b", "f", 256), ("quatern_c", "f", 260), ("quatern_d", "f", 264),
    ("qoffset_x", "f", 268), ("qoffset_y", "f", 272), ("qoffset_z", "f", 276),
    ("srow_x", "4f", 280), ("srow_y", "4f", 296), ("srow_z", "4f", 312),
    ("intent_name", "16s", 328), ("magic", "4s", 344),
]


def _open_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except EOFError as exc:
            raise TruncatedFileError(f"{path}: truncated gzip stream") from exc
    return raw


def parse_header(buf: bytes) -> tuple[dict, str]:
    """Decode the 348-byte NIfTI-1 header; returns (fields, byte order char)."""
    if len(buf) < HEADER_SIZE:
        raise TruncatedFileError(f"header is {len(buf)} bytes, need {HEADER_SIZE}")
    for order in "<>":
        if struct.unpack_from(order + "i", buf, 0)[0] == HEADER_SIZE:
            break
    else:
        raise FormatError("sizeof_hdr is not 348 in either byte order")
    hdr = {}
    for name, code, offset in _FIELDS:
        vals = struct.unpack_from(order + code, buf, offset)
        hdr[name] = vals if len(vals) > 1 else vals[0]
    return hdr, order


def _qform_affine(hdr: dict) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    pixdim = hdr["pixdim"]
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    affine = np.eye(4)
    affine[:3, :3] = rot * np.array([pixdim[1], pixdim[2], qfac * pixdim[3]])
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def header_affine(hdr: dict) -> np.ndarray:
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
        return affine
    if hdr["qform_code"] > 0:
        return _qform_affine(hdr)
    return np.diag([*(abs(p) or 1.0 for p in hdr["pixdim"][1:4]), 1.0])


def read_nifti(path) -> Volume3D | Volume4D:
    """Read a single-file NIfTI-1 image (``.nii`` or ``.nii.gz``).

    4-D files come back as a :class:`Volume4D` without a gradient table.
    """
    path = Path(path)
    buf = _open_bytes(path)
    hdr, order = parse_header(buf)
    if hdr["magic"] != b"n+1\x00":
        raise FormatError(f"{path}: magic {hdr['magic']!r} is not single-file NIfTI-1 'n+1'")
    ndim = hdr["dim"][0]
    if ndim not in (3, 4):
        raise UnsupportedError(f"{path}: dim[0]={ndim}, only 3-D and 4-D images are supported")
    shape = tuple(int(s) for s in hdr["dim"][1:ndim + 1])
    if min(shape) <= 0:
        raise FormatError(f"{path}: non-positive dims {shape}")
    if hdr["datatype"] not in DATATYPES:
        raise UnsupportedError(f"{path}: datatype code {hdr['datatype']} is not supported")
    dtype = DATATYPES[hdr["datatype"]].newbyteorder(order)
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        offset = VOX_OFFSET
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(buf) < offset + nbytes:
        raise TruncatedFileError(
            f"{path}: payload has {max(0, len(buf) - offset)} bytes, header declares {nbytes}")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        data = (raw.astype(np.float64) * slope + inter).astype(np.float32)
    else:
        data = raw.astype(np.float32)

    affine = header_affine(hdr)
    spacing = tuple(float(abs(p)) for p in hdr["pixdim"][1:4])
    if min(spacing) <= 0:
        spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
    if ndim == 3:
        return Volume3D(data, spacing, affine)
    return Volume4D(data, spacing, affine)


def nifti_header_bytes(shape, spacing, affine, description: str = "fovx") -> bytes:
    """Build a little-endian 348-byte header plus 4-byte empty extension flag."""
    buf = bytearray(VOX_OFFSET)
    dim = [len(shape), *shape] + [1] * (7 - len(shape))
    pixdim = [1.0, *spacing] + [1.0] * (7 - len(spacing))
    affine = np.asarray(affine, dtype=np.float64)
    values = {
        "sizeof_hdr": HEADER_SIZE, "dim": dim, "datatype": 16, "bitpix": 32,
        "pixdim": pixdim, "vox_offset": float(VOX_OFFSET), "scl_slope": 0.0,
        "scl_inter": 0.0, "xyzt_units": 2 | 8,
        "descrip": description.encode("ascii")[:79],
        "qform_code": 0, "sform_code": 1,
        "srow_x": affine[0].tolist(), "srow_y": affine[1].tolist(), "srow_z": affine[2].tolist(),
        "magic": b"n+1\x00",
    }
    for name, code, offset in _FIELDS:
        if name in values:
            val = values[name]
            args = val if isinstance(val, (list, tuple)) else [val]
            struct.pack_into("<" + code, buf, offset, *args)
    return bytes(buf)


def write_nifti(vol: Volume3D | Volume4D | Mask3D, path) -> None:
    """Write ``vol`` as a float32 single-file NIfTI-1 (gzipped if ``.gz``).

    Gzip output uses a zero mtime so identical inputs give identical bytes.
    """
    path = Path(path)
    if isinstance(vol, Mask3D):
        vol = vol.as_volume()
    data = np.asarray(vol.data, dtype="<f4")
    payload = nifti_header_bytes(data.shape, vol.spacing, vol.affine) + data.tobytes(order="F")
    if path.name.endswith(".gz"):
        out = io.BytesIO()
        with gzip.GzipFile(fileobj=out, mode="wb", mtime=0, filename="") as gz:
            gz.write(payload)
        payload = out.getvalue()
    path.write_bytes(payload)


def read_mask(path) -> Mask3D:
    vol = read_nifti(path)
    if not isinstance(vol, Volume3D):
        raise FormatError(f"{path}: masks must be 3-D")
    return Mask3D(vol.data > 0.5, vol.spacing, vol.affine)


def _parse_numbers(text: str, what: str) -> list[list[float]]:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = line.replace(",", " ").split()
        if not tokens:
            continue
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise FormatError(f"{what}, line {lineno}: {exc}") from None
    return rows


def read_gradient_table(bval_path, bvec_path, b0_threshold: float = B0_THRESHOLD) -> GradientTable:
    """Parse FSL-convention bvals (any whitespace) and bvecs (3 rows x V columns).

    A V x 3 bvecs file is accepted, with a warning, and transposed.
    """
    bvals = [x for row in _parse_numbers(Path(bval_path).read_text(), str(bval_path)) for x in row]
    rows = _parse_numbers(Path(bvec_path).read_text(), str(bvec_path))
    n = len(bvals)
    if n == 0:
        raise FormatError(f"{bval_path}: no b-values")
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{bvec_path}: rows have differing lengths")
    vecs = np.array(rows, dtype=np.float64)
    if vecs.shape == (3, n):
        vecs = vecs.T
    elif vecs.shape == (n, 3):
        warnings.warn(f"{bvec_path}: bvecs stored one vector per row; transposing", stacklevel=2)
    else:
        raise FormatError(
            f"{bvec_path}: bvecs shape {vecs.shape} does not match {n} b-values")
    return GradientTable(np.array(bvals), vecs, b0_threshold=b0_threshold)


def _fmt(x: float) -> str:
    return np.format_float_positional(float(x), trim="-")


def write_gradient_table(table: GradientTable, bval_path, bvec_path) -> None:
    Path(bval_path).write_text(" ".join(_fmt(b) for b in table.bvals) + "\n")
    Path(bvec_path).write_text(
        "".join(" ".join(_fmt(x) for x in table.bvecs[:, axis]) + "\n" for axis in range(3)))


def read_affine(path) -> np.ndarray:
    """Read a 4x4 world-mm matrix stored as four lines of four numbers."""
    rows = _parse_numbers(Path(path).read_text(), str(path))
    mat = np.array(rows, dtype=np.float64) if rows else np.empty((0, 0))
    if mat.shape != (4, 4):
        raise FormatError(f"{path}: expected 4x4 matrix, got shape {mat.shape}")
    return mat


def write_affine(mat, path) -> None:
    mat = np.asarray(mat, dtype=np.float64)
    Path(path).write_text("".join(" ".join(_fmt(x) for x in row) + "\n" for row in mat))
