"""Latent-code to orientation codebook with exact cosine kNN lookup.

The codebook is an immutable table of (code, rotation, silhouette bbox
diagonal, bbox center) rows. Search is exact brute force: blocked dot
products against precomputed norms, accumulated in float64 over float32
storage, with deterministic index tie-breaking.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CodebookFormatError, DegenerateCodeError
from .geometry import _freeze

MAGIC = b"AAEC"
VERSION = 1

# Entry rows processed per query block; bounds the f64 staging buffer.
_QUERY_BLOCK = 8192

_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class CodebookEntry:
    """One codebook row: latent code plus the view's orientation and bbox."""

    code: np.ndarray
    rotation: np.ndarray  # camera-to-object rotation of the rendered view
    bbox_diag: float
    bbox_center: tuple[float, float]


class Codebook:
    """Immutable latent-code table; safe to share across threads."""

    def __init__(self, codes, rotations, bbox_diags, bbox_centers):
        codes = np.ascontiguousarray(codes, dtype=np.float32)
        if codes.ndim != 2 or codes.shape[0] < 1:
            raise ValueError("codes must be a non-empty (n, dim) array")
        n = codes.shape[0]
        rotations = np.ascontiguousarray(rotations, dtype=np.float32).reshape(n, 3, 3)
        bbox_diags = np.ascontiguousarray(bbox_diags, dtype=np.float32).reshape(n)
        bbox_centers = np.ascontiguousarray(bbox_centers, dtype=np.float32).reshape(n, 2)
        if not np.all(np.isfinite(codes)):
            raise ValueError("codes must be finite")
        if np.any(bbox_diags <= 0.0):
            raise ValueError("bbox diagonals must be positive")
        norms = np.empty(n, dtype=np.float64)
        for start in range(0, n, _QUERY_BLOCK):
            block = codes[start : start + _QUERY_BLOCK].astype(np.float64)
            norms[start : start + _QUERY_BLOCK] = np.sqrt(np.einsum("ij,ij->i", block, block))
        if np.any(norms == 0.0):
            raise DegenerateCodeError("codebook contains an all-zero code")
        for name, arr in (
            ("codes", codes),
            ("rotations", rotations),
            ("bbox_diags", bbox_diags),
            ("bbox_centers", bbox_centers),
            ("norms", norms),
        ):
            arr.setflags(write=False)
            setattr(self, name, arr)

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def __len__(self) -> int:
        return self.codes.shape[0]

    def entry(self, index: int) -> CodebookEntry:
        return CodebookEntry(
            code=self.codes[index],
            rotation=self.rotations[index],
            bbox_diag=float(self.bbox_diags[index]),
            bbox_center=(float(self.bbox_centers[index, 0]), float(self.bbox_centers[index, 1])),
        )

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.codes.shape == other.codes.shape
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.rotations, other.rotations)
            and np.array_equal(self.bbox_diags, other.bbox_diags)
            and np.array_equal(self.bbox_centers, other.bbox_centers)
        )


def build_codebook(encode, views) -> Codebook:
    """Encode an iterable of (image, rotation, bbox) views into a codebook.

    ``bbox`` is the (x, y, w, h) silhouette box of the rendered view; its
    diagonal and center are stored for the projective distance estimate.
    Views are consumed lazily so callers can stream large view sets.
    """
    codes = []
    rotations = []
    diags = []
    centers = []
    shape = None
    dim = None
    for index, (image, rotation, bbox) in enumerate(views):
        pixels = np.asarray(getattr(image, "data", image))
        if shape is None:
            shape = pixels.shape
        elif pixels.shape != shape:
            raise ValueError(f"view {index}: image shape {pixels.shape} != {shape}")
        if bbox is None:
            raise ValueError(f"view {index}: empty silhouette, cannot form a codebook entry")
        code = np.asarray(encode(pixels), dtype=np.float32).reshape(-1)
        if dim is None:
            dim = code.shape[0]
        elif code.shape[0] != dim:
            raise ValueError(f"view {index}: encoder returned dim {code.shape[0]}, expected {dim}")
        x, y, w, h = bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"view {index}: degenerate bbox {bbox}")
        codes.append(code)
        rotations.append(np.asarray(rotation, dtype=np.float32))
        diags.append(float(np.hypot(w, h)))
        centers.append((x + w / 2.0, y + h / 2.0))
    if not codes:
        raise ValueError("cannot build a codebook from zero views")
    return Codebook(np.stack(codes), np.stack(rotations), np.array(diags), np.array(centers))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two latent codes, in [-1, 1]."""
    va = np.asarray(a, dtype=np.float64).reshape(-1)
    vb = np.asarray(b, dtype=np.float64).reshape(-1)
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape[0]} vs {vb.shape[0]}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateCodeError("cosine similarity of a zero vector is undefined")
    return float(va @ vb / (na * nb))


def similarities(codebook: Codebook, query) -> np.ndarray:
    """Cosine similarity of ``query`` against every entry (float64)."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != codebook.dim:
        raise ValueError(f"query dim {q.shape[0]} != codebook dim {codebook.dim}")
    qnorm = np.linalg.norm(q)
    if qnorm == 0.0:
        raise DegenerateCodeError("cannot query with a zero code")
    n = len(codebook)
    sims = np.empty(n, dtype=np.float64)
    for start in range(0, n, _QUERY_BLOCK):
        block = codebook.codes[start : start + _QUERY_BLOCK].astype(np.float64)
        sims[start : start + _QUERY_BLOCK] = block @ q
    sims /= codebook.norms * qnorm
    return sims


def knn_query(codebook: Codebook, query, k: int) -> list[tuple[int, float]]:
    """Exact top-k entries by cosine similarity, ties broken by lower index."""
    n = len(codebook)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    sims = similarities(codebook, query)
    if k == n:
        candidates = np.arange(n)
    else:
        kth = np.partition(sims, n - k)[n - k]
        candidates = np.flatnonzero(sims >= kth)
    order = candidates[np.lexsort((candidates, -sims[candidates]))][:k]
    return [(int(i), float(sims[i])) for i in order]


# ---------------------------------------------------------------------------
# Serialization
#
# Layout (all little-endian, no padding):
#   magic "AAEC" | u32 version=1 | u32 count | u32 dim
#   then per entry: dim x f32 code, 9 x f32 rotation (row-major),
#   f32 bbox_diag, 2 x f32 bbox_center.


def save_codebook(codebook: Codebook, path) -> None:
    n, dim = len(codebook), codebook.dim
    rows = np.empty((n, dim + 12), dtype="<f4")
    rows[:, :dim] = codebook.codes
    rows[:, dim : dim + 9] = codebook.rotations.reshape(n, 9)
    rows[:, dim + 9] = codebook.bbox_diags
    rows[:, dim + 10 :] = codebook.bbox_centers
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, dim))
        fh.write(rows.tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CodebookFormatError("file too short for header", offset=len(blob))
    magic, version, count, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CodebookFormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise CodebookFormatError(f"unsupported version {version}", offset=4)
    if count < 1 or dim < 1:
        raise CodebookFormatError(f"invalid count/dim {count}/{dim}", offset=8)
    expected = _HEADER.size + 4 * count * (dim + 12)
    if len(blob) != expected:
        raise CodebookFormatError(
            f"expected {expected} bytes for {count} entries of dim {dim}, found {len(blob)}",
            offset=len(blob),
        )
    rows = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(count, dim + 12)
    return Codebook(
        rows[:, :dim],
        rows[:, dim : dim + 9].reshape(count, 3, 3),
        rows[:, dim + 9],
        rows[:, dim + 10 :],
    )
