"""Space-efficient banded matrix products for windowed attention.

A band matrix stores, for each of its ``s`` rows, only the ``2w+1`` score
slots of a local attention window.  Slot ``j`` of row ``i`` (0-based)
corresponds to target row ``t = i + j - w`` of the attended-to matrix;
slots whose target falls outside ``[0, target_len)`` are invalid and hold
exact zeros.  ``w = 0`` therefore keeps each row's attention to itself.

Two product kernels operate on this layout:

* ``band_qk``  -- windowed query-key product, dense x dense -> band
* ``band_pv``  -- band-probability-value product, band x dense -> dense

Both have adjoints (``*_backward``), a pure-Python naive path with a
multiply-add counter, and a dense masked oracle for verification.  The
optimized kernels walk the band one diagonal at a time over contiguous
row slices; reductions run in ascending feature order and diagonals in
ascending slot order, so results are bit-reproducible for fixed inputs.

All functions are pure; concurrent calls on shared read-only inputs are
safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class BandShapeError(ValueError):
    """Raised when band/dense operands have inconsistent shapes."""


# Sentinel accepted by band_to_dense for masked fills.
MASKED = np.ma.masked


def _check_window(window) -> int:
    if not isinstance(window, (int, np.integer)) or window < 0:
        raise BandShapeError(f"window must be a non-negative integer, got {window!r}")
    # 2w+1 slots must be indexable; guards absurd widths before allocation.
    if 2 * int(window) + 1 > np.iinfo(np.intp).max:
        raise BandShapeError(f"window {window} overflows the index type")
    return int(window)


def band_validity(seq_len: int, window: int, target_len: int) -> np.ndarray:
    """Boolean (seq_len, 2w+1) mask: slot (i, j) is valid iff 0 <= i+j-w < target_len."""
    w = _check_window(window)
    targets = np.arange(seq_len)[:, None] + np.arange(2 * w + 1)[None, :] - w
    return (targets >= 0) & (targets < target_len)


@dataclass
class BandMatrix:
    """Band storage: ``data`` is (seq_len, 2*window+1), invalid slots exactly 0.

    ``target_len`` is the length of the attended-to sequence; for plain
    windowed self-attention it equals ``seq_len``, for cross-attention
    segments it is the key matrix's row count.
    """

    data: np.ndarray
    window: int
    target_len: int
    _valid: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.window = _check_window(self.window)
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[1] != 2 * self.window + 1:
            raise BandShapeError(
                f"band data must be (s, {2 * self.window + 1}), got {self.data.shape}"
            )
        if self.target_len < 1:
            raise BandShapeError("target_len must be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise BandShapeError("band data contains non-finite entries")
        if np.any(self.data[~self.valid] != 0.0):
            raise BandShapeError("entries at invalid band positions must be exactly 0")

    @property
    def seq_len(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def valid(self) -> np.ndarray:
        if self._valid is None:
            self._valid = band_validity(self.data.shape[0], self.window, self.target_len)
        return self._valid

    def to_dense(self, fill=0.0) -> np.ndarray:
        return band_to_dense(self, fill=fill)

    @classmethod
    def from_dense(cls, dense: np.ndarray, window: int) -> "BandMatrix":
        """Extract the in-band entries of a dense (s, s') matrix."""
        dense = np.asarray(dense)
        if dense.ndim != 2:
            raise BandShapeError("dense input must be 2-D")
        s, t = dense.shape
        w = _check_window(window)
        data = np.zeros((s, 2 * w + 1), dtype=dense.dtype)
        for j in range(2 * w + 1):
            lo, hi = _diag_bounds(s, t, j - w)
            if lo < hi:
                rows = np.arange(lo, hi)
                data[rows, j] = dense[rows, rows + (j - w)]
        return cls(data, w, t)


def _diag_bounds(rows: int, target_len: int, offset: int) -> tuple[int, int]:
    """Row range [lo, hi) for which row + offset lands inside [0, target_len)."""
    lo = max(0, -offset)
    hi = min(rows, target_len - offset)
    return lo, max(lo, hi)


# ---------------------------------------------------------------------------
# Optimized kernels.  These accept arbitrary leading (batch/head) dimensions;
# the last two axes are (rows, features) / (rows, slots).
#
# Narrow bands walk one diagonal at a time over contiguous row slices; wide
# bands switch to a blocked path: row tiles of size ~w are multiplied with
# their (tile + 2w)-row key stripe as one dense product, from which the band
# diagonals are gathered.  Both paths compute identical values (reductions
# over the feature axis in fixed order; the blocked product delegates to the
# platform GEMM, deterministic for fixed inputs).
# ---------------------------------------------------------------------------

_BLOCKED_MIN_WIDTH = 32


def _pad_targets(m: np.ndarray, window: int, rows: int) -> np.ndarray:
    """Zero-pad the target axis so every row's window slice is in range.

    Row i of the band addresses target rows [i-w, i+w]; after padding with
    w leading zeros, those become padded rows [i, i+2w], valid for all
    i < rows.
    """
    t = m.shape[-2]
    padded_len = rows + 2 * window
    out = np.zeros(m.shape[:-2] + (padded_len, m.shape[-1]), dtype=m.dtype)
    used = min(t, rows + window)
    out[..., window : window + used, :] = m[..., :used, :]
    return out


def band_scores(q: np.ndarray, k: np.ndarray, window: int) -> np.ndarray:
    """Windowed dot products: out[..., i, j] = q[..., i, :] . k[..., i+j-w, :].

    Out-of-range slots are 0.  Broadcasting over leading axes follows numpy
    rules; q and k must share the feature axis.
    """
    w = _check_window(window)
    if q.shape[-1] != k.shape[-1]:
        raise BandShapeError(
            f"feature dims differ: q has {q.shape[-1]}, k has {k.shape[-1]}"
        )
    s, t = q.shape[-2], k.shape[-2]
    width = 2 * w + 1
    if width >= _BLOCKED_MIN_WIDTH and s >= width:
        return _band_scores_blocked(q, k, w)
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2])
    out = np.zeros(lead + (s, width), dtype=np.result_type(q, k))
    for j in range(width):
        lo, hi = _diag_bounds(s, t, j - w)
        if lo < hi:
            qs = q[..., lo:hi, :]
            ks = k[..., lo + (j - w) : hi + (j - w), :]
            out[..., lo:hi, j] = np.einsum("...rh,...rh->...r", qs, ks)
    return out


def _band_scores_blocked(q: np.ndarray, k: np.ndarray, w: int) -> np.ndarray:
    s = q.shape[-2]
    width = 2 * w + 1
    k_pad = _pad_targets(k, w, s)
    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2])
    out = np.empty(lead + (s, width), dtype=np.result_type(q, k))
    chunk = max(w, 1)
    rows = np.arange(chunk)
    for r0 in range(0, s, chunk):
        c = min(chunk, s - r0)
        stripe = k_pad[..., r0 : r0 + c + 2 * w, :]
        scores = np.matmul(q[..., r0 : r0 + c, :], np.swapaxes(stripe, -1, -2))
        idx = rows[:c, None] + np.arange(width)[None, :]
        out[..., r0 : r0 + c, :] = scores[..., rows[:c, None], idx]
    return out


def band_apply(p: np.ndarray, v: np.ndarray, window: int) -> np.ndarray:
    """Band-weighted sum of value rows: out[..., i, :] = sum_j p[..., i, j] * v[..., i+j-w, :].

    Slots whose target is out of range contribute nothing, regardless of the
    values stored there.
    """
    w = _check_window(window)
    if p.shape[-1] != 2 * w + 1:
        raise BandShapeError(f"band width {p.shape[-1]} inconsistent with window {w}")
    s, t = p.shape[-2], v.shape[-2]
    width = 2 * w + 1
    if width >= _BLOCKED_MIN_WIDTH and s >= width:
        return _band_apply_blocked(p, v, w)
    lead = np.broadcast_shapes(p.shape[:-2], v.shape[:-2])
    out = np.zeros(lead + (s, v.shape[-1]), dtype=np.result_type(p, v))
    for j in range(width):
        lo, hi = _diag_bounds(s, t, j - w)
        if lo < hi:
            out[..., lo:hi, :] += (
                p[..., lo:hi, j : j + 1] * v[..., lo + (j - w) : hi + (j - w), :]
            )
    return out


def _band_apply_blocked(p: np.ndarray, v: np.ndarray, w: int) -> np.ndarray:
    s = p.shape[-2]
    width = 2 * w + 1
    v_pad = _pad_targets(v, w, s)
    lead = np.broadcast_shapes(p.shape[:-2], v.shape[:-2])
    out = np.empty(lead + (s, v.shape[-1]), dtype=np.result_type(p, v))
    chunk = max(w, 1)
    rows = np.arange(chunk)
    for r0 in range(0, s, chunk):
        c = min(chunk, s - r0)
        scatter = np.zeros(lead + (c, c + 2 * w), dtype=np.result_type(p, v))
        idx = rows[:c, None] + np.arange(width)[None, :]
        scatter[..., rows[:c, None], idx] = p[..., r0 : r0 + c, :]
        stripe = v_pad[..., r0 : r0 + c + 2 * w, :]
        out[..., r0 : r0 + c, :] = np.matmul(scatter, stripe)
    return out


def band_scores_backward(
    grad_band: np.ndarray, q: np.ndarray, k: np.ndarray, window: int
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of band_scores; invalid slots of grad_band are never read."""
    w = _check_window(window)
    s, t = q.shape[-2], k.shape[-2]
    grad_q = np.zeros_like(q)
    grad_k = np.zeros_like(k)
    for j in range(2 * w + 1):
        lo, hi = _diag_bounds(s, t, j - w)
        if lo < hi:
            g = grad_band[..., lo:hi, j : j + 1]
            grad_q[..., lo:hi, :] += g * k[..., lo + (j - w) : hi + (j - w), :]
            grad_k[..., lo + (j - w) : hi + (j - w), :] += g * q[..., lo:hi, :]
    return grad_q, grad_k


def band_apply_backward(
    grad_out: np.ndarray, p: np.ndarray, v: np.ndarray, window: int
) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of band_apply; grad w.r.t. invalid slots is forced to 0."""
    w = _check_window(window)
    s, t = p.shape[-2], v.shape[-2]
    grad_p = np.zeros_like(p)
    grad_v = np.zeros_like(v)
    for j in range(2 * w + 1):
        lo, hi = _diag_bounds(s, t, j - w)
        if lo < hi:
            vs = v[..., lo + (j - w) : hi + (j - w), :]
            grad_p[..., lo:hi, j] = np.einsum(
                "...rh,...rh->...r", grad_out[..., lo:hi, :], vs
            )
            grad_v[..., lo + (j - w) : hi + (j - w), :] += (
                p[..., lo:hi, j : j + 1] * grad_out[..., lo:hi, :]
            )
    return grad_p, grad_v


# ---------------------------------------------------------------------------
# Public band-matrix API (2-D operands wrapped in BandMatrix).
# ---------------------------------------------------------------------------

def _as_2d(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise BandShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise BandShapeError(f"{name} contains non-finite entries")
    return m


def band_qk(q: np.ndarray, k: np.ndarray, window: int) -> BandMatrix:
    """Windowed query-key product of (s, h) and (s', h) matrices.

    Returns the band of Q K^T: slot j of row i holds the dot product of
    query row i with key row i+j-w when that key row exists.
    """
    q = _as_2d(q, "Q")
    k = _as_2d(k, "K")
    if q.shape[1] != k.shape[1]:
        raise BandShapeError(
            f"embedding dims differ: Q has {q.shape[1]}, K has {k.shape[1]}"
        )
    data = band_scores(q, k, window)
    return BandMatrix(data, window, k.shape[0])


def band_pv(p: BandMatrix, v: np.ndarray) -> np.ndarray:
    """Product of a band probability matrix with a dense (s', h) value matrix."""
    v = _as_2d(v, "V")
    if v.shape[0] != p.target_len:
        raise BandShapeError(
            f"V has {v.shape[0]} rows but band was built against {p.target_len}"
        )
    return band_apply(p.data, v, p.window)


def band_qk_backward(
    grad_band: BandMatrix, q: np.ndarray, k: np.ndarray, window: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of band_qk w.r.t. Q and K for an upstream band gradient."""
    q = _as_2d(q, "Q")
    k = _as_2d(k, "K")
    w = _check_window(window)
    if grad_band.window != w or grad_band.seq_len != q.shape[0]:
        raise BandShapeError("gradient band inconsistent with forward shapes")
    if grad_band.target_len != k.shape[0]:
        raise BandShapeError("gradient band target length inconsistent with K")
    return band_scores_backward(grad_band.data, q, k, w)


def band_pv_backward(
    grad_out: np.ndarray, p: BandMatrix, v: np.ndarray
) -> tuple[BandMatrix, np.ndarray]:
    """Gradients of band_pv w.r.t. the band P and the values V."""
    grad_out = _as_2d(grad_out, "grad_out")
    v = _as_2d(v, "V")
    if v.shape[0] != p.target_len:
        raise BandShapeError("V rows inconsistent with band target length")
    if grad_out.shape != (p.seq_len, v.shape[1]):
        raise BandShapeError("grad_out shape inconsistent with forward output")
    grad_p, grad_v = band_apply_backward(grad_out, p.data, v, p.window)
    return BandMatrix(grad_p, p.window, p.target_len), grad_v


def band_to_dense(band: BandMatrix, target_cols: int | None = None, fill=0.0) -> np.ndarray:
    """Re-expand a band to a dense (s, target_cols) matrix.

    Valid slot (i, j) lands at column i+j-w; all other entries take
    ``fill``.  Passing ``fill=MASKED`` yields a masked array instead of a
    numeric fill.
    """
    t = band.target_len if target_cols is None else int(target_cols)
    if t < 1:
        raise BandShapeError("target_cols must be >= 1")
    s, w = band.seq_len, band.window
    dense = np.zeros((s, t), dtype=band.data.dtype)
    hit = np.zeros((s, t), dtype=bool)
    for j in range(2 * w + 1):
        lo, hi = _diag_bounds(s, t, j - w)
        if lo < hi:
            rows = np.arange(lo, hi)
            dense[rows, rows + (j - w)] = band.data[lo:hi, j]
            hit[rows, rows + (j - w)] = True
    if fill is MASKED:
        return np.ma.MaskedArray(dense, mask=~hit)
    dense[~hit] = fill
    return dense


def dense_band_oracle(q: np.ndarray, k: np.ndarray, window: int) -> np.ma.MaskedArray:
    """Reference: full Q K^T with out-of-band entries masked, not numeric.

    Verification oracle for band_qk; the masked marker prevents accidental
    arithmetic on entries the band never computes.
    """
    q = _as_2d(q, "Q")
    k = _as_2d(k, "K")
    if q.shape[1] != k.shape[1]:
        raise BandShapeError(
            f"embedding dims differ: Q has {q.shape[1]}, K has {k.shape[1]}"
        )
    w = _check_window(window)
    full = q @ k.T
    offsets = np.arange(k.shape[0])[None, :] - np.arange(q.shape[0])[:, None]
    return np.ma.MaskedArray(full, mask=np.abs(offsets) > w)


# ---------------------------------------------------------------------------
# Naive reference kernels with multiply-add counting.
# ---------------------------------------------------------------------------

@dataclass
class OpCounter:
    """Tallies scalar multiply-add operations performed by naive kernels."""

    multiply_adds: int = 0

    def add(self, n: int) -> None:
        self.multiply_adds += n


def naive_band_qk(
    q: np.ndarray, k: np.ndarray, window: int, counter: OpCounter | None = None
) -> BandMatrix:
    """Triple-loop band_qk; out-of-range keys are zeros, as the padding rule states.

    Every slot performs h multiply-adds, so the count is exactly
    s * (2w+1) * h.
    """
    q = _as_2d(q, "Q")
    k = _as_2d(k, "K")
    if q.shape[1] != k.shape[1]:
        raise BandShapeError("embedding dims differ")
    w = _check_window(window)
    s, h = q.shape
    t = k.shape[0]
    data = np.zeros((s, 2 * w + 1), dtype=np.result_type(q, k))
    for i in range(s):
        for j in range(2 * w + 1):
            tgt = i + j - w
            acc = 0.0
            for l in range(h):
                kval = k[tgt, l] if 0 <= tgt < t else 0.0
                acc += q[i, l] * kval
            data[i, j] = acc
    if counter is not None:
        counter.add(s * (2 * w + 1) * h)
    return BandMatrix(data, w, t)


def naive_band_pv(
    p: BandMatrix, v: np.ndarray, counter: OpCounter | None = None
) -> np.ndarray:
    """Triple-loop band_pv with zeroed out-of-range value rows."""
    v = _as_2d(v, "V")
    if v.shape[0] != p.target_len:
        raise BandShapeError("V rows inconsistent with band target length")
    s, width = p.data.shape
    t, h = v.shape
    out = np.zeros((s, h), dtype=np.result_type(p.data, v))
    for i in range(s):
        for l in range(h):
            acc = 0.0
            for j in range(width):
                tgt = i + j - p.window
                vval = v[tgt, l] if 0 <= tgt < t else 0.0
                acc += p.data[i, j] * vval
            out[i, l] = acc
    if counter is not None:
        counter.add(s * width * h)
    return out


def naive_matmul(
    a: np.ndarray, b: np.ndarray, counter: OpCounter | None = None
) -> np.ndarray:
    """Triple-loop dense matmul, counted; reference for dense segment costs."""
    a = _as_2d(a, "A")
    b = _as_2d(b, "B")
    if a.shape[1] != b.shape[0]:
        raise BandShapeError("inner dims differ")
    m, n = a.shape[0], b.shape[1]
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(a.shape[1]):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    if counter is not None:
        counter.add(m * n * a.shape[1])
    return out
