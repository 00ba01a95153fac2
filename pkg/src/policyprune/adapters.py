"""Dense matrix primitives, low-rank adapters, merging, and masked projection.

All tensors are float64 numpy arrays in C (row-major) order. Matrices are
validated once at construction: finite entries, 2-D shape. Adapter sets are
treated as immutable; operations that change values return new objects, and
the training loop works on explicit copies.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError


def matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and normalize a 2-D float64 matrix.

    Rejects non-finite entries and, when rows/cols are given, wrong shapes.
    Returns a C-contiguous float64 array (copying only if needed).
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    if rows is not None and arr.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise DimensionError(f"expected {cols} cols, got {arr.shape[1]}")
    if not np.isfinite(arr).all():
        raise UsageError("matrix entries must be finite (no NaN/Inf)")
    return arr


def array_checksum(*arrays: np.ndarray) -> str:
    """SHA-256 over the raw bytes (and shapes) of the given arrays."""
    h = hashlib.sha256()
    for arr in arrays:
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class LoraAdapter:
    """Low-rank factor pair for one projection site.

    The adapter's dense contribution is (alpha / rank) * B @ A, with
    A of shape (rank, d_in) and B of shape (d_out, rank).
    """

    site_id: str
    a: np.ndarray
    b: np.ndarray
    rank: int
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "a", matrix(self.a))
        object.__setattr__(self, "b", matrix(self.b))
        if self.rank < 1:
            raise UsageError(f"rank must be >= 1, got {self.rank}")
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise DimensionError(
                f"adapter {self.site_id}: A rows ({self.a.shape[0]}) and B cols "
                f"({self.b.shape[1]}) must both equal rank {self.rank}"
            )

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def lora_delta(adapter: LoraAdapter) -> np.ndarray:
    """Dense update contributed by one adapter: (alpha/rank) * B @ A."""
    return adapter.scale * (adapter.b @ adapter.a)


@dataclass(frozen=True)
class FrozenBackbone:
    """Fixed per-site base weights. Arrays are made read-only at construction."""

    sites: tuple[tuple[str, np.ndarray], ...]
    embedding_dim: int

    def __post_init__(self):
        frozen = []
        for site_id, w in self.sites:
            w = matrix(w)
            w.setflags(write=False)
            frozen.append((site_id, w))
        object.__setattr__(self, "sites", tuple(frozen))

    def site(self, site_id: str) -> np.ndarray:
        for sid, w in self.sites:
            if sid == site_id:
                return w
        raise UsageError(f"unknown site {site_id!r}")

    def site_ids(self) -> list[str]:
        return [sid for sid, _ in self.sites]

    def checksum(self) -> str:
        return array_checksum(*(w for _, w in self.sites))


@dataclass
class SiteFactors:
    """Stacked merged factors at one site: a is (R, d_in), b is (d_out, R)."""

    site_id: str
    a: np.ndarray
    b: np.ndarray


@dataclass
class MergedAdapterSet:
    """Per-site stacked merged factors; the tensors that get scored and masked.

    Tensor ids run 1..T in site order, A factor before B factor, so
    T = 2 * len(sites). The factor product b @ a is the site's dense update
    (constituent scalings are folded in at merge time, see merge_adapters).
    """

    sites: list[SiteFactors] = field(default_factory=list)

    def copy(self) -> "MergedAdapterSet":
        return MergedAdapterSet(
            [SiteFactors(s.site_id, s.a.copy(), s.b.copy()) for s in self.sites]
        )

    def site(self, site_id: str) -> SiteFactors:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise UsageError(f"unknown site {site_id!r}")

    def tensors(self) -> list[tuple[int, str, str, np.ndarray]]:
        """All maskable tensors as (tensor_id, site_id, factor, array)."""
        out = []
        tid = 1
        for s in self.sites:
            out.append((tid, s.site_id, "A", s.a))
            out.append((tid + 1, s.site_id, "B", s.b))
            tid += 2
        return out

    def tensor_index(self) -> dict[int, tuple[str, str, int]]:
        """Map tensor id -> (site_id, factor, entry count)."""
        return {tid: (sid, fac, arr.size) for tid, sid, fac, arr in self.tensors()}

    @property
    def total_entries(self) -> int:
        return sum(arr.size for _, _, _, arr in self.tensors())

    def checksum(self) -> str:
        return array_checksum(*(arr for _, _, _, arr in self.tensors()))


def merge_adapters(
    adapters: list[LoraAdapter], site_id: str
) -> tuple[np.ndarray, np.ndarray]:
    """Stack adapters targeting one site into merged (A, B) factors.

    A factors stack row-wise and B factors column-wise; each constituent's
    alpha/rank scaling is folded into its A block, so the merged product
    b @ a equals the sum of the constituents' dense deltas and the merged
    pair needs no further scaling. Merged rank is the sum of ranks.
    """
    if not adapters:
        raise UsageError(f"no adapters to merge at site {site_id!r}")
    for ad in adapters:
        if ad.site_id != site_id:
            raise UsageError(
                f"adapter targets site {ad.site_id!r}, expected {site_id!r}"
            )
    d_in, d_out = adapters[0].d_in, adapters[0].d_out
    for ad in adapters[1:]:
        if ad.d_in != d_in or ad.d_out != d_out:
            raise DimensionError(
                f"site {site_id!r}: adapters disagree on dimensions "
                f"({ad.d_out}x{ad.d_in} vs {d_out}x{d_in})"
            )
    a_merged = np.vstack([ad.scale * ad.a for ad in adapters])
    b_merged = np.hstack([ad.b for ad in adapters])
    return a_merged, b_merged


def merge_adapter_sets(
    adapter_sets: list[list[LoraAdapter]], site_ids: list[str]
) -> MergedAdapterSet:
    """Merge several trained adapter sets (one adapter per site each)."""
    merged = MergedAdapterSet()
    for sid in site_ids:
        at_site = [ad for ads in adapter_sets for ad in ads if ad.site_id == sid]
        a, b = merge_adapters(at_site, sid)
        merged.sites.append(SiteFactors(sid, a, b))
    return merged


def apply_projection(
    h: np.ndarray,
    backbone_site: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    mask_a: np.ndarray | None = None,
    mask_b: np.ndarray | None = None,
    scale: float = 1.0,
) -> np.ndarray:
    """Project inputs through a frozen weight plus a (masked) low-rank update.

    h is (n, d_in) row-vectors; returns h @ W^T + scale * h @ (Mb*b @ Ma*a)^T.
    Masks are keep-masks shaped like their factors; None means all-ones.
    Merged factor pairs carry scale 1; a raw adapter would pass alpha/rank.
    """
    h = matrix(h)
    w = matrix(backbone_site)
    if h.shape[1] != w.shape[1]:
        raise DimensionError(
            f"input cols {h.shape[1]} do not match site d_in {w.shape[1]}"
        )
    if a.shape[0] != b.shape[1]:
        raise DimensionError(
            f"factor ranks disagree: A has {a.shape[0]} rows, B has {b.shape[1]} cols"
        )
    if a.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise DimensionError("factor dimensions do not match the site weight")
    am = a if mask_a is None else _masked(a, mask_a)
    bm = b if mask_b is None else _masked(b, mask_b)
    # (h @ am.T) @ bm.T keeps the low-rank bottleneck instead of forming b@a.
    return h @ w.T + scale * ((h @ am.T) @ bm.T)


def _masked(arr: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != arr.shape:
        raise DimensionError(
            f"mask shape {mask.shape} does not match factor shape {arr.shape}"
        )
    return arr * mask
