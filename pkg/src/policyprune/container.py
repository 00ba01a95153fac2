"""Self-describing binary checkpoint container for adapter tensors.

Layout:

    8 bytes   magic b"ADPACK01"
    8 bytes   header length, unsigned little-endian
    N bytes   header: canonical JSON (kind, sites, ranks, alphas, seed,
              config_hash, tensor names in order)
    records   one per tensor, in header order:
                u32 name length, name utf-8,
                u32 rows, u32 cols,
                rows*cols float64 little-endian row-major

Round-trips are bit-exact: write -> read -> write produces identical bytes.
Merged factor pairs are stored with alpha equal to the stacked rank, i.e. an
effective scale of exactly 1, because constituent scalings were folded in at
merge time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .adapters import LoraAdapter, MergedAdapterSet, SiteFactors
from .errors import StorageError
from .serialize import canonical_json, sha256_file

MAGIC = b"ADPACK01"


@dataclass
class ContainerHeader:
    kind: str
    sites: list[str]
    ranks: dict[str, int]
    alphas: dict[str, float]
    seed: int | None = None
    config_hash: str | None = None
    tensor_names: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return canonical_json(
            {
                "kind": self.kind,
                "sites": list(self.sites),
                "ranks": {k: int(v) for k, v in self.ranks.items()},
                "alphas": {k: float(v) for k, v in self.alphas.items()},
                "seed": self.seed,
                "config_hash": self.config_hash,
                "tensor_names": list(self.tensor_names),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ContainerHeader":
        import json

        try:
            raw = json.loads(text)
            return cls(
                kind=raw["kind"],
                sites=list(raw["sites"]),
                ranks={k: int(v) for k, v in raw["ranks"].items()},
                alphas={k: float(v) for k, v in raw["alphas"].items()},
                seed=raw["seed"],
                config_hash=raw["config_hash"],
                tensor_names=list(raw["tensor_names"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise StorageError(f"malformed container header: {exc}") from exc


def write_container(
    path, header: ContainerHeader, tensors: list[tuple[str, np.ndarray]]
) -> None:
    header.tensor_names = [name for name, _ in tensors]
    header_bytes = header.to_json().encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header_bytes)))
            f.write(header_bytes)
            for name, arr in tensors:
                arr = np.ascontiguousarray(arr, dtype=np.float64)
                if arr.ndim != 2:
                    raise StorageError(
                        f"tensor {name!r} must be 2-D, got ndim={arr.ndim}"
                    )
                name_bytes = name.encode("utf-8")
                f.write(struct.pack("<I", len(name_bytes)))
                f.write(name_bytes)
                f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
                f.write(arr.astype("<f8", copy=False).tobytes(order="C"))
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise StorageError(f"truncated container: expected {n} bytes for {what}")
    return data


def read_container(path) -> tuple[ContainerHeader, list[tuple[str, np.ndarray]]]:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise StorageError(f"cannot open checkpoint {path}: {exc}") from exc
    with f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise StorageError(f"{path} is not an adapter container (bad magic)")
        (header_len,) = struct.unpack("<Q", _read_exact(f, 8, "header length"))
        header = ContainerHeader.from_json(
            _read_exact(f, header_len, "header").decode("utf-8")
        )
        tensors = []
        for expect_name in header.tensor_names:
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            if name != expect_name:
                raise StorageError(
                    f"container record order mismatch: header says "
                    f"{expect_name!r}, file has {name!r}"
                )
            rows, cols = struct.unpack("<II", _read_exact(f, 8, "tensor shape"))
            data = _read_exact(f, rows * cols * 8, f"tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f8").reshape(rows, cols)
            tensors.append((name, arr.astype(np.float64).copy(order="C")))
        if f.read(1):
            raise StorageError(f"{path} has trailing bytes after last tensor")
    return header, tensors


def save_adapters(
    path,
    adapters: list[LoraAdapter],
    kind: str,
    seed: int | None = None,
    config_hash: str | None = None,
) -> None:
    """Write one adapter per site as raw (unscaled) A/B factor records."""
    header = ContainerHeader(
        kind=kind,
        sites=[ad.site_id for ad in adapters],
        ranks={ad.site_id: ad.rank for ad in adapters},
        alphas={ad.site_id: ad.alpha for ad in adapters},
        seed=seed,
        config_hash=config_hash,
    )
    tensors = []
    for ad in adapters:
        tensors.append((f"{ad.site_id}.A", ad.a))
        tensors.append((f"{ad.site_id}.B", ad.b))
    write_container(path, header, tensors)


def load_adapters(path) -> tuple[list[LoraAdapter], ContainerHeader]:
    header, tensors = read_container(path)
    by_name = dict(tensors)
    adapters = []
    for sid in header.sites:
        try:
            a, b = by_name[f"{sid}.A"], by_name[f"{sid}.B"]
        except KeyError as exc:
            raise StorageError(f"container missing factor for site {sid!r}") from exc
        adapters.append(
            LoraAdapter(sid, a=a, b=b, rank=header.ranks[sid],
                        alpha=header.alphas[sid])
        )
    return adapters, header


def save_merged(
    path,
    merged: MergedAdapterSet,
    kind: str = "merged",
    seed: int | None = None,
    config_hash: str | None = None,
) -> None:
    header = ContainerHeader(
        kind=kind,
        sites=[s.site_id for s in merged.sites],
        # scale already folded in: record alpha = rank so alpha/rank = 1
        ranks={s.site_id: s.a.shape[0] for s in merged.sites},
        alphas={s.site_id: float(s.a.shape[0]) for s in merged.sites},
        seed=seed,
        config_hash=config_hash,
    )
    tensors = []
    for s in merged.sites:
        tensors.append((f"{s.site_id}.A", s.a))
        tensors.append((f"{s.site_id}.B", s.b))
    write_container(path, header, tensors)


def load_merged(path) -> tuple[MergedAdapterSet, ContainerHeader]:
    header, tensors = read_container(path)
    by_name = dict(tensors)
    merged = MergedAdapterSet()
    for sid in header.sites:
        try:
            a, b = by_name[f"{sid}.A"], by_name[f"{sid}.B"]
        except KeyError as exc:
            raise StorageError(f"container missing factor for site {sid!r}") from exc
        merged.sites.append(SiteFactors(sid, a.copy(), b.copy()))
    return merged, header


def checkpoint_hash(path) -> str:
    return sha256_file(path)
