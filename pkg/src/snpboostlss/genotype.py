"""Genotype storage backed by PLINK-style 2-bit packed codes.

Dosages count copies of ``allele1`` and take values in {0, 1, 2} or missing.
The matrix is stored variant-major, one row of ``ceil(n / 4)`` bytes per
variant, exactly as in a variant-major ``.bed`` file. Samples are packed low
order bit-pair first.
"""

from __future__ import annotations

import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateError,
    FormatError,
    IntegrityError,
    TruncationError,
)

BED_MAGIC = (0x6C, 0x1B)
BED_VARIANT_MAJOR = 0x01
MISSING_CODE = 1
SCAN_CHUNK = 256

# 2-bit code -> dosage of allele1
_CODE_TO_DOSAGE = np.array([2.0, np.nan, 1.0, 0.0])
# byte -> the four codes it holds, low-order pair first
_BYTE_TO_CODES = np.array(
    [[(b >> (2 * k)) & 0b11 for k in range(4)] for b in range(256)], dtype=np.uint8
)
_BYTE_TO_DOSAGE = _CODE_TO_DOSAGE[_BYTE_TO_CODES]


@dataclass(frozen=True)
class VariantMeta:
    chromosome: str
    variant_id: str
    position: int = 0
    allele1: str = "A"
    allele2: str = "B"

    def __post_init__(self):
        if not self.variant_id:
            raise DataError("variant id must be non-empty")
        if self.position < 0:
            raise DataError(f"variant {self.variant_id}: negative position {self.position}")


@dataclass(frozen=True)
class SampleMeta:
    family_id: str
    individual_id: str


@dataclass(frozen=True)
class ColumnStats:
    mean: np.ndarray
    sd: np.ndarray
    missing: np.ndarray


def bytes_per_variant(n: int) -> int:
    return (n + 3) // 4


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack a (p, n) array of 2-bit codes into (p, ceil(n/4)) bytes."""
    codes = np.asarray(codes, dtype=np.uint8)
    p, n = codes.shape
    nb = bytes_per_variant(n)
    padded = np.zeros((p, nb * 4), dtype=np.uint8)
    padded[:, :n] = codes
    padded = padded.reshape(p, nb, 4)
    out = (
        padded[:, :, 0]
        | (padded[:, :, 1] << 2)
        | (padded[:, :, 2] << 4)
        | (padded[:, :, 3] << 6)
    )
    return out.astype(np.uint8)


def unpack_codes(packed: np.ndarray, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    return _BYTE_TO_CODES[packed].reshape(packed.shape[0], -1)[:, :n]


def dosages_to_codes(dosages: np.ndarray) -> np.ndarray:
    """Map an (n, p) dosage array (NaN = missing) onto (p, n) 2-bit codes."""
    d = np.asarray(dosages, dtype=float)
    if d.ndim != 2:
        raise DataError("dosage array must be two-dimensional")
    finite = ~np.isnan(d)
    bad = finite & ~np.isin(d, (0.0, 1.0, 2.0))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DataError(f"dosage {d[i, j]!r} at sample {i}, variant {j} is not in {{0, 1, 2}}")
    codes = np.full(d.shape, MISSING_CODE, dtype=np.uint8)
    codes[d == 2.0] = 0
    codes[d == 1.0] = 2
    codes[d == 0.0] = 3
    return codes.T.copy()


class GenotypeMatrix:
    """An immutable n x p dosage matrix over packed 2-bit storage.

    Parameters
    ----------
    packed : ndarray of uint8, shape (p, ceil(n / 4))
        Variant-major packed genotype codes.
    n : int
        Number of samples.
    variants : sequence of VariantMeta
    samples : sequence of SampleMeta
    """

    def __init__(
        self,
        packed: np.ndarray,
        n: int,
        variants: Sequence[VariantMeta],
        samples: Sequence[SampleMeta],
    ):
        packed = np.ascontiguousarray(packed, dtype=np.uint8)
        variants = tuple(variants)
        samples = tuple(samples)
        if packed.ndim != 2 or packed.shape != (len(variants), bytes_per_variant(n)):
            raise FormatError(
                f"packed storage has shape {packed.shape}, expected "
                f"({len(variants)}, {bytes_per_variant(n)})"
            )
        if len(samples) != n:
            raise DataError(f"{len(samples)} sample records for n={n}")
        index = {}
        for j, v in enumerate(variants):
            if v.variant_id in index:
                raise IntegrityError(f"duplicate variant id {v.variant_id!r}")
            index[v.variant_id] = j
        seen = set()
        for s in samples:
            key = (s.family_id, s.individual_id)
            if key in seen:
                raise IntegrityError(f"duplicate sample {s.family_id}/{s.individual_id}")
            seen.add(key)
        packed.setflags(write=False)
        self.packed = packed
        self.n = int(n)
        self.variants = variants
        self.samples = samples
        self._index = index
        self._stats: ColumnStats | None = None
        self._stats_lock = threading.Lock()

    @classmethod
    def from_dosages(cls, dosages, variants=None, samples=None) -> "GenotypeMatrix":
        """Build a matrix from an (n, p) float array with NaN for missing."""
        d = np.asarray(dosages, dtype=float)
        codes = dosages_to_codes(d)
        n, p = d.shape
        if variants is None:
            variants = [VariantMeta("1", f"v{j + 1}", j + 1) for j in range(p)]
        if samples is None:
            samples = [SampleMeta(f"s{i + 1}", f"s{i + 1}") for i in range(n)]
        return cls(pack_codes(codes), n, variants, samples)

    @property
    def p(self) -> int:
        return len(self.variants)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n, self.p

    @property
    def variant_ids(self) -> list[str]:
        return [v.variant_id for v in self.variants]

    def variant_index(self, variant_id: str) -> int:
        return self._index[variant_id]

    def has_variant(self, variant_id: str) -> bool:
        return variant_id in self._index

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.n)

    def raw_block(self, start: int, stop: int) -> np.ndarray:
        """Decoded dosages of variants ``start:stop`` as a (stop - start, n) array with NaN."""
        block = _BYTE_TO_DOSAGE[self.packed[start:stop]]
        return block.reshape(block.shape[0], -1)[:, : self.n]

    def raw_columns(self, indices: Iterable[int]) -> np.ndarray:
        idx = np.asarray(list(indices), dtype=np.intp)
        block = _BYTE_TO_DOSAGE[self.packed[idx]]
        return block.reshape(len(idx), -1)[:, : self.n]

    def to_dense(self, imputation: str = "none") -> np.ndarray:
        """Full (n, p) dosage matrix."""
        block = self.raw_block(0, self.p)
        if imputation == "mean":
            block = _impute_rows(block, self.col_stats.mean)
        return block.T.copy()

    @property
    def col_stats(self) -> ColumnStats:
        if self._stats is None:
            with self._stats_lock:
                if self._stats is None:
                    self._stats = self._compute_stats()
        return self._stats

    def _compute_stats(self) -> ColumnStats:
        mean = np.empty(self.p)
        sd = np.empty(self.p)
        missing = np.empty(self.p, dtype=np.int64)
        for start in range(0, self.p, SCAN_CHUNK):
            stop = min(start + SCAN_CHUNK, self.p)
            block = self.raw_block(start, stop)
            ok = ~np.isnan(block)
            cnt = ok.sum(axis=1)
            missing[start:stop] = self.n - cnt
            filled = np.where(ok, block, 0.0)
            with np.errstate(invalid="ignore", divide="ignore"):
                m = filled.sum(axis=1) / cnt
                dev = np.where(ok, block - m[:, None], 0.0)
                v = (dev * dev).sum(axis=1) / (cnt - 1)
            mean[start:stop] = m
            sd[start:stop] = np.sqrt(v)
        for a in (mean, sd, missing):
            a.setflags(write=False)
        return ColumnStats(mean=mean, sd=sd, missing=missing)

    def subset_samples(self, indices: Sequence[int]) -> "GenotypeMatrix":
        idx = np.asarray(indices, dtype=np.intp)
        codes = self.codes()[:, idx]
        return GenotypeMatrix(
            pack_codes(codes), len(idx), self.variants, [self.samples[i] for i in idx]
        )

    def subset_variants(self, indices: Sequence[int]) -> "GenotypeMatrix":
        idx = np.asarray(indices, dtype=np.intp)
        return GenotypeMatrix(
            self.packed[idx], self.n, [self.variants[j] for j in idx], self.samples
        )

    def filter_variants(self, min_call_rate: float = 0.9, min_maf: float = 0.001) -> "GenotypeMatrix":
        """Keep variants with call rate >= ``min_call_rate`` and MAF >= ``min_maf``.

        Not applied by any loader; callers opt in.
        """
        st = self.col_stats
        call = 1.0 - st.missing / self.n
        freq = st.mean / 2.0
        maf = np.minimum(freq, 1.0 - freq)
        keep = np.flatnonzero((call >= min_call_rate) & (np.nan_to_num(maf, nan=-1.0) >= min_maf))
        return self.subset_variants(keep)

    def __repr__(self):
        return f"GenotypeMatrix(n={self.n}, p={self.p})"


def _impute_rows(block: np.ndarray, means: np.ndarray) -> np.ndarray:
    miss = np.isnan(block)
    if miss.any():
        block = np.where(miss, means[:, None], block)
    return block


def dosage_column(matrix: GenotypeMatrix, j: int, imputation: str = "mean") -> np.ndarray:
    """Dosages of variant ``j``, optionally mean-imputed over non-missing entries."""
    if not 0 <= j < matrix.p:
        raise IndexError(f"variant index {j} out of range for p={matrix.p}")
    col = matrix.raw_block(j, j + 1)[0].copy()
    if imputation == "none":
        return col
    if imputation != "mean":
        raise ValueError(f"unknown imputation {imputation!r}")
    miss = np.isnan(col)
    if miss.all():
        raise DegenerateError(f"variant {matrix.variants[j].variant_id} is missing for every sample")
    if miss.any():
        col[miss] = matrix.col_stats.mean[j]
    return col


def imputed_columns(matrix: GenotypeMatrix, indices: Sequence[int]) -> np.ndarray:
    """(len(indices), n) mean-imputed dosages; all-missing columns become zeros."""
    idx = np.asarray(indices, dtype=np.intp)
    block = matrix.raw_columns(idx)
    means = np.nan_to_num(matrix.col_stats.mean[idx], nan=0.0)
    return _impute_rows(block, means)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx <= 0.0 or syy <= 0.0:
        return 0.0
    return float(xc @ yc) / math.sqrt(sxx * syy)


def column_correlation(matrix: GenotypeMatrix, j: int, target) -> float:
    """Pearson correlation between the imputed dosages of variant ``j`` and ``target``.

    Zero-variance columns or targets give exactly 0.
    """
    y = np.asarray(target, dtype=float)
    if y.shape != (matrix.n,):
        raise DataError(f"target has length {y.size}, expected {matrix.n}")
    if matrix.n < 2:
        raise DataError("correlation needs at least two samples")
    if matrix.col_stats.missing[j] == matrix.n:
        return 0.0
    return _pearson(dosage_column(matrix, j, "mean"), y)


def correlation_scan(
    matrix: GenotypeMatrix,
    target,
    indices: Sequence[int] | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Pearson correlation of ``target`` with every (or the given) variant.

    Variants are processed in fixed-size chunks so the numeric result does not
    depend on ``threads``.
    """
    y = np.asarray(target, dtype=float)
    if y.shape != (matrix.n,):
        raise DataError(f"target has length {y.size}, expected {matrix.n}")
    if matrix.n < 2:
        raise DataError("correlation needs at least two samples")
    yc = y - y.mean()
    syy = float(yc @ yc)
    idx = np.arange(matrix.p) if indices is None else np.asarray(indices, dtype=np.intp)
    out = np.zeros(len(idx))
    if syy <= 0.0 or len(idx) == 0:
        return out
    stats = matrix.col_stats
    means = np.nan_to_num(stats.mean, nan=0.0)

    def work(start):
        sel = idx[start : start + SCAN_CHUNK]
        block = imputed_columns(matrix, sel) - means[sel, None]
        sxx = np.einsum("ij,ij->i", block, block)
        sxy = block @ yc
        with np.errstate(invalid="ignore", divide="ignore"):
            r = sxy / np.sqrt(sxx * syy)
        r[sxx <= 0.0] = 0.0
        out[start : start + len(sel)] = r

    starts = range(0, len(idx), SCAN_CHUNK)
    if threads > 1 and len(idx) > SCAN_CHUNK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    return out


# --------------------------------------------------------------------------- PLINK


def _read_lines(path) -> list[list[str]]:
    with open(path) as fh:
        return [line.split() for line in fh if line.strip()]


def read_bim(path) -> list[VariantMeta]:
    out = []
    for k, f in enumerate(_read_lines(path), start=1):
        if len(f) != 6:
            raise FormatError(f"{path}:{k}: expected 6 columns, found {len(f)}")
        try:
            pos = int(f[3])
        except ValueError:
            raise FormatError(f"{path}:{k}: position {f[3]!r} is not an integer") from None
        out.append(VariantMeta(f[0], f[1], pos, f[4], f[5]))
    return out


def read_fam(path) -> list[SampleMeta]:
    out = []
    for k, f in enumerate(_read_lines(path), start=1):
        if len(f) < 2:
            raise FormatError(f"{path}:{k}: expected at least 2 columns")
        out.append(SampleMeta(f[0], f[1]))
    return out


def load_plink(bed_path, bim_path=None, fam_path=None) -> GenotypeMatrix:
    """Read a variant-major PLINK-1 fileset.

    ``bim_path`` and ``fam_path`` default to ``bed_path`` with the suffix
    swapped.
    """
    stem = os.path.splitext(str(bed_path))[0]
    bim_path = bim_path or stem + ".bim"
    fam_path = fam_path or stem + ".fam"
    variants = read_bim(bim_path)
    samples = read_fam(fam_path)
    n, p = len(samples), len(variants)
    with open(bed_path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 3:
        raise TruncationError(f"{bed_path}: file shorter than the 3-byte header")
    for k, expected in enumerate(BED_MAGIC):
        if raw[k] != expected:
            raise FormatError(
                f"{bed_path}: bad magic byte {k}: 0x{raw[k]:02X} (expected 0x{expected:02X})"
            )
    if raw[2] != BED_VARIANT_MAJOR:
        raise FormatError(
            f"{bed_path}: unsupported mode byte 0x{raw[2]:02X} (only variant-major 0x01)"
        )
    nb = bytes_per_variant(n)
    expected = 3 + p * nb
    if len(raw) != expected:
        raise TruncationError(f"{bed_path}: size {len(raw)} bytes, expected {expected}")
    packed = np.frombuffer(raw, dtype=np.uint8, offset=3).reshape(p, nb)
    return GenotypeMatrix(packed.copy(), n, variants, samples)


def write_plink(matrix: GenotypeMatrix, prefix) -> None:
    prefix = str(prefix)
    codes = matrix.codes()
    with open(prefix + ".bed", "wb") as fh:
        fh.write(bytes([*BED_MAGIC, BED_VARIANT_MAJOR]))
        # padding pairs must be zero
        fh.write(pack_codes(codes).tobytes())
    with open(prefix + ".bim", "w") as fh:
        for v in matrix.variants:
            fh.write(f"{v.chromosome}\t{v.variant_id}\t0\t{v.position}\t{v.allele1}\t{v.allele2}\n")
    with open(prefix + ".fam", "w") as fh:
        for s in matrix.samples:
            fh.write(f"{s.family_id}\t{s.individual_id}\t0\t0\t0\t-9\n")


# --------------------------------------------------------------------------- text fixtures

_META_ROWS = ("#CHR", "#POS", "#A1", "#A2")


def write_text_matrix(matrix: GenotypeMatrix, path) -> None:
    """Tab-separated dosages, one row per sample, ``NA`` for missing.

    Variant metadata travel in ``#``-prefixed rows above the header.
    """
    dense = matrix.to_dense("none")
    vs = matrix.variants
    with open(path, "w") as fh:
        fh.write("\t".join(["#CHR", "."] + [v.chromosome for v in vs]) + "\n")
        fh.write("\t".join(["#POS", "."] + [str(v.position) for v in vs]) + "\n")
        fh.write("\t".join(["#A1", "."] + [v.allele1 for v in vs]) + "\n")
        fh.write("\t".join(["#A2", "."] + [v.allele2 for v in vs]) + "\n")
        fh.write("\t".join(["FID", "IID"] + [v.variant_id for v in vs]) + "\n")
        for s, row in zip(matrix.samples, dense):
            cells = ["NA" if np.isnan(x) else str(int(x)) for x in row]
            fh.write("\t".join([s.family_id, s.individual_id] + cells) + "\n")


def load_text_matrix(path) -> GenotypeMatrix:
    with open(path) as fh:
        lines = [line.rstrip("\n").rstrip("\r") for line in fh]
    lines = [line for line in lines if line.strip()]
    meta = {}
    body = []
    for line in lines:
        f = line.split("\t")
        if f[0] in _META_ROWS:
            meta[f[0]] = f[2:]
        elif line.startswith("#"):
            continue
        else:
            body.append(f)
    if not body:
        raise FormatError(f"{path}: no header row")
    header = body[0]
    if header[:2] == ["FID", "IID"]:
        ids, offset = header[2:], 2
    else:
        ids, offset = header, 0
    p = len(ids)
    for key, vals in meta.items():
        if len(vals) != p:
            raise FormatError(f"{path}: {key} row has {len(vals)} fields, expected {p}")
    rows = body[1:]
    dos = np.empty((len(rows), p))
    samples = []
    for k, f in enumerate(rows, start=2):
        if len(f) != p + offset:
            raise FormatError(f"{path}: row {k} has {len(f)} fields, expected {p + offset}")
        if offset:
            samples.append(SampleMeta(f[0], f[1]))
        else:
            samples.append(SampleMeta(f"s{k - 1}", f"s{k - 1}"))
        for j, cell in enumerate(f[offset:]):
            if cell == "NA":
                dos[k - 2, j] = np.nan
                continue
            try:
                dos[k - 2, j] = float(cell)
            except ValueError:
                raise FormatError(f"{path}: row {k}: unparseable dosage {cell!r}") from None
    chrom = meta.get("#CHR", ["1"] * p)
    pos = meta.get("#POS", [str(j + 1) for j in range(p)])
    a1 = meta.get("#A1", ["A"] * p)
    a2 = meta.get("#A2", ["B"] * p)
    try:
        variants = [VariantMeta(chrom[j], ids[j], int(pos[j]), a1[j], a2[j]) for j in range(p)]
    except ValueError as exc:
        raise FormatError(f"{path}: bad variant metadata: {exc}") from None
    return GenotypeMatrix.from_dosages(dos, variants, samples)


def load_genotypes(path) -> GenotypeMatrix:
    """Load a text fixture or, for ``.bed``/``.bim``/``.fam`` paths and bare prefixes, a PLINK fileset."""
    path = str(path)
    stem, ext = os.path.splitext(path)
    if ext in (".bed", ".bim", ".fam"):
        return load_plink(stem + ".bed")
    if not ext and os.path.exists(path + ".bed"):
        return load_plink(path + ".bed")
    return load_text_matrix(path)
