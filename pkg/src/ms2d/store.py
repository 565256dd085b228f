"""Out-of-core chunked 2D datasets.

Two on-disk layouts share one :class:`DatasetHandle`:

* **S2D** -- the chunked, self-describing container used for intermediate and
  processed data.  Layout (all little-endian)::

      4s   magic  b"S2D1"
      u32  version (1)
      u64  n_rows
      u64  n_cols
      u8   value_kind   0=f32, 1=f64, 2=complex128
      u8   domain_tag   0=time-time, 1=time-freq, 2=freq-freq
      u32  chunk_rows
      u32  chunk_cols
      f64  cal_A_h, cal_B_h, cal_A_v, cal_B_v, modulation_offset_hz
      u8   mode         0=magnitude, 1=absorption
      u64  chunk offsets, row-major over the chunk grid
      ...  chunks, each raw row-major samples (edge chunks are truncated)

* **T2D** -- raw transients: a ``header.t2d`` key/value file plus one binary
  file of ``n_t1`` concatenated transients (``f32le`` or ``i32le``).  It is
  opened read-only as a grid of one-row chunks.

Reads always return float64 (or complex128) arrays; storage may be narrower.
Every access is a positioned read/write on the file descriptor, so memory
held by a traversal is bounded by the block asked for, never the dataset.
"""

from __future__ import annotations

import os
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import keyvalue

MAGIC = b"S2D1"
VERSION = 1
HEADER = struct.Struct("<4sIQQBBII5dB")

VALUE_KINDS = {
    "real-f32": (0, np.dtype("<f4")),
    "real-f64": (1, np.dtype("<f8")),
    "complex-f64": (2, np.dtype("<c16")),
}
_KIND_BY_CODE = {code: name for name, (code, _) in VALUE_KINDS.items()}
DOMAIN_TAGS = {"time-time": 0, "time-freq": 1, "freq-freq": 2}
_DOMAIN_BY_CODE = {v: k for k, v in DOMAIN_TAGS.items()}
MODES = {"magnitude": 0, "absorption": 1}
_MODE_BY_CODE = {v: k for k, v in MODES.items()}

RAW_ENCODINGS = {"f32le": np.dtype("<f4"), "i32le": np.dtype("<i4")}
T2D_MANDATORY = ("n_t1", "dt1_us", "n_t2", "sample_rate_hz", "encoding", "data_file")


class StoreError(Exception):
    """Storage failure; ``offset`` is the byte position involved, when known."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class OutOfRange(StoreError, IndexError):
    pass


@dataclass
class AcquisitionParams:
    """Acquisition metadata carried by a raw T2D dataset."""

    n_t1: int
    dt1: float  # seconds
    n_t2: int
    sample_rate_t2: float  # Hz
    cal_A: float = 0.0  # Hz*Th
    cal_B: float = 0.0  # Hz^2*Th
    modulation_offset: float = 0.0  # Hz
    mz_min_h: float = 0.0
    mz_max_h: float = 0.0
    mz_max_v: float = 0.0

    def __post_init__(self):
        if self.n_t1 <= 0:
            raise ValueError("zero rows: n_t1 must be positive")
        if self.n_t2 <= 0:
            raise ValueError("n_t2 must be positive")
        if not self.dt1 > 0:
            raise ValueError("dt1 must be positive")
        if not self.sample_rate_t2 > 0:
            raise ValueError("sample_rate_t2 must be positive")

    @property
    def sample_rate_t1(self) -> float:
        return 1.0 / self.dt1

    @property
    def vertical_range(self) -> float:
        """Vertical Nyquist range, 1/(2 dt1)."""
        return 0.5 / self.dt1

    @property
    def horizontal_range(self) -> float:
        return 0.5 * self.sample_rate_t2


@dataclass
class S2DMeta:
    cal_A_h: float = 0.0
    cal_B_h: float = 0.0
    cal_A_v: float = 0.0
    cal_B_v: float = 0.0
    modulation_offset_hz: float = 0.0
    mode: str = "magnitude"


@dataclass
class ChunkStats:
    chunk_loads: int = 0
    resident: int = 0
    peak_resident: int = 0


@dataclass
class _Layout:
    data_dtype: np.dtype
    chunk_offsets: np.ndarray  # int64, row-major over the chunk grid
    header_bytes: int = 0


class DatasetHandle:
    """A 2D array living in a file, accessed by rows, columns or blocks."""

    CACHE_CHUNKS = 2

    def __init__(self, path, n_rows, n_cols, value_kind, chunk_shape, domain_tag,
                 layout: _Layout, writable=False, meta: S2DMeta | None = None):
        self.path = Path(path)
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.value_kind = value_kind
        self.chunk_shape = (int(chunk_shape[0]), int(chunk_shape[1]))
        self.domain_tag = domain_tag
        self.meta = meta if meta is not None else S2DMeta()
        self.writable = writable
        self.stats = ChunkStats()
        self._layout = layout
        self._itemsize = layout.data_dtype.itemsize
        self._fd = os.open(self.path, os.O_RDWR if writable else os.O_RDONLY)
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.grid = (-(-self.n_rows // self.chunk_shape[0]), -(-self.n_cols // self.chunk_shape[1]))

    # ------------------------------------------------------------------ basics
    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def is_complex(self) -> bool:
        return self.value_kind == "complex-f64"

    @property
    def compute_dtype(self):
        return np.complex128 if self.is_complex else np.float64

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        self._cache.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def __repr__(self):
        return (f"DatasetHandle({str(self.path)!r}, {self.n_rows}x{self.n_cols}, "
                f"{self.value_kind}, chunks={self.chunk_shape}, {self.domain_tag})")

    # ---------------------------------------------------------------- geometry
    def _chunk_dims(self, a, b):
        cr, cc = self.chunk_shape
        return min(cr, self.n_rows - a * cr), min(cc, self.n_cols - b * cc)

    def _chunk_offset(self, a, b):
        return int(self._layout.chunk_offsets[a * self.grid[1] + b])

    def _check_rows(self, r0, r1):
        if not (0 <= r0 < r1 <= self.n_rows):
            raise OutOfRange(f"row range [{r0}, {r1}) outside 0..{self.n_rows}")

    def _check_cols(self, c0, c1):
        if not (0 <= c0 < c1 <= self.n_cols):
            raise OutOfRange(f"column range [{c0}, {c1}) outside 0..{self.n_cols}")

    def _pread(self, count, offset):
        nbytes = count * self._itemsize
        buf = os.pread(self._fd, nbytes, offset)
        if len(buf) != nbytes:
            raise StoreError(f"short read: wanted {nbytes} bytes, got {len(buf)}", offset)
        return np.frombuffer(buf, dtype=self._layout.data_dtype, count=count)

    def _pwrite(self, arr, offset):
        data = np.ascontiguousarray(arr, dtype=self._layout.data_dtype).tobytes()
        written = os.pwrite(self._fd, data, offset)
        if written != len(data):
            raise StoreError("short write", offset)

    # ------------------------------------------------------------------ blocks
    def read_block(self, r0, r1, c0, c1) -> np.ndarray:
        """Copy of ``data[r0:r1, c0:c1]`` as float64/complex128."""
        self._check_rows(r0, r1)
        self._check_cols(c0, c1)
        cr, cc = self.chunk_shape
        out = np.empty((r1 - r0, c1 - c0), dtype=self.compute_dtype)
        for a in range(r0 // cr, (r1 - 1) // cr + 1):
            ar0, ar1 = max(r0, a * cr), min(r1, (a + 1) * cr)
            for b in range(c0 // cc, (c1 - 1) // cc + 1):
                bc0, bc1 = max(c0, b * cc), min(c1, (b + 1) * cc)
                _, width = self._chunk_dims(a, b)
                base = self._chunk_offset(a, b)
                lr0, lc0 = ar0 - a * cr, bc0 - b * cc
                dst = out[ar0 - r0:ar1 - r0, bc0 - c0:bc1 - c0]
                if bc1 - bc0 == width:
                    seg = self._pread((ar1 - ar0) * width, base + lr0 * width * self._itemsize)
                    dst[...] = seg.reshape(ar1 - ar0, width)
                else:
                    for k in range(ar1 - ar0):
                        off = base + ((lr0 + k) * width + lc0) * self._itemsize
                        dst[k] = self._pread(bc1 - bc0, off)
        return out

    def write_block(self, r0, c0, values) -> None:
        """Write a 2D block with its top-left corner at (r0, c0)."""
        if not self.writable:
            raise StoreError(f"{self.path} is opened read-only")
        values = np.asarray(values)
        if values.ndim != 2:
            raise ValueError("write_block expects a 2D array")
        if np.iscomplexobj(values) and not self.is_complex:
            raise StoreError(f"value_kind mismatch: complex data into {self.value_kind} dataset")
        r1, c1 = r0 + values.shape[0], c0 + values.shape[1]
        self._check_rows(r0, r1)
        self._check_cols(c0, c1)
        cr, cc = self.chunk_shape
        for a in range(r0 // cr, (r1 - 1) // cr + 1):
            ar0, ar1 = max(r0, a * cr), min(r1, (a + 1) * cr)
            for b in range(c0 // cc, (c1 - 1) // cc + 1):
                bc0, bc1 = max(c0, b * cc), min(c1, (b + 1) * cc)
                _, width = self._chunk_dims(a, b)
                base = self._chunk_offset(a, b)
                lr0, lc0 = ar0 - a * cr, bc0 - b * cc
                src = values[ar0 - r0:ar1 - r0, bc0 - c0:bc1 - c0]
                if bc1 - bc0 == width:
                    self._pwrite(src, base + lr0 * width * self._itemsize)
                else:
                    for k in range(ar1 - ar0):
                        self._pwrite(src[k], base + ((lr0 + k) * width + lc0) * self._itemsize)
                self._invalidate(a, b)

    # -------------------------------------------------------------- row / col
    def read_row(self, i) -> np.ndarray:
        self._check_rows(i, i + 1)
        return self.read_block(i, i + 1, 0, self.n_cols)[0]

    def write_row(self, i, values) -> None:
        values = np.asarray(values)
        if values.shape != (self.n_cols,):
            raise ValueError(f"row length {values.shape} != ({self.n_cols},)")
        self.write_block(i, 0, values[None, :])

    def read_col(self, j) -> np.ndarray:
        """Column ``j``; chunks are loaded whole and kept in a 2-chunk LRU cache.
        A left-to-right sweep reads each chunk once when the chunk grid has at
        most two chunk rows; bulk column work should use ``read_block``."""
        self._check_cols(j, j + 1)
        cr, cc = self.chunk_shape
        b = j // cc
        out = np.empty(self.n_rows, dtype=self.compute_dtype)
        for a in range(self.grid[0]):
            chunk = self._cached_chunk(a, b)
            out[a * cr:a * cr + chunk.shape[0]] = chunk[:, j - b * cc]
        return out

    def write_col(self, j, values) -> None:
        values = np.asarray(values)
        if values.shape != (self.n_rows,):
            raise ValueError(f"column length {values.shape} != ({self.n_rows},)")
        self.write_block(0, j, values[:, None])

    def to_array(self) -> np.ndarray:
        """Whole dataset in memory; for small data and tests."""
        return self.read_block(0, self.n_rows, 0, self.n_cols)

    # ------------------------------------------------------------------- cache
    def _cached_chunk(self, a, b):
        key = (a, b)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
            rows, width = self._chunk_dims(a, b)
            while len(self._cache) >= self.CACHE_CHUNKS:
                self._cache.popitem(last=False)
            chunk = self._pread(rows * width, self._chunk_offset(a, b)).reshape(rows, width)
            chunk = chunk.astype(self.compute_dtype)
            self._cache[key] = chunk
            self.stats.chunk_loads += 1
            self.stats.resident = len(self._cache)
            self.stats.peak_resident = max(self.stats.peak_resident, self.stats.resident)
            return chunk

    def _invalidate(self, a, b):
        if self._cache:
            with self._lock:
                self._cache.pop((a, b), None)
                self.stats.resident = len(self._cache)

    def iter_row_blocks(self, rows_per_block):
        for r0 in range(0, self.n_rows, rows_per_block):
            r1 = min(self.n_rows, r0 + rows_per_block)
            yield r0, self.read_block(r0, r1, 0, self.n_cols)


# ---------------------------------------------------------------------- S2D
def _chunk_offsets(n_rows, n_cols, chunk_shape, itemsize, start):
    cr, cc = chunk_shape
    offsets = []
    pos = start
    for a in range(-(-n_rows // cr)):
        rows = min(cr, n_rows - a * cr)
        for b in range(-(-n_cols // cc)):
            offsets.append(pos)
            pos += rows * min(cc, n_cols - b * cc) * itemsize
    return np.asarray(offsets, dtype=np.int64), pos


def create_dataset(n_rows, n_cols, value_kind, chunk_shape, path,
                   domain_tag="time-time", meta: S2DMeta | None = None) -> DatasetHandle:
    """Create a zero-filled S2D dataset and return a writable handle."""
    n_rows, n_cols = int(n_rows), int(n_cols)
    if n_rows <= 0 or n_cols <= 0:
        raise StoreError(f"zero dimension: {n_rows}x{n_cols}")
    if value_kind not in VALUE_KINDS:
        raise StoreError(f"unknown value_kind {value_kind!r}")
    if domain_tag not in DOMAIN_TAGS:
        raise StoreError(f"unknown domain_tag {domain_tag!r}")
    cr, cc = int(chunk_shape[0]), int(chunk_shape[1])
    if cr <= 0 or cc <= 0:
        raise StoreError(f"invalid chunk shape {chunk_shape}")
    if cr > n_rows or cc > n_cols:
        raise StoreError(f"chunk {chunk_shape} larger than dataset {n_rows}x{n_cols}")
    meta = meta if meta is not None else S2DMeta()
    code, dtype = VALUE_KINDS[value_kind]
    grid = (-(-n_rows // cr)) * (-(-n_cols // cc))
    table_start = HEADER.size
    offsets, total = _chunk_offsets(n_rows, n_cols, (cr, cc), dtype.itemsize,
                                    table_start + 8 * grid)
    header = HEADER.pack(MAGIC, VERSION, n_rows, n_cols, code, DOMAIN_TAGS[domain_tag], cr, cc,
                         meta.cal_A_h, meta.cal_B_h, meta.cal_A_v, meta.cal_B_v,
                         meta.modulation_offset_hz, MODES[meta.mode])
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(offsets.astype("<u8").tobytes())
            fh.truncate(total)
    except OSError as exc:
        raise StoreError(f"cannot create {path}: {exc.strerror}") from exc
    layout = _Layout(dtype, offsets, table_start)
    return DatasetHandle(path, n_rows, n_cols, value_kind, (cr, cc), domain_tag, layout,
                         writable=True, meta=meta)


def update_meta(handle: DatasetHandle, meta: S2DMeta) -> None:
    """Rewrite calibration constants and mode in an S2D header."""
    with open(handle.path, "r+b") as fh:
        head = bytearray(fh.read(HEADER.size))
        fields = list(HEADER.unpack(bytes(head)))
        fields[8:14] = [meta.cal_A_h, meta.cal_B_h, meta.cal_A_v, meta.cal_B_v,
                        meta.modulation_offset_hz, MODES[meta.mode]]
        fh.seek(0)
        fh.write(HEADER.pack(*fields))
    handle.meta = meta


def open_dataset(path, writable=False) -> DatasetHandle:
    path = Path(path)
    try:
        size = path.stat().st_size
        with open(path, "rb") as fh:
            head = fh.read(HEADER.size)
            if len(head) < HEADER.size:
                raise StoreError(f"{path}: truncated header", len(head))
            (magic, version, n_rows, n_cols, kind, domain, cr, cc,
             a_h, b_h, a_v, b_v, offset_hz, mode) = HEADER.unpack(head)
            if magic != MAGIC:
                raise StoreError(f"{path}: bad magic {magic!r}", 0)
            if version != VERSION:
                raise StoreError(f"{path}: unsupported version {version}", 4)
            if kind not in _KIND_BY_CODE:
                raise StoreError(f"{path}: unknown value_kind code {kind}", 24)
            if domain not in _DOMAIN_BY_CODE:
                raise StoreError(f"{path}: unknown domain_tag code {domain}", 25)
            if mode not in _MODE_BY_CODE:
                raise StoreError(f"{path}: unknown mode code {mode}", HEADER.size - 1)
            if n_rows == 0 or n_cols == 0 or cr == 0 or cc == 0 or cr > n_rows or cc > n_cols:
                raise StoreError(f"{path}: inconsistent dimensions", 8)
            grid = (-(-n_rows // cr)) * (-(-n_cols // cc))
            table = fh.read(8 * grid)
            if len(table) != 8 * grid:
                raise StoreError(f"{path}: truncated chunk table", HEADER.size + len(table))
    except OSError as exc:
        raise StoreError(f"cannot open {path}: {exc.strerror}") from exc
    value_kind = _KIND_BY_CODE[kind]
    dtype = VALUE_KINDS[value_kind][1]
    offsets = np.frombuffer(table, dtype="<u8").astype(np.int64)
    _, expected_end = _chunk_offsets(n_rows, n_cols, (cr, cc), dtype.itemsize,
                                     HEADER.size + 8 * grid)
    if size < expected_end:
        raise StoreError(f"{path}: file shorter than declared data ({size} < {expected_end})", size)
    meta = S2DMeta(a_h, b_h, a_v, b_v, offset_hz, _MODE_BY_CODE[mode])
    return DatasetHandle(path, n_rows, n_cols, value_kind, (cr, cc), _DOMAIN_BY_CODE[domain],
                         _Layout(dtype, offsets, HEADER.size), writable=writable, meta=meta)


# ---------------------------------------------------------------------- T2D
def _params_to_header(params: AcquisitionParams, encoding, data_file) -> dict:
    return {
        "n_t1": params.n_t1,
        "dt1_us": params.dt1 * 1e6,
        "n_t2": params.n_t2,
        "sample_rate_hz": float(params.sample_rate_t2),
        "encoding": encoding,
        "data_file": data_file,
        "cal_a_hz_th": float(params.cal_A),
        "cal_b_hz2_th": float(params.cal_B),
        "modulation_offset_hz": float(params.modulation_offset),
        "mz_min_h": float(params.mz_min_h),
        "mz_max_h": float(params.mz_max_h),
        "mz_max_v": float(params.mz_max_v),
    }


class T2DWriter:
    """Streams transients, row block by row block, into a T2D directory."""

    def __init__(self, directory, params: AcquisitionParams, encoding="f32le",
                 data_file="transients.bin"):
        if encoding not in RAW_ENCODINGS:
            raise StoreError(f"unknown sample encoding {encoding!r}")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.params = params
        self.encoding = encoding
        self.dtype = RAW_ENCODINGS[encoding]
        self.header_path = self.directory / "header.t2d"
        self.data_path = self.directory / data_file
        self.rows_written = 0
        keyvalue.write_file(self.header_path, _params_to_header(params, encoding, data_file),
                            header="T2D raw transients")
        self._fh = open(self.data_path, "wb")

    def write_rows(self, block) -> np.ndarray:
        """Append rows; returns them as stored (after the cast to the encoding)."""
        block = np.atleast_2d(np.asarray(block))
        if block.shape[1] != self.params.n_t2:
            raise StoreError(f"transient length {block.shape[1]} != n_t2 {self.params.n_t2}")
        if self.dtype.kind == "i":
            stored = np.rint(block).astype(self.dtype)
        else:
            stored = block.astype(self.dtype)
        self._fh.write(stored.tobytes())
        self.rows_written += block.shape[0]
        return stored

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            if self.rows_written != self.params.n_t1:
                raise StoreError(f"wrote {self.rows_written} transients, header declares "
                                 f"{self.params.n_t1}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *exc):
        if exc_type is None:
            self.close()
        elif self._fh is not None:
            self._fh.close()
            self._fh = None


def write_t2d(directory, data, params: AcquisitionParams, encoding="f32le") -> Path:
    with T2DWriter(directory, params, encoding) as w:
        w.write_rows(data)
    return w.header_path


def read_t2d_header(header_path):
    header_path = Path(header_path)
    if header_path.is_dir():
        header_path = header_path / "header.t2d"
    try:
        kv = keyvalue.read_file(header_path)
    except OSError as exc:
        raise StoreError(f"cannot read {header_path}: {exc.strerror}") from exc
    missing = [k for k in T2D_MANDATORY if k not in kv]
    if missing:
        raise StoreError(f"{header_path}: missing mandatory key(s) {', '.join(missing)}")
    encoding = kv["encoding"].lower()
    if encoding not in RAW_ENCODINGS:
        raise StoreError(f"{header_path}: unknown sample encoding {encoding!r}")
    n_t1 = int(kv["n_t1"])
    if n_t1 <= 0:
        raise StoreError(f"{header_path}: zero rows")
    try:
        params = AcquisitionParams(
            n_t1=n_t1,
            dt1=float(kv["dt1_us"]) * 1e-6,
            n_t2=int(kv["n_t2"]),
            sample_rate_t2=float(kv["sample_rate_hz"]),
            cal_A=float(kv.get("cal_a_hz_th", 0.0)),
            cal_B=float(kv.get("cal_b_hz2_th", 0.0)),
            modulation_offset=float(kv.get("modulation_offset_hz", 0.0)),
            mz_min_h=float(kv.get("mz_min_h", 0.0)),
            mz_max_h=float(kv.get("mz_max_h", 0.0)),
            mz_max_v=float(kv.get("mz_max_v", 0.0)),
        )
    except ValueError as exc:
        raise StoreError(f"{header_path}: {exc}") from exc
    return params, encoding, header_path.parent / kv["data_file"]


def import_raw(header_path) -> tuple[DatasetHandle, AcquisitionParams]:
    """Open a T2D directory (or its ``header.t2d``) as a read-only dataset.

    Row ``i`` of the handle is the transient acquired at t1 = i*dt1.
    """
    params, encoding, data_path = read_t2d_header(header_path)
    dtype = RAW_ENCODINGS[encoding]
    expected = params.n_t1 * params.n_t2 * dtype.itemsize
    try:
        actual = data_path.stat().st_size
    except OSError as exc:
        raise StoreError(f"cannot read {data_path}: {exc.strerror}") from exc
    if actual != expected:
        raise StoreError(f"{data_path}: size {actual} bytes, header implies {expected}",
                         min(actual, expected))
    row_bytes = params.n_t2 * dtype.itemsize
    offsets = np.arange(params.n_t1, dtype=np.int64) * row_bytes
    kind = "real-f32" if encoding == "f32le" else "real-i32"
    handle = DatasetHandle(data_path, params.n_t1, params.n_t2, kind, (1, params.n_t2),
                           "time-time", _Layout(dtype, offsets, 0), writable=False)
    return handle, params
