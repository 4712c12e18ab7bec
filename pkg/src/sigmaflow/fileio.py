"""On-disk formats: PGM label maps in, PPM renderings out, binary assignment
and metric field files, CSV diagnostics, and dataset manifests.

All formats are bit-exact and documented here:

* label maps: plain or raw PGM (P2/P5), gray value = label index;
* assignment fields: ASCII header ``AMF1 H W c`` + newline, then H*W*c
  little-endian float64, node-major then channel;
* metric fields: ASCII header ``MTF1 H W h|hinv`` + newline, then H*W*4
  little-endian float64 (2x2 matrices row-major per node);
* renderings: binary PPM (P6), fixed 20-color label palette, grayscale with
  optional histogram equalization for diagnostic maps, error masks with
  wrong pixels exactly (0, 0, 0).

Writes go through a temp-file-then-rename so readers never observe partial
files.
"""
from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import FormatError, GeometryDomainError
from .grid import MetricField, TorusGrid

Array = np.ndarray

#: fixed label palette (RGB), 20 visually distinct colors
PALETTE20 = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
], dtype=np.uint8)


def atomic_write(path, data: bytes) -> None:
    """Write bytes to ``path`` via a same-directory temp file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PGM label maps
# ---------------------------------------------------------------------------

class _Tokens:
    """Whitespace/comment-aware tokenizer that tracks byte offsets."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def _skip_separators(self):
        while self.pos < len(self.blob):
            ch = self.blob[self.pos:self.pos + 1]
            if ch.isspace():
                self.pos += 1
            elif ch == b"#":
                nl = self.blob.find(b"\n", self.pos)
                self.pos = len(self.blob) if nl < 0 else nl + 1
            else:
                return

    def next_token(self) -> tuple[bytes, int]:
        self._skip_separators()
        if self.pos >= len(self.blob):
            raise FormatError("unexpected end of header", offset=self.pos)
        start = self.pos
        while (self.pos < len(self.blob)
               and not self.blob[self.pos:self.pos + 1].isspace()):
            self.pos += 1
        return self.blob[start:self.pos], start

    def next_int(self, what: str) -> tuple[int, int]:
        tok, off = self.next_token()
        try:
            return int(tok), off
        except ValueError:
            raise FormatError(f"malformed {what} {tok!r}", offset=off)


def read_label_map(path, c: int | None = None) -> Array:
    """Read a P2/P5 PGM into an (H, W) int64 label array.

    Pixels above the declared maxval, or at/above ``c`` when given, are
    parse errors reported with their byte offset.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    toks = _Tokens(blob)
    magic, off = toks.next_token()
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"not a PGM file (magic {magic!r})", offset=off)
    width, _ = toks.next_int("width")
    height, _ = toks.next_int("height")
    maxval, off_mv = toks.next_int("maxval")
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} out of range", offset=off_mv)
    if c is not None and maxval < c - 1:
        raise FormatError(f"maxval {maxval} cannot hold {c} labels",
                          offset=off_mv)
    n = width * height
    if magic == b"P2":
        vals = np.empty(n, dtype=np.int64)
        for i in range(n):
            vals[i], off = toks.next_int("pixel")
            if vals[i] > maxval:
                raise FormatError(f"pixel {vals[i]} exceeds maxval {maxval}",
                                  offset=off)
    else:
        data_start = toks.pos + 1  # single whitespace byte after maxval
        bpp = 1 if maxval < 256 else 2
        end = data_start + n * bpp
        if end > len(blob):
            raise FormatError(
                f"raster truncated: need {n * bpp} bytes", offset=len(blob))
        dt = np.uint8 if bpp == 1 else np.dtype(">u2")
        vals = np.frombuffer(blob[data_start:end], dtype=dt).astype(np.int64)
        over = np.flatnonzero(vals > maxval)
        if over.size:
            raise FormatError(
                f"pixel {vals[over[0]]} exceeds maxval {maxval}",
                offset=data_start + int(over[0]) * bpp)
    if c is not None and vals.max(initial=0) >= c:
        bad = int(np.argmax(vals >= c))
        raise FormatError(f"label {vals[bad]} out of range for c={c}",
                          offset=None)
    return vals.reshape(height, width)


def write_label_map(labels_hw: Array, path, maxval: int | None = None,
                    binary: bool = True) -> None:
    """Write an (H, W) label array as P5 (default) or P2 PGM."""
    labels_hw = np.asarray(labels_hw)
    if labels_hw.ndim != 2 or labels_hw.min(initial=0) < 0:
        raise GeometryDomainError("labels must be a nonnegative (H, W) array")
    H, W = labels_hw.shape
    mv = int(maxval) if maxval is not None else max(1, int(labels_hw.max()))
    if labels_hw.max(initial=0) > mv:
        raise GeometryDomainError("label exceeds requested maxval")
    if binary:
        header = f"P5\n{W} {H}\n{mv}\n".encode()
        if mv < 256:
            raster = labels_hw.astype(np.uint8).tobytes()
        else:
            raster = labels_hw.astype(">u2").tobytes()
        atomic_write(path, header + raster)
    else:
        lines = [f"P2\n{W} {H}\n{mv}"]
        for row in labels_hw:
            lines.append(" ".join(str(int(v)) for v in row))
        atomic_write(path, ("\n".join(lines) + "\n").encode())


# ---------------------------------------------------------------------------
# binary field formats
# ---------------------------------------------------------------------------

def write_assignment(S: Array, grid: TorusGrid, path) -> None:
    S = np.asarray(S, dtype=float)
    if S.shape[0] != grid.n_nodes or S.ndim != 2:
        raise GeometryDomainError("assignment shape does not match grid")
    header = f"AMF1 {grid.H} {grid.W} {S.shape[1]}\n".encode("ascii")
    atomic_write(path, header + np.ascontiguousarray(S, dtype="<f8").tobytes())


def read_assignment(path, validate: bool = True):
    """Read an AMF1 file; returns (grid, S).  Validation checks simplex rows
    (positive entries, sums within 1e-9); disable with ``validate=False``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("missing AMF1 header line", offset=0)
    parts = blob[:nl].split()
    if len(parts) != 4 or parts[0] != b"AMF1":
        raise FormatError("bad AMF1 header", offset=0)
    try:
        H, W, c = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError:
        raise FormatError("non-integer AMF1 header fields", offset=5)
    grid = TorusGrid(H, W)
    expected = nl + 1 + 8 * H * W * c
    if len(blob) != expected:
        raise FormatError(
            f"declared size needs {expected} bytes, file has {len(blob)}",
            offset=min(expected, len(blob)))
    S = np.frombuffer(blob[nl + 1:], dtype="<f8").reshape(H * W, c).copy()
    if validate:
        if not np.all(np.isfinite(S)) or S.min() <= 0:
            bad = int(np.argmin(S.min(axis=1)))
            raise FormatError(f"assignment row {bad} is not interior")
        err = np.abs(S.sum(axis=1) - 1.0)
        if err.max() > 1e-9:
            raise FormatError(
                f"assignment row {int(err.argmax())} does not sum to one")
    return grid, S


def write_metric(field: MetricField, path) -> None:
    header = (f"MTF1 {field.grid.H} {field.grid.W} "
              f"{field.interpretation}\n").encode("ascii")
    payload = np.ascontiguousarray(
        field.mats.reshape(field.grid.n_nodes, 4), dtype="<f8").tobytes()
    atomic_write(path, header + payload)


def read_metric(path, validate: bool = True) -> MetricField:
    """Read an MTF1 file; validation (symmetry, SPD per node) names the
    offending node.  ``validate=False`` skips the checks."""
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("missing MTF1 header line", offset=0)
    parts = blob[:nl].split()
    if len(parts) != 4 or parts[0] != b"MTF1":
        raise FormatError("bad MTF1 header", offset=0)
    interp = parts[3].decode("ascii", "replace")
    if interp not in ("h", "hinv"):
        raise FormatError(f"unknown metric interpretation {interp!r}", offset=0)
    try:
        H, W = int(parts[1]), int(parts[2])
    except ValueError:
        raise FormatError("non-integer MTF1 header fields", offset=5)
    grid = TorusGrid(H, W)
    expected = nl + 1 + 8 * H * W * 4
    if len(blob) != expected:
        raise FormatError(
            f"declared size needs {expected} bytes, file has {len(blob)}",
            offset=min(expected, len(blob)))
    mats = np.frombuffer(blob[nl + 1:], dtype="<f8").reshape(H * W, 2, 2).copy()
    return MetricField(grid, mats, interp, validate=validate)


# ---------------------------------------------------------------------------
# PPM rendering
# ---------------------------------------------------------------------------

def _write_ppm(rgb_hw3: Array, path) -> None:
    H, W = rgb_hw3.shape[:2]
    header = f"P6\n{W} {H}\n255\n".encode()
    atomic_write(path, header + rgb_hw3.astype(np.uint8).tobytes())


def render_labels(labels_hw: Array, path) -> None:
    """Fixed-palette rendering of a label map (palette repeats past 20)."""
    labels_hw = np.asarray(labels_hw)
    _write_ppm(PALETTE20[labels_hw % len(PALETTE20)], path)


def render_error_mask(labels_hw: Array, wrong_hw: Array, path) -> None:
    """Palette rendering with incorrectly labeled pixels exactly black."""
    rgb = PALETTE20[np.asarray(labels_hw) % len(PALETTE20)].copy()
    rgb[np.asarray(wrong_hw, dtype=bool)] = (0, 0, 0)
    _write_ppm(rgb, path)


def render_gray(values_hw: Array, path, equalize: bool = False) -> None:
    """Grayscale rendering of a scalar map, optionally histogram-equalized."""
    v = np.asarray(values_hw, dtype=float)
    if equalize:
        order = np.argsort(v, axis=None, kind="stable")
        ranks = np.empty(v.size)
        ranks[order] = np.arange(v.size)
        gray = (255.0 * ranks / max(v.size - 1, 1)).reshape(v.shape)
    else:
        lo, hi = float(v.min()), float(v.max())
        gray = np.zeros_like(v) if hi == lo else 255.0 * (v - lo) / (hi - lo)
    _write_ppm(np.repeat(np.rint(gray)[..., None], 3, axis=2), path)


def read_ppm(path) -> Array:
    """Read back a P6 file (used by tests and demos)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    toks = _Tokens(blob)
    magic, off = toks.next_token()
    if magic != b"P6":
        raise FormatError(f"not a P6 file (magic {magic!r})", offset=off)
    W, _ = toks.next_int("width")
    H, _ = toks.next_int("height")
    maxval, _ = toks.next_int("maxval")
    start = toks.pos + 1
    if len(blob) < start + 3 * H * W:
        raise FormatError("raster truncated", offset=len(blob))
    return np.frombuffer(blob[start:start + 3 * H * W],
                         dtype=np.uint8).reshape(H, W, 3).copy()


# ---------------------------------------------------------------------------
# CSV diagnostics and dataset manifests
# ---------------------------------------------------------------------------

def write_trajectory_csv(record, path) -> None:
    lines = ["time,lyapunov,mean_entropy,max_entropy,theta_l2"]
    for i, t in enumerate(record.times):
        lines.append(f"{t:.12g},{record.lyapunov[i]:.12g},"
                     f"{record.mean_entropy[i]:.12g},"
                     f"{record.max_entropy[i]:.12g},{record.theta_l2[i]:.12g}")
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def write_manifest(entries: list, directory) -> None:
    """Write ``index.tsv`` rows of (path, seed, split)."""
    lines = [f"{p}\t{s}\t{sp}" for p, s, sp in entries]
    atomic_write(os.path.join(directory, "index.tsv"),
                 ("\n".join(lines) + "\n").encode())


def read_manifest(directory) -> list:
    """Read ``index.tsv``; returns (labels_hw, seed, split) per entry."""
    index = os.path.join(directory, "index.tsv")
    out = []
    with open(index, "r", encoding="ascii") as fh:
        for ln_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"manifest line {ln_no + 1} malformed")
            labels = read_label_map(os.path.join(directory, parts[0]))
            out.append((labels, int(parts[1]), parts[2]))
    return out
