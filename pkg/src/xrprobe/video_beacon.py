"""Matrix-barcode timestamp beacons for the video path.

A beacon is a 21x21 grid of boolean modules (True = dark) carrying a 64-bit
big-endian millisecond timestamp plus a CRC-16 in its first 80 data modules.
Three 7x7 finder patterns (dark border, light ring, dark 3x3 core) sit in the
top-left, top-right and bottom-left corners, each fenced off by a one-module
light separator; remaining data modules are filled with a checkerboard so the
code keeps dark/light texture regardless of payload.

Detection assumes axis-aligned codes on a flat background: finder candidates
come from a 1:1:3:1:1 dark/light run-length scan, the module pitch from the
finder geometry, and each module is sampled at its center against the frame's
min/max midpoint threshold. No perspective correction is attempted.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clocks import Timestamp

GRID_SIZE = 21
FINDER_SIZE = 7
PAYLOAD_BITS = 80
TS_BITS = 64
DEFAULT_BEACON_INTERVAL_MS = 10
DEFAULT_SCALE = 8
DEFAULT_QUIET = 4

CRC_POLY = 0x1021
CRC_INIT = 0xFFFF


class FinderNotFound(ValueError):
    """No valid finder triple located in the frame."""


class CrcMismatch(ValueError):
    """Payload read back from the frame fails its checksum."""


def crc16(data: bytes) -> int:
    """CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xor-out."""
    crc = CRC_INIT
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            if crc & 0x8000:
                crc = ((crc << 1) ^ CRC_POLY) & 0xFFFF
            else:
                crc = (crc << 1) & 0xFFFF
    return crc


def _finder_pattern() -> np.ndarray:
    pat = np.zeros((FINDER_SIZE, FINDER_SIZE), dtype=bool)
    pat[0, :] = pat[-1, :] = pat[:, 0] = pat[:, -1] = True
    pat[2:5, 2:5] = True
    return pat


_FINDER = _finder_pattern()

# Finder zones plus their one-module separators. Everything else is data.
_RESERVED = np.zeros((GRID_SIZE, GRID_SIZE), dtype=bool)
_RESERVED[0:8, 0:8] = True
_RESERVED[0:8, 13:21] = True
_RESERVED[13:21, 0:8] = True

_DATA_POSITIONS: list[tuple[int, int]] = [
    (r, c) for r in range(GRID_SIZE) for c in range(GRID_SIZE) if not _RESERVED[r, c]
]

_FINDER_ORIGINS = ((0, 0), (0, GRID_SIZE - FINDER_SIZE), (GRID_SIZE - FINDER_SIZE, 0))


@dataclass(frozen=True, eq=False)
class ModuleGrid:
    """21x21 beacon; modules[r, c] True means dark."""

    modules: np.ndarray
    payload_ts: int

    def __post_init__(self):
        if self.modules.shape != (GRID_SIZE, GRID_SIZE):
            raise ValueError("module grid must be 21x21")


@dataclass(frozen=True, eq=False)
class PixelBuffer:
    """8-bit grayscale frame, row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise ValueError("pixels must be a 2-D uint8 array")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class VideoDetection:
    device_id: str
    emission_ts: Timestamp
    playout_ts: Timestamp


def _reference_grid() -> np.ndarray:
    """Finder patterns and separators on a light field; data region light."""
    modules = np.zeros((GRID_SIZE, GRID_SIZE), dtype=bool)
    for r0, c0 in _FINDER_ORIGINS:
        modules[r0 : r0 + FINDER_SIZE, c0 : c0 + FINDER_SIZE] = _FINDER
    return modules


_REFERENCE = _reference_grid()


def encode_beacon(ts: Timestamp) -> ModuleGrid:
    """Build the beacon grid for a millisecond timestamp.

    The first 80 data modules (row-major, skipping finder zones) carry the
    64-bit timestamp then its CRC-16, MSB first, bit 1 = dark. Remaining data
    modules are checkerboard: dark iff (row + col) is even.
    """
    if not 0 <= ts < 1 << TS_BITS:
        raise ValueError("timestamp must fit in 64 bits")
    payload = int(ts).to_bytes(8, "big")
    word = (int(ts) << 16) | crc16(payload)
    modules = _REFERENCE.copy()
    for i, (r, c) in enumerate(_DATA_POSITIONS):
        if i < PAYLOAD_BITS:
            modules[r, c] = bool((word >> (PAYLOAD_BITS - 1 - i)) & 1)
        else:
            modules[r, c] = (r + c) % 2 == 0
    return ModuleGrid(modules=modules, payload_ts=int(ts))


def grid_timestamp(modules: np.ndarray) -> Timestamp:
    """Reassemble and checksum the 80-bit payload of a sampled grid."""
    word = 0
    for r, c in _DATA_POSITIONS[:PAYLOAD_BITS]:
        word = (word << 1) | int(bool(modules[r, c]))
    ts = word >> 16
    crc = word & 0xFFFF
    if crc16(ts.to_bytes(8, "big")) != crc:
        raise CrcMismatch(f"payload checksum failed (read 0x{crc:04X})")
    return ts


def rasterize(grid: ModuleGrid, scale: int = DEFAULT_SCALE, quiet: int = DEFAULT_QUIET) -> PixelBuffer:
    """Render dark modules as 0 and light/quiet area as 255 at ``scale`` px per module."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if quiet < 0:
        raise ValueError("quiet zone must be >= 0")
    blocks = np.kron(grid.modules, np.ones((scale, scale), dtype=bool))
    img = np.where(blocks, 0, 255).astype(np.uint8)
    pad = quiet * scale
    if pad:
        img = np.pad(img, pad, constant_values=255)
    return PixelBuffer(pixels=img)


def blank_frame(scale: int = DEFAULT_SCALE, quiet: int = DEFAULT_QUIET) -> PixelBuffer:
    """All-light frame of the same geometry as a rasterized beacon."""
    side = (GRID_SIZE + 2 * quiet) * scale
    return PixelBuffer(pixels=np.full((side, side), 255, dtype=np.uint8))


def beacon_emission(stream_start_ts: Timestamp, capture_ts: Timestamp,
                    interval_ms: int = DEFAULT_BEACON_INTERVAL_MS) -> Timestamp:
    """Timestamp of the newest beacon at or before ``capture_ts``.

    Beacons tick at exact multiples of the interval from stream start, so a
    frame always carries an emission at most one interval old.
    """
    if capture_ts < stream_start_ts:
        raise ValueError("capture precedes stream start")
    ticks = (capture_ts - stream_start_ts) // interval_ms
    return stream_start_ts + ticks * interval_ms


# --- detection ---------------------------------------------------------------

_RATIO = np.array([1.0, 1.0, 3.0, 1.0, 1.0])
_RATIO_TOL = np.array([0.5, 0.5, 0.8, 0.5, 0.5])


def _runs(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run-length decomposition of a 1-D bool array -> (starts, lengths)."""
    change = np.flatnonzero(values[1:] != values[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [values.size]))
    return starts, ends - starts


def _quintet_hits(starts: np.ndarray, lengths: np.ndarray, first_dark: bool):
    """Centers/units of every dark-led 1:1:3:1:1 run quintet in one scanline."""
    n = lengths.size
    if n < 5:
        return []
    win = np.lib.stride_tricks.sliding_window_view(lengths, 5)
    units = win.sum(axis=1) / 7.0
    tol = np.maximum(units[:, None] * _RATIO_TOL, 0.6)
    ok = (np.abs(win - _RATIO * units[:, None]) <= tol).all(axis=1)
    idx = np.flatnonzero(ok)
    dark_parity = 0 if first_dark else 1
    idx = idx[idx % 2 == dark_parity]
    return [
        (starts[i + 2] + lengths[i + 2] / 2.0, units[i]) for i in idx
    ]


def _line_center(line: np.ndarray, hint: int, unit: float):
    """Center/unit of the 1:1:3:1:1 quintet whose middle run covers ``hint``."""
    starts, lengths = _runs(line)
    i = int(np.searchsorted(starts, hint, "right")) - 1
    if i < 2 or i + 2 >= starts.size or not line[starts[i]]:
        return None
    win = lengths[i - 2 : i + 3].astype(float)
    u = win.sum() / 7.0
    if abs(u - unit) > 0.6 * max(u, unit):
        return None
    tol = np.maximum(u * _RATIO_TOL, 0.6)
    if not (np.abs(win - _RATIO * u) <= tol).all():
        return None
    return starts[i] + lengths[i] / 2.0, u


def _vertical_center(dark: np.ndarray, x: int, y_hint: int, unit: float):
    """Confirm the 1:1:3:1:1 pattern vertically through (x, y_hint)."""
    return _line_center(dark[:, x], y_hint, unit)


def _refine_center(dark: np.ndarray, cx: float, cy: float, unit: float):
    """Walk a candidate onto the exact center of its run quintet, both axes.

    A genuine finder candidate lands inside the core, so the vertical and
    horizontal quintets through it converge on the true center; refining
    before clustering keeps payload patterns that mimic the finder signature
    from dragging a genuine cluster's mean off center.
    """
    vert = _line_center(dark[:, int(round(cx))], int(round(cy)), unit)
    if vert is None:
        return None
    cy2, vunit = vert
    horiz = _line_center(dark[int(round(cy2))], int(round(cx)), vunit)
    if horiz is None:
        return None
    cx2, hunit = horiz
    vert2 = _line_center(dark[:, int(round(cx2))], int(round(cy2)), hunit)
    if vert2 is None:
        return None
    cy3, vunit2 = vert2
    return cx2, cy3, (hunit + vunit2) / 2.0


def _scan_finders(dark: np.ndarray, stride: int) -> list[tuple[float, float, float]]:
    """Candidate finder centers (cx, cy, unit) from a strided row scan."""
    h = dark.shape[0]
    found: list[tuple[float, float, float]] = []
    for y in range(0, h, stride):
        row = dark[y]
        starts, lengths = _runs(row)
        for cx, unit in _quintet_hits(starts, lengths, bool(row[0])):
            vert = _vertical_center(dark, int(cx), y, unit)
            if vert is None:
                continue
            cy, vunit = vert
            found.append((cx, cy, (unit + vunit) / 2.0))
    return found


def _cluster(candidates: list[tuple[float, float, float]], radius_units: float = 3.5):
    clusters: list[list[float]] = []  # [sum_x, sum_y, sum_u, n]
    for cx, cy, u in candidates:
        for cl in clusters:
            n = cl[3]
            if (abs(cl[0] / n - cx) <= radius_units * u
                    and abs(cl[1] / n - cy) <= radius_units * u):
                cl[0] += cx
                cl[1] += cy
                cl[2] += u
                cl[3] += 1
                break
        else:
            clusters.append([cx, cy, u, 1])
    return [(c[0] / c[3], c[1] / c[3], c[2] / c[3]) for c in clusters]


def _triples(clusters):
    """Yield (tl, tr, bl) combinations whose geometry fits an axis-aligned code."""
    for tl in clusters:
        u = tl[2]
        for tr in clusters:
            if tr is tl:
                continue
            if abs(tr[1] - tl[1]) > 2.0 * u or tr[0] < tl[0] + 7.0 * u:
                continue
            for bl in clusters:
                if bl is tl or bl is tr:
                    continue
                if abs(bl[0] - tl[0]) > 2.0 * u or bl[1] < tl[1] + 7.0 * u:
                    continue
                span_x = tr[0] - tl[0]
                span_y = bl[1] - tl[1]
                if abs(span_x - span_y) > 3.0 * u:
                    continue
                yield tl, tr, bl


def _sample_grid(dark: np.ndarray, tl, tr, bl) -> np.ndarray | None:
    """Sample all 441 module centers given the three finder centers."""
    mw = (tr[0] - tl[0]) / 14.0
    mh = (bl[1] - tl[1]) / 14.0
    if mw <= 0.5 or mh <= 0.5:
        return None
    ox = tl[0] - 3.5 * mw
    oy = tl[1] - 3.5 * mh
    xs = np.floor(ox + (np.arange(GRID_SIZE) + 0.5) * mw).astype(int)
    ys = np.floor(oy + (np.arange(GRID_SIZE) + 0.5) * mh).astype(int)
    h, w = dark.shape
    if xs[0] < 0 or ys[0] < 0 or xs[-1] >= w or ys[-1] >= h:
        return None
    return dark[ys[:, None], xs[None, :]]


def _structure_ok(modules: np.ndarray) -> bool:
    # Finder zones (pattern plus light separators) must match exactly.
    return bool((modules[_RESERVED] == _REFERENCE[_RESERVED]).all())


def detect_decode(frame: PixelBuffer, playout_ts: Timestamp, device_id: str = "") -> VideoDetection:
    """Locate the beacon in a frame and decode its emission timestamp.

    Raises FinderNotFound when no structurally valid code is present and
    CrcMismatch when the payload is damaged. The frame threshold is the
    midpoint of its min/max sample, which makes decoding invariant to any
    monotone affine remap of the gray levels with adequate separation.
    """
    px = frame.pixels
    if px.size == 0:
        raise FinderNotFound("empty frame")
    lo = int(px.min())
    hi = int(px.max())
    if hi == lo:
        raise FinderNotFound("uniform frame")
    dark = px < (lo + hi) / 2.0

    last_error: Exception = FinderNotFound("no finder triple")
    # a code filling the frame has a finder core >= 3*min(h,w)/37 tall, so the
    # adaptive first pass still crosses every core; the 4 and 1 passes cover
    # small codes inside large frames
    adaptive = max(4, min(dark.shape) // 32)
    strides = (adaptive, 4, 1) if adaptive > 4 else (4, 1)
    for stride in strides:
        # candidates from the same finder already agree to sub-module
        # precision (the vertical pass centers them), so dedupe tight before
        # the refinement walk; false payload hits stay in their own clusters
        tight = _cluster(_scan_finders(dark, stride), 0.75)
        clusters = []
        for cand in tight:
            refined = _refine_center(dark, *cand)
            clusters.append(refined if refined is not None else cand)
        for tl, tr, bl in _triples(clusters):
            modules = _sample_grid(dark, tl, tr, bl)
            if modules is None or not _structure_ok(modules):
                continue
            try:
                ts = grid_timestamp(modules)
            except CrcMismatch as exc:
                last_error = exc
                continue
            return VideoDetection(device_id=device_id, emission_ts=ts, playout_ts=playout_ts)
        if isinstance(last_error, CrcMismatch):
            break
    raise last_error


# --- frame sequence I/O -------------------------------------------------------

FRAME_NAME = "frame_%06d.pgm"
MANIFEST_NAME = "manifest.json"

_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(path: str | Path, frame: PixelBuffer) -> None:
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + frame.pixels.tobytes())


def read_pgm(path: str | Path) -> PixelBuffer:
    blob = Path(path).read_bytes()
    m = _PGM_HEADER.match(blob)
    if not m:
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=m.end())
    if data.size != width * height:
        raise ValueError(f"{path}: truncated pixel data")
    return PixelBuffer(pixels=data.reshape(height, width).copy())


@dataclass(frozen=True)
class FrameManifest:
    """Sidecar for a PGM frame sequence: playout timing and identity."""

    device_id: str
    fps: float
    start_ts: Timestamp
    frame_count: int
    session: dict = field(default_factory=dict)

    def frame_playout(self, index: int) -> Timestamp:
        return self.start_ts + round(index * 1000.0 / self.fps)


def write_frame_sequence(directory: str | Path, frames: list[PixelBuffer],
                         manifest: FrameManifest) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if manifest.frame_count != len(frames):
        raise ValueError("manifest frame_count disagrees with frames")
    for i, frame in enumerate(frames):
        write_pgm(directory / (FRAME_NAME % i), frame)
    doc = {
        "device_id": manifest.device_id,
        "fps": manifest.fps,
        "start_ts": manifest.start_ts,
        "frame_count": manifest.frame_count,
        "session": manifest.session,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_frame_manifest(directory: str | Path) -> FrameManifest:
    doc = json.loads((Path(directory) / MANIFEST_NAME).read_text())
    return FrameManifest(
        device_id=doc["device_id"],
        fps=float(doc["fps"]),
        start_ts=int(doc["start_ts"]),
        frame_count=int(doc["frame_count"]),
        session=doc.get("session", {}),
    )


def frame_paths(directory: str | Path, count: int) -> list[Path]:
    return [Path(directory) / (FRAME_NAME % i) for i in range(count)]
