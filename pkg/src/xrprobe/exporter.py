"""Detection-log persistence, pull-style metrics exposition, and the
latency-driven quality adaptation hook.

Log format: JSON lines, one detection per line, fields
{media, device, emission_ts, playout_ts, slot, frequency?, confidence?}.
Exposition format: one `name{label="value"} number` line per metric, all
metric names prefixed `xr_`, lines sorted lexicographically so scrapes
are stable and diffable.
"""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import dataclass, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable

from .clocks import Timestamp
from .metrics import AUDIO, VIDEO


class ParseError(ValueError):
    """Malformed detection log; carries the 1-based offending line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class DetectionRecord:
    """One decoded beacon observation, either medium."""

    media: str
    device: str
    emission_ts: Timestamp
    playout_ts: Timestamp
    slot: int | None = None
    frequency: float | None = None
    confidence: float | None = None


def record_to_dict(rec: DetectionRecord) -> dict:
    doc = {
        "media": rec.media,
        "device": rec.device,
        "emission_ts": rec.emission_ts,
        "playout_ts": rec.playout_ts,
        "slot": rec.slot,
    }
    if rec.frequency is not None:
        doc["frequency"] = rec.frequency
    if rec.confidence is not None:
        doc["confidence"] = rec.confidence
    return doc


def write_log(path: str | Path, records: Iterable[DetectionRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec), sort_keys=True))
            fh.write("\n")


_REQUIRED = ("media", "device", "emission_ts", "playout_ts")


def read_log(path: str | Path) -> list[DetectionRecord]:
    records: list[DetectionRecord] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(doc, dict):
                raise ParseError(line_no, "record must be a JSON object")
            for key in _REQUIRED:
                if key not in doc:
                    raise ParseError(line_no, f"missing field {key!r}")
            if doc["media"] not in (VIDEO, AUDIO):
                raise ParseError(line_no, f"unknown media {doc['media']!r}")
            try:
                records.append(
                    DetectionRecord(
                        media=doc["media"],
                        device=str(doc["device"]),
                        emission_ts=int(doc["emission_ts"]),
                        playout_ts=int(doc["playout_ts"]),
                        slot=None if doc.get("slot") is None else int(doc["slot"]),
                        frequency=None if doc.get("frequency") is None else float(doc["frequency"]),
                        confidence=None if doc.get("confidence") is None else float(doc["confidence"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ParseError(line_no, str(exc)) from exc
    return records


# --- snapshot and exposition ----------------------------------------------------

@dataclass(frozen=True)
class MetricsSnapshot:
    """Immutable view of the latest per-device gauges and cumulative counters."""

    m2p_ms: dict[str, float]
    m2e_ms: dict[str, float]
    skew_ms: dict[str, float]
    slot_counts: dict[tuple[str, int], int]
    tallies: dict[str, int]


def snapshot_from_records(records: Iterable[DetectionRecord],
                          tally: Counter | None = None) -> MetricsSnapshot:
    """Latest-latency gauges per device plus per-slot detection counters."""
    m2p: dict[str, float] = {}
    m2e: dict[str, float] = {}
    slot_counts: Counter = Counter()
    tallies: Counter = Counter(tally or {})
    for rec in records:
        latency = float(rec.playout_ts - rec.emission_ts)
        if latency < 0:
            tallies["negative_latency"] += 1
            continue
        if rec.media == VIDEO:
            m2p[rec.device] = latency
        else:
            m2e[rec.device] = latency
        if rec.slot is not None:
            slot_counts[(rec.media, rec.slot)] += 1
    skew = {dev: m2p[dev] - m2e[dev] for dev in m2p.keys() & m2e.keys()}
    return MetricsSnapshot(
        m2p_ms=m2p,
        m2e_ms=m2e,
        skew_ms=skew,
        slot_counts=dict(slot_counts),
        tallies=dict(tallies),
    )


def _num(value: float) -> str:
    if value == int(value):
        return str(int(value))
    return repr(value)


_COUNTER_NAMES = {
    "crc_mismatch": "xr_crc_failures_total",
    "finder_not_found": "xr_finder_failures_total",
    "unknown_tone": "xr_unknown_tones_total",
    "ambiguous": "xr_ambiguous_tones_total",
    "negative_latency": "xr_negative_latencies_total",
    "clock_skew_suspected": "xr_negative_latencies_total",
}


def render_exposition(snapshot: MetricsSnapshot) -> str:
    """Text exposition of a snapshot; empty snapshot renders an empty body."""
    lines: list[str] = []
    for device, value in snapshot.m2p_ms.items():
        lines.append(f'xr_m2p_latency_ms{{device="{device}"}} {_num(value)}')
    for device, value in snapshot.m2e_ms.items():
        lines.append(f'xr_m2e_latency_ms{{device="{device}"}} {_num(value)}')
    for device, value in snapshot.skew_ms.items():
        lines.append(f'xr_intra_media_skew_ms{{device="{device}"}} {_num(value)}')
    for (media, slot), count in snapshot.slot_counts.items():
        lines.append(f'xr_slot_detections_total{{media="{media}",slot="{slot}"}} {count}')
    merged: Counter = Counter()
    for key, count in snapshot.tallies.items():
        merged[_COUNTER_NAMES.get(key, f"xr_{key}_total")] += count
    for name, count in merged.items():
        lines.append(f"{name} {count}")
    lines.sort()
    return "".join(line + "\n" for line in lines)


# --- quality adaptation ----------------------------------------------------------

@dataclass(frozen=True)
class QualityPolicy:
    """Two-threshold hysteresis for latency-driven quality stepping.

    ``levels`` is ordered from lowest to highest quality. Stepping down is
    triggered above ``step_down_threshold_ms``, stepping up below
    ``step_up_threshold_ms``, and either move needs ``dwell_s`` of residence
    at the current level first.
    """

    levels: tuple[str, ...] = ("low", "medium", "high")
    step_down_threshold_ms: float = 400.0
    step_up_threshold_ms: float = 250.0
    dwell_s: float = 10.0

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValueError("need at least two quality levels")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError("duplicate quality level names")
        if self.step_up_threshold_ms >= self.step_down_threshold_ms:
            raise ValueError("step_up threshold must sit below step_down threshold")
        if self.dwell_s < 0:
            raise ValueError("dwell must be non-negative")


@dataclass(frozen=True)
class QualityDecision:
    action: str  # "step_up" | "step_down" | "hold"
    target_level: str


def adapt_quality(window_mean_m2p_ms: float, current_level: str,
                  policy: QualityPolicy, dwell_elapsed_s: float) -> QualityDecision:
    """Pure stepping decision; clamps at the extremes, holds inside the band."""
    if current_level not in policy.levels:
        raise ValueError(f"unknown level {current_level!r}")
    idx = policy.levels.index(current_level)
    ready = dwell_elapsed_s >= policy.dwell_s
    if ready and window_mean_m2p_ms > policy.step_down_threshold_ms and idx > 0:
        return QualityDecision("step_down", policy.levels[idx - 1])
    if ready and window_mean_m2p_ms < policy.step_up_threshold_ms and idx < len(policy.levels) - 1:
        return QualityDecision("step_up", policy.levels[idx + 1])
    return QualityDecision("hold", current_level)


# --- control service --------------------------------------------------------------

class ExporterState:
    """Shared state behind the service: one writer, many readers."""

    def __init__(self, snapshot: MetricsSnapshot | None = None,
                 policy: QualityPolicy | None = None, level: str | None = None):
        self._lock = threading.Lock()
        self._snapshot = snapshot or MetricsSnapshot({}, {}, {}, {}, {})
        self._policy = policy or QualityPolicy()
        self._level = level if level is not None else self._policy.levels[-1]
        if self._level not in self._policy.levels:
            raise ValueError(f"unknown level {self._level!r}")

    def update_snapshot(self, snapshot: MetricsSnapshot) -> None:
        with self._lock:
            self._snapshot = snapshot

    def snapshot(self) -> MetricsSnapshot:
        with self._lock:
            return self._snapshot

    def config(self) -> dict:
        with self._lock:
            return {
                "level": self._level,
                "levels": list(self._policy.levels),
                "step_down_threshold_ms": self._policy.step_down_threshold_ms,
                "step_up_threshold_ms": self._policy.step_up_threshold_ms,
                "dwell_s": self._policy.dwell_s,
            }

    def apply_config(self, change: dict) -> dict:
        """Apply a partial config change; returns the full applied config."""
        with self._lock:
            policy = self._policy
            level = self._level
            if "step_down_threshold_ms" in change:
                policy = replace(policy, step_down_threshold_ms=float(change["step_down_threshold_ms"]))
            if "step_up_threshold_ms" in change:
                policy = replace(policy, step_up_threshold_ms=float(change["step_up_threshold_ms"]))
            if "dwell_s" in change:
                policy = replace(policy, dwell_s=float(change["dwell_s"]))
            if "level" in change:
                level = str(change["level"])
                if level not in policy.levels:
                    raise ValueError(f"unknown level {level!r}")
            # validates threshold ordering
            policy = QualityPolicy(
                levels=policy.levels,
                step_down_threshold_ms=policy.step_down_threshold_ms,
                step_up_threshold_ms=policy.step_up_threshold_ms,
                dwell_s=policy.dwell_s,
            )
            self._policy = policy
            self._level = level
        return self.config()


class _Handler(BaseHTTPRequestHandler):
    state: ExporterState  # injected by make_server

    def do_GET(self):  # noqa: N802 (http.server naming)
        if self.path.split("?")[0] != "/metrics":
            self._send(404, "text/plain", b"not found\n")
            return
        body = render_exposition(self.state.snapshot()).encode()
        self._send(200, "text/plain; version=0.0.4", body)

    def do_POST(self):  # noqa: N802
        if self.path.split("?")[0] != "/config":
            self._send(404, "text/plain", b"not found\n")
            return
        length = int(self.headers.get("Content-Length", "0"))
        try:
            change = json.loads(self.rfile.read(length) or b"{}")
            if not isinstance(change, dict):
                raise ValueError("config body must be a JSON object")
            applied = self.state.apply_config(change)
        except (ValueError, json.JSONDecodeError) as exc:
            self._send(400, "application/json",
                       json.dumps({"error": str(exc)}).encode())
            return
        self._send(200, "application/json", json.dumps(applied, sort_keys=True).encode())

    def _send(self, code: int, ctype: str, body: bytes) -> None:
        self.send_response(code)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, fmt, *args):  # silence per-request stderr noise
        pass


def make_server(state: ExporterState, port: int = 0) -> ThreadingHTTPServer:
    """Bind the metrics/config service; port 0 picks an ephemeral port."""
    handler = type("BoundHandler", (_Handler,), {"state": state})
    return ThreadingHTTPServer(("127.0.0.1", port), handler)


def serve_forever(server: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread
