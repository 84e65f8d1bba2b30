"""Frequency-coded tone beacons for the audio path.

The presenter emits a short sine pulse every ``pulse_period_ms``; the pulse
frequency encodes the emission slot index modulo the alphabet size, so a
detected frequency plus a rough playout time pins the emission instant as
long as end-to-end delay stays inside the ambiguity window
(tone_count * pulse_period_ms, 3.2 s with defaults).

Detection is time-domain: normalized autocorrelation over a sliding window,
first qualifying peak after the first zero crossing, parabolic refinement of
the peak lag. Works on the raw int16 stream, no FFT bins to misalign.
"""

from __future__ import annotations

import json
import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Counter as CounterT

import numpy as np

from .clocks import Timestamp

FULL_SCALE = 32767
DEFAULT_RATE = 48000
DETECT_WINDOW = 2048
DETECT_HOP = 512
MIN_WINDOW = 1024
PEAK_THRESHOLD = 0.8
SILENCE_DBFS = -40.0
DEFAULT_F_MIN = 200.0
DEFAULT_F_MAX = 4800.0


class NyquistViolation(ValueError):
    """A schedule frequency reaches or exceeds half the sample rate."""


class UnknownTone(ValueError):
    """Measured frequency is farther than delta/2 from every schedule tone."""


class Ambiguous(ValueError):
    """Playout precedes the first slot that could carry this tone."""


@dataclass(frozen=True)
class ToneSchedule:
    """Slot s carries frequency f0 + (s mod tone_count) * delta."""

    f0_hz: float = 600.0
    delta_hz: float = 120.0
    tone_count: int = 32
    pulse_period_ms: int = 100
    pulse_duration_ms: int = 80
    ramp_ms: int = 5
    epoch_ts: Timestamp = 0

    def __post_init__(self):
        if self.f0_hz <= 0 or self.delta_hz <= 0:
            raise ValueError("f0_hz and delta_hz must be positive")
        if self.tone_count < 2:
            raise ValueError("need at least two tones")
        if not 0 < self.pulse_duration_ms <= self.pulse_period_ms:
            raise ValueError("pulse duration must fit inside the period")
        if self.ramp_ms * 2 > self.pulse_duration_ms:
            raise ValueError("ramps longer than the pulse")

    @property
    def frequencies(self) -> tuple[float, ...]:
        return tuple(self.f0_hz + k * self.delta_hz for k in range(self.tone_count))

    @property
    def ambiguity_window_ms(self) -> int:
        return self.tone_count * self.pulse_period_ms


@dataclass(frozen=True, eq=False)
class PcmBuffer:
    """Mono 16-bit PCM."""

    sample_rate: int
    samples: np.ndarray
    channels: int = 1

    def __post_init__(self):
        if self.channels != 1:
            raise ValueError("only mono streams are supported")
        if self.samples.dtype != np.int16:
            raise ValueError("samples must be int16")

    @property
    def duration_ms(self) -> float:
        return len(self.samples) * 1000.0 / self.sample_rate


@dataclass(frozen=True)
class AudioDetection:
    device_id: str
    emission_ts: Timestamp
    playout_ts: Timestamp
    frequency_hz: float
    confidence: float


def slot_frequency(schedule: ToneSchedule, slot: int) -> float:
    if slot < 0:
        raise ValueError("slot must be non-negative")
    return schedule.f0_hz + (slot % schedule.tone_count) * schedule.delta_hz


def _envelope(duration: int, ramp: int) -> np.ndarray:
    env = np.ones(duration)
    if ramp > 0:
        up = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[:ramp] = up
        env[duration - ramp :] = up[::-1]
    return env


def synthesize(schedule: ToneSchedule, start_slot: int, n_slots: int,
               rate: int = DEFAULT_RATE) -> PcmBuffer:
    """Render ``n_slots`` consecutive slots, one raised-cosine pulse each.

    Peak amplitude is half full scale so concurrent program audio has
    headroom; silence fills the tail of every period.
    """
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    if start_slot < 0:
        raise ValueError("start_slot must be non-negative")
    top = max(schedule.frequencies)
    if top >= rate / 2.0:
        raise NyquistViolation(f"{top} Hz needs a sample rate above {2 * top:.0f}")
    period = round(schedule.pulse_period_ms * rate / 1000.0)
    duration = round(schedule.pulse_duration_ms * rate / 1000.0)
    ramp = round(schedule.ramp_ms * rate / 1000.0)
    env = _envelope(duration, ramp)
    t = np.arange(duration) / rate
    out = np.zeros(n_slots * period, dtype=np.int16)
    for i in range(n_slots):
        f = slot_frequency(schedule, start_slot + i)
        tone = 0.5 * FULL_SCALE * np.sin(2.0 * np.pi * f * t) * env
        out[i * period : i * period + duration] = np.round(tone).astype(np.int16)
    return PcmBuffer(sample_rate=rate, samples=out)


def _normalized_autocorr(x: np.ndarray, tau_hi: int) -> np.ndarray:
    """r[tau] = sum x[n]x[n+tau] / sqrt(sum_head x^2 * sum_tail x^2), tau 0..tau_hi."""
    n = x.size
    m = 1
    while m < 2 * n:
        m <<= 1
    spec = np.fft.rfft(x, m)
    ac = np.fft.irfft(spec * np.conj(spec), m)[: tau_hi + 1]
    energy = np.cumsum(x * x)
    total = energy[-1]
    taus = np.arange(tau_hi + 1)
    head = energy[n - 1 - taus]
    tail = total - np.concatenate(([0.0], energy[: tau_hi]))
    denom = np.sqrt(head * tail)
    r = np.zeros(tau_hi + 1)
    good = denom > 0
    r[good] = ac[good] / denom[good]
    return r


def estimate_frequency(
    window: np.ndarray,
    rate: int = DEFAULT_RATE,
    f_min: float = DEFAULT_F_MIN,
    f_max: float = DEFAULT_F_MAX,
    peak_threshold: float = PEAK_THRESHOLD,
    silence_dbfs: float = SILENCE_DBFS,
) -> tuple[float, float] | None:
    """Dominant frequency of a window, or None for silence / no clean pitch.

    The candidate lag range is [rate/f_max, rate/f_min]; the accepted peak is
    the first local maximum with r >= peak_threshold after the first zero
    crossing of r, refined by parabolic interpolation over its neighbors.
    Returns (frequency_hz, confidence in [0, 1]).
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("window must be 1-D")
    n = x.size
    if n < MIN_WINDOW:
        raise ValueError(f"window must hold at least {MIN_WINDOW} samples")
    rms = math.sqrt(float(np.mean(x * x)))
    if rms < FULL_SCALE * 10.0 ** (silence_dbfs / 20.0):
        return None

    tau_min = max(2, int(rate // f_max))
    tau_max = min(int(math.ceil(rate / f_min)), n - 2)
    if tau_min >= tau_max:
        return None
    r = _normalized_autocorr(x, tau_max + 1)

    below = np.flatnonzero(r[1:] <= 0.0)
    if below.size == 0:
        return None
    zc = int(below[0]) + 1

    lo = max(zc + 1, tau_min)
    tau = None
    for cand in range(lo, tau_max + 1):
        if (
            r[cand] >= peak_threshold
            and r[cand] >= r[cand - 1]
            and r[cand] >= r[cand + 1]
        ):
            tau = cand
            break
    if tau is None:
        return None

    a, b, c = r[tau - 1], r[tau], r[tau + 1]
    denom = a - 2.0 * b + c
    shift = 0.0 if abs(denom) < 1e-12 else 0.5 * (a - c) / denom
    shift = float(np.clip(shift, -0.5, 0.5))
    refined = tau + shift
    peak = b - 0.25 * (a - c) * shift
    return rate / refined, float(np.clip(peak, 0.0, 1.0))


def resolve_emission(schedule: ToneSchedule, frequency: float,
                     playout_ts: Timestamp) -> Timestamp:
    """Latest slot at or before playout whose tone matches ``frequency``.

    Raises UnknownTone when the frequency is farther than delta/2 from every
    schedule tone, and Ambiguous when no matching slot has started yet.
    """
    k = round((frequency - schedule.f0_hz) / schedule.delta_hz)
    k = min(max(k, 0), schedule.tone_count - 1)
    nominal = schedule.f0_hz + k * schedule.delta_hz
    if abs(frequency - nominal) > schedule.delta_hz / 2.0:
        raise UnknownTone(f"{frequency:.1f} Hz not within delta/2 of any tone")
    if playout_ts < schedule.epoch_ts:
        raise Ambiguous("playout precedes the schedule epoch")
    elapsed = playout_ts - schedule.epoch_ts
    latest = elapsed // schedule.pulse_period_ms
    if latest < k:
        raise Ambiguous(f"tone {k} has no slot at or before playout")
    slot = latest - (latest - k) % schedule.tone_count
    return schedule.epoch_ts + slot * schedule.pulse_period_ms


def detect_pulses(
    pcm: PcmBuffer,
    playout_clock: Callable[[int], Timestamp],
    schedule: ToneSchedule,
    device_id: str = "",
    window_size: int = DETECT_WINDOW,
    hop: int = DETECT_HOP,
    tally: CounterT[str] | None = None,
) -> list[AudioDetection]:
    """Scan a PCM stream for schedule pulses.

    ``playout_clock`` maps a sample index to the device-local playout
    timestamp of that sample. Consecutive windows that resolve to the same
    tone merge into one pulse whose playout is the start of the first window
    actually beginning inside the pulse; a window may only open a pulse if
    its own tone is already sounding at the window head, otherwise every
    measurement would be biased early by up to a window length (a broadband
    energy check is not enough, the head may hold the previous pulse's loud
    tail). Unresolvable windows are skipped and tallied.
    """
    x = np.asarray(pcm.samples, dtype=np.float64)
    rate = pcm.sample_rate
    f_lo = max(50.0, schedule.f0_hz - schedule.delta_hz)
    f_hi = min(max(schedule.frequencies) + schedule.delta_hz, rate / 2.0 - 1.0)
    period_ms = schedule.pulse_period_ms

    # Per-window tone decisions.
    hits: list[tuple[int, int, float, float] | None] = []
    for start in range(0, x.size - window_size + 1, hop):
        w = x[start : start + window_size]
        est = estimate_frequency(w, rate, f_min=f_lo, f_max=f_hi)
        if est is None:
            hits.append(None)
            continue
        freq, conf = est
        k = round((freq - schedule.f0_hz) / schedule.delta_hz)
        k = min(max(k, 0), schedule.tone_count - 1)
        if abs(freq - (schedule.f0_hz + k * schedule.delta_hz)) > schedule.delta_hz / 2.0:
            if tally is not None:
                tally["unknown_tone"] += 1
            hits.append(None)
            continue
        hits.append((start, k, freq, conf))

    # Narrowband onset probe. A Hann-weighted single-bin transform at the
    # run's nominal tone keeps the neighboring tone (one delta away) out of
    # the measurement; the head/tail ratio then says whether the tone was
    # already sounding when the window began. The 0.93 threshold sits just
    # under the attenuation a window aligned with the pulse onset suffers
    # from the raised-cosine ramp, so onset-aligned windows qualify and
    # windows more than a couple of milliseconds early do not.
    probe_len = min(1024, window_size // 2)
    onset_ratio = 0.93

    def _tone_amp(seg: np.ndarray, freq: float) -> float:
        taper = np.hanning(seg.size)
        phasor = np.exp(-2j * np.pi * freq * np.arange(seg.size) / rate)
        return abs(np.dot(seg * taper, phasor))

    def _openers(run, nominal):
        for start, _, freq, conf in run:
            head = _tone_amp(x[start : start + probe_len], nominal)
            tail = _tone_amp(x[start + window_size - probe_len : start + window_size], nominal)
            ref = max(head, tail)
            if ref > 0.0 and head >= onset_ratio * ref:
                yield start, freq, conf

    detections: list[AudioDetection] = []
    last_seen: dict[int, Timestamp] = {}
    i = 0
    while i < len(hits):
        if hits[i] is None:
            i += 1
            continue
        k = hits[i][1]
        j = i
        while j < len(hits) and hits[j] is not None and hits[j][1] == k:
            j += 1
        run = [h for h in hits[i:j] if h is not None]
        i = j
        # A window that fails to resolve is skipped, not the whole pulse:
        # the opener probe can fire a hair before the true onset, putting
        # the playout just ahead of a zero-latency slot, and the next
        # qualifying window then resolves the same pulse cleanly.
        emitted = False
        for start, freq, conf in _openers(run, schedule.f0_hz + k * schedule.delta_hz):
            playout = playout_clock(start)
            if k in last_seen and playout - last_seen[k] < period_ms / 2.0:
                if tally is not None:
                    tally["duplicate_pulse"] += 1
                emitted = True
                break
            try:
                emission = resolve_emission(schedule, freq, playout)
            except UnknownTone:
                if tally is not None:
                    tally["unknown_tone"] += 1
                continue
            except Ambiguous:
                if tally is not None:
                    tally["ambiguous"] += 1
                continue
            last_seen[k] = playout
            detections.append(
                AudioDetection(
                    device_id=device_id,
                    emission_ts=emission,
                    playout_ts=playout,
                    frequency_hz=freq,
                    confidence=conf,
                )
            )
            emitted = True
            break
        if not emitted and tally is not None:
            tally["onset_rejected"] += 1
    return detections


# --- WAV I/O ------------------------------------------------------------------

def write_wav(path: str | Path, pcm: PcmBuffer) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(pcm.sample_rate)
        w.writeframes(pcm.samples.astype("<i2").tobytes())


def read_wav(path: str | Path) -> PcmBuffer:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit samples")
        if w.getcomptype() != "NONE":
            raise ValueError(f"{path}: expected linear PCM")
        raw = w.readframes(w.getnframes())
        rate = w.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.int16)
    return PcmBuffer(sample_rate=rate, samples=samples)


def _sidecar(path: str | Path) -> Path:
    p = Path(path)
    return p.with_suffix(p.suffix + ".json")


def write_wav_manifest(path: str | Path, device_id: str, schedule: ToneSchedule,
                       stream_start_ts: Timestamp, session: dict | None = None) -> None:
    """JSON sidecar describing a WAV capture: identity, timing, schedule."""
    doc = {
        "device_id": device_id,
        "stream_start_ts": stream_start_ts,
        "schedule": {
            "f0_hz": schedule.f0_hz,
            "delta_hz": schedule.delta_hz,
            "tone_count": schedule.tone_count,
            "pulse_period_ms": schedule.pulse_period_ms,
            "pulse_duration_ms": schedule.pulse_duration_ms,
            "ramp_ms": schedule.ramp_ms,
            "epoch_ts": schedule.epoch_ts,
        },
        "session": session or {},
    }
    _sidecar(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_wav_manifest(path: str | Path) -> tuple[str, ToneSchedule, Timestamp, dict]:
    doc = json.loads(_sidecar(path).read_text())
    sched = doc["schedule"]
    schedule = ToneSchedule(
        f0_hz=float(sched["f0_hz"]),
        delta_hz=float(sched["delta_hz"]),
        tone_count=int(sched["tone_count"]),
        pulse_period_ms=int(sched["pulse_period_ms"]),
        pulse_duration_ms=int(sched["pulse_duration_ms"]),
        ramp_ms=int(sched["ramp_ms"]),
        epoch_ts=int(sched["epoch_ts"]),
    )
    return doc["device_id"], schedule, int(doc["stream_start_ts"]), doc.get("session", {})
