"""Deterministic discrete-event simulation of the edge-rendered media pipeline.

One presenter captures video frames and emits audio pulses; everything passes
through an edge renderer and fans out to every connected device (the presenter
consumes its own composited stream as well). The access network on each hop is
a stochastic delay model with optional burst outages and whole-unit loss.
Detections are produced the way real clients would produce them: video is
re-detected at every display refresh (a frozen frame keeps ramping its measured
latency), audio pulses are timestamped at device playout.

The engine is single-threaded, driven by one heap, and draws randomness from
per-channel streams seeded with string keys, so a (scenario, seed) pair maps
to exactly one log on any platform.
"""

from __future__ import annotations

import bisect
import heapq
import itertools
import math
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .audio_beacon import (
    PcmBuffer,
    ToneSchedule,
    detect_pulses,
    read_wav,
    read_wav_manifest,
    slot_frequency,
    synthesize,
    write_wav,
    write_wav_manifest,
)
from .clocks import VirtualClock, local_now
from .exporter import DetectionRecord, QualityPolicy, adapt_quality
from .metrics import AUDIO, VIDEO
from .scenario import ConfigError, NetworkProfile, SessionScenario
from .video_beacon import (
    CrcMismatch,
    FinderNotFound,
    FrameManifest,
    beacon_emission,
    blank_frame,
    detect_decode,
    encode_beacon,
    frame_paths,
    rasterize,
    read_frame_manifest,
    read_pgm,
    write_frame_sequence,
)

AUDIO_HOP_SAMPLES = 512  # device output callback size; playout lands on this grid
PHYSICAL_SCALE = 4
PHYSICAL_QUIET = 4


# --- network hop -------------------------------------------------------------------

@dataclass
class ChannelState:
    """Burst-outage bookkeeping for one directional channel."""

    outage_until: float = float("-inf")


def sample_hop_delay(profile: NetworkProfile, rng: random.Random, t: float,
                     state: ChannelState | None = None,
                     medium: str = VIDEO) -> float:
    """One-way delay draw at true time ``t``, milliseconds.

    Adds the residual outage time when the channel is inside a burst, or the
    whole burst duration when this event opens one. Never returns less than
    the profile's base delay.
    """
    delay = profile.base_one_way_ms + profile.jitter.sample(rng)
    outage = profile.outage
    if outage is not None and state is not None and medium in outage.media:
        if t < state.outage_until:
            delay += state.outage_until - t
        elif rng.random() < outage.enter_prob:
            duration = outage.sample_duration(rng)
            state.outage_until = t + duration
            delay += duration
    return delay


# --- disciplined clocks ------------------------------------------------------------

class PiecewiseClock:
    """A device clock between syncs: fixed drift, offset redrawn per sync.

    Segments are precomputed for the whole session so reads and inversions
    are independent of event-processing order.
    """

    def __init__(self, device: str, *, seed: int, join_ms: float, end_ms: float,
                 sigma_ntp_ms: float, sync_interval_s: float,
                 max_drift_ppm: float, initial_offset_sigma_ms: float):
        rng = random.Random(f"{seed}|clock|{device}")
        drift = rng.uniform(-max_drift_ppm, max_drift_ppm) if max_drift_ppm > 0 else 0.0
        offset = rng.gauss(0.0, initial_offset_sigma_ms) if initial_offset_sigma_ms > 0 else 0.0
        clocks = [VirtualClock(device, offset_ms=offset, drift_ppm=drift, t0_ms=join_ms)]
        starts = [join_ms]
        t = join_ms + sync_interval_s * 1000.0
        while t <= end_ms:
            off = rng.gauss(0.0, sigma_ntp_ms) if sigma_ntp_ms > 0 else 0.0
            clocks.append(VirtualClock(device, offset_ms=off, drift_ppm=drift, t0_ms=t))
            starts.append(t)
            t += sync_interval_s * 1000.0
        self._clocks = clocks
        self._starts = starts

    def _index(self, t: float) -> int:
        i = bisect.bisect_right(self._starts, t) - 1
        return max(0, min(i, len(self._clocks) - 1))

    def local_float(self, t: float) -> float:
        clock = self._clocks[self._index(t)]
        return t + clock.offset_ms + clock.drift_ppm * 1e-6 * (t - clock.t0_ms)

    def read(self, t: float) -> int:
        return local_now(self._clocks[self._index(t)], t)

    def invert(self, local_target: float) -> float:
        """True time at which the clock reads ``local_target``.

        Sync steps make the local map piecewise; a target falling into the
        sub-millisecond gap of a forward step snaps to the gap's boundary.
        """
        j = max(0, self._index(local_target) - 1)
        while True:
            clock = self._clocks[j]
            d = clock.drift_ppm * 1e-6
            t = (local_target - clock.offset_ms + d * clock.t0_ms) / (1.0 + d)
            lo = self._starts[j]
            hi = self._starts[j + 1] if j + 1 < len(self._starts) else math.inf
            if t < lo:
                return lo
            if t < hi:
                return t
            if j + 1 == len(self._clocks):
                return t
            j += 1


# --- run artifacts -----------------------------------------------------------------

@dataclass
class DeviceTrace:
    """Ground-truth playback trace of one device, kept for physical rendering."""

    device: str
    join_ms: float
    quantum_ms: float
    clock: PiecewiseClock
    vsync_phase_ms: float = 0.0
    audio_phase_ms: float = 0.0
    ticks: list = field(default_factory=list)    # (true_ms, beacon emission | None)
    pulses: list = field(default_factory=list)   # (true playout ms, absolute slot index)


@dataclass
class DetectionLog:
    """Ordered detection records plus diagnostic tallies for one run."""

    records: list[DetectionRecord]
    tally: Counter
    traces: dict[str, DeviceTrace] = field(default_factory=dict)


def _slot_at(joins: dict[str, float], t: float) -> int:
    return sum(1 for j in joins.values() if j <= t)


def _record_sort_key(rec: DetectionRecord):
    return (rec.playout_ts, rec.device, rec.media, rec.emission_ts)


# --- the engine --------------------------------------------------------------------

def run_scenario(scenario: SessionScenario, seed: int | None = None) -> DetectionLog:
    """Simulate the scenario and return its detection log (symbolic mode)."""
    seed = scenario.seed if seed is None else seed
    pipe = scenario.pipeline
    fps = scenario.fps
    frame_ms = 1000.0 / fps
    capture_ms = pipe.capture_ms(fps)
    quantum_ms = pipe.quantum_ms(fps)
    t0 = float(scenario.start_epoch_ms)
    end = t0 + scenario.duration_s * 1000.0
    rate = scenario.sample_rate
    hop_ms = AUDIO_HOP_SAMPLES * 1000.0 / rate

    devices = scenario.devices
    joins = {d: t0 + scenario.join_time_s(d) * 1000.0 for d in devices}
    cspec = scenario.clocks
    clocks = {
        d: PiecewiseClock(
            d, seed=seed, join_ms=joins[d], end_ms=end,
            sigma_ntp_ms=cspec.sigma_ntp_ms, sync_interval_s=cspec.sync_interval_s,
            max_drift_ppm=cspec.max_drift_ppm,
            initial_offset_sigma_ms=cspec.initial_offset_sigma_ms,
        )
        for d in devices
    }
    presenter = scenario.presenter
    pclock = clocks[presenter]
    start_local = pclock.local_float(t0)
    stream_start_ts = round(start_local)

    tones = scenario.tones
    if tones.epoch_ts == 0:
        tones = replace(tones, epoch_ts=stream_start_ts)
    period_ms = tones.pulse_period_ms

    up_rng = {m: random.Random(f"{seed}|chan|up|{m}") for m in (VIDEO, AUDIO)}
    up_state = {m: ChannelState() for m in (VIDEO, AUDIO)}
    down_rng = {(d, m): random.Random(f"{seed}|chan|down|{d}|{m}")
                for d in devices for m in (VIDEO, AUDIO)}
    down_state = {(d, m): ChannelState() for d in devices for m in (VIDEO, AUDIO)}

    def lost(rng: random.Random, prob: float) -> bool:
        return prob > 0.0 and rng.random() < prob

    qspec = scenario.quality
    policy = None
    level = qspec.initial_level
    encode_down_eff = pipe.encode_down_ms
    if qspec.enabled:
        policy = QualityPolicy(
            levels=qspec.levels,
            step_down_threshold_ms=qspec.step_down_threshold_ms,
            step_up_threshold_ms=qspec.step_up_threshold_ms,
            dwell_s=qspec.dwell_s,
        )
        encode_down_eff = max(0.0, pipe.encode_down_ms + qspec.delta_for(level))
    window_sum = 0.0
    window_n = 0
    last_level_change = t0

    # Display refresh and audio output callbacks run on device-local grids whose
    # phase is arbitrary relative to the presenter's capture clock; a drawn
    # phase prevents the grids from locking when join times are round numbers.
    vsync_phase: dict[str, float] = {}
    audio_phase: dict[str, float] = {}
    for d in devices:
        phase_rng = random.Random(f"{seed}|phase|{d}")
        vsync_phase[d] = phase_rng.uniform(0.0, quantum_ms) if quantum_ms > 0 else 0.0
        audio_phase[d] = phase_rng.uniform(0.0, hop_ms)

    tally: Counter = Counter()
    records: list[DetectionRecord] = []
    traces = {d: DeviceTrace(d, joins[d], quantum_ms, clocks[d],
                             vsync_phase[d], audio_phase[d]) for d in devices}
    current: dict[str, int | None] = {d: None for d in devices}
    pending: dict[str, tuple[int, float] | None] = {d: None for d in devices}

    heap: list = []
    seq = itertools.count()

    def push(t: float, kind: str, payload=None) -> None:
        heapq.heappush(heap, (t, next(seq), kind, payload))

    def emit_video(device: str, emission: int, t: float) -> None:
        nonlocal window_sum, window_n
        playout = clocks[device].read(t)
        records.append(DetectionRecord(
            media=VIDEO, device=device, emission_ts=emission,
            playout_ts=playout, slot=_slot_at(joins, t),
        ))
        window_sum += playout - emission
        window_n += 1

    def capture_true(i: int) -> float:
        return pclock.invert(start_local + i * frame_ms)

    def pulse_true(n: int) -> float:
        return pclock.invert(float(tones.epoch_ts + n * period_ms))

    push(capture_true(0), "capture", 0)
    push(pulse_true(0), "pulse", 0)
    if quantum_ms > 0:
        for d in devices:
            push(joins[d] + vsync_phase[d], "tick", (d, 0))
    if policy is not None:
        push(t0 + qspec.control_interval_s * 1000.0, "qctl", None)

    while heap:
        t, _, kind, payload = heapq.heappop(heap)

        if kind == "capture":
            i = payload
            capture_ts = round(start_local + i * frame_ms)
            emission = beacon_emission(stream_start_ts, capture_ts,
                                       scenario.beacon_interval_ms)
            send_t = t + capture_ms + pipe.encode_up_ms
            if lost(up_rng[VIDEO], scenario.uplink.loss_prob):
                tally["frames_lost_uplink"] += 1
            else:
                hop = sample_hop_delay(scenario.uplink, up_rng[VIDEO], send_t,
                                       up_state[VIDEO], VIDEO)
                push(send_t + hop, "edge", emission)
            nxt = capture_true(i + 1)
            if nxt <= end:
                push(nxt, "capture", i + 1)

        elif kind == "edge":
            emission = payload
            send_t = t + pipe.render_ms + encode_down_eff
            for d in devices:
                if joins[d] > send_t or send_t > end:
                    continue
                if lost(down_rng[(d, VIDEO)], scenario.downlink.loss_prob):
                    tally["frames_lost_downlink"] += 1
                    continue
                hop = sample_hop_delay(scenario.downlink, down_rng[(d, VIDEO)],
                                       send_t, down_state[(d, VIDEO)], VIDEO)
                push(send_t + hop + pipe.decode_ms, "vready", (d, emission))

        elif kind == "vready":
            d, emission = payload
            if quantum_ms == 0:
                if current[d] is None or emission >= current[d]:
                    current[d] = emission
                    if t <= end:
                        emit_video(d, emission, t)
                        traces[d].ticks.append((t, emission))
                else:
                    tally["frames_stale"] += 1
            else:
                held = pending[d]
                if held is None or emission >= held[0]:
                    if held is not None:
                        tally["frames_skipped"] += 1
                    pending[d] = (emission, t)
                else:
                    tally["frames_stale"] += 1

        elif kind == "tick":
            d, m = payload
            if t <= end:
                held = pending[d]
                if held is not None:
                    if current[d] is None or held[0] >= current[d]:
                        current[d] = held[0]
                    else:
                        tally["frames_stale"] += 1
                    pending[d] = None
                shown = current[d]
                traces[d].ticks.append((t, shown))
                if shown is not None:
                    emit_video(d, shown, t)
                nxt = joins[d] + vsync_phase[d] + (m + 1) * quantum_ms
                if nxt <= end:
                    push(nxt, "tick", (d, m + 1))

        elif kind == "pulse":
            n = payload
            emission = tones.epoch_ts + n * period_ms
            if lost(up_rng[AUDIO], scenario.uplink.loss_prob):
                tally["pulses_lost_uplink"] += 1
            else:
                hop = sample_hop_delay(scenario.uplink, up_rng[AUDIO], t,
                                       up_state[AUDIO], AUDIO)
                push(t + hop, "pedge", (n, emission))
            nxt = pulse_true(n + 1)
            if nxt <= end:
                push(nxt, "pulse", n + 1)

        elif kind == "pedge":
            n, emission = payload
            for d in devices:
                if joins[d] > t:
                    continue
                if lost(down_rng[(d, AUDIO)], scenario.downlink.loss_prob):
                    tally["pulses_lost_downlink"] += 1
                    continue
                hop = sample_hop_delay(scenario.downlink, down_rng[(d, AUDIO)],
                                       t, down_state[(d, AUDIO)], AUDIO)
                raw = t + hop + pipe.audio_buffer_ms + pipe.audio_path_ms
                anchor = joins[d] + audio_phase[d]
                steps = math.ceil((raw - anchor) / hop_ms - 1e-9)
                play_true = anchor + max(0, steps) * hop_ms
                if play_true + tones.pulse_duration_ms > end:
                    tally["pulses_truncated"] += 1
                    continue
                records.append(DetectionRecord(
                    media=AUDIO, device=d, emission_ts=emission,
                    playout_ts=clocks[d].read(play_true),
                    slot=_slot_at(joins, play_true),
                    frequency=slot_frequency(tones, n), confidence=1.0,
                ))
                traces[d].pulses.append((play_true, n))

        elif kind == "qctl":
            if window_n > 0:
                mean = window_sum / window_n
                decision = adapt_quality(mean, level, policy,
                                         (t - last_level_change) / 1000.0)
                if decision.action != "hold":
                    level = decision.target_level
                    encode_down_eff = max(0.0, pipe.encode_down_ms + qspec.delta_for(level))
                    last_level_change = t
                    tally[f"quality_{decision.action}"] += 1
            window_sum = 0.0
            window_n = 0
            nxt = t + qspec.control_interval_s * 1000.0
            if nxt <= end:
                push(nxt, "qctl", None)

    records.sort(key=_record_sort_key)
    return DetectionLog(records=records, tally=tally, traces=traces)


# --- physical mode -----------------------------------------------------------------

def run_physical(scenario: SessionScenario, workdir: str | Path,
                 seed: int | None = None) -> tuple[DetectionLog, DetectionLog]:
    """Render the run to real PGM frames and WAV streams, then detect them.

    Returns (physical_log, symbolic_log). The physical log is produced by the
    actual detectors reading the written media, so it exercises the whole
    measurement chain end to end. Frame sequences are kept in memory per
    device before writing; intended for short scenarios.
    """
    if scenario.pipeline.quantum_ms(scenario.fps) <= 0:
        raise ConfigError("physical mode needs a positive display quantum")
    symbolic = run_scenario(scenario, seed)
    workdir = Path(workdir)
    rate = scenario.sample_rate
    t0 = float(scenario.start_epoch_ms)
    end = t0 + scenario.duration_s * 1000.0
    joins = {d: t0 + scenario.join_time_s(d) * 1000.0 for d in scenario.devices}
    session_info = {"joins_ms": {d: joins[d] for d in scenario.devices}}

    tones = scenario.tones
    if tones.epoch_ts == 0:
        start_local = symbolic.traces[scenario.presenter].clock.local_float(t0)
        tones = replace(tones, epoch_ts=round(start_local))

    records: list[DetectionRecord] = []
    tally: Counter = Counter()
    tone_cache: dict[int, np.ndarray] = {}
    pulse_samples = round(tones.pulse_duration_ms * rate / 1000.0)

    for d in scenario.devices:
        trace = symbolic.traces[d]

        vdir = workdir / d / "video"
        frames = []
        for _, emission in trace.ticks:
            if emission is None:
                frames.append(blank_frame(PHYSICAL_SCALE, PHYSICAL_QUIET))
            else:
                frames.append(rasterize(encode_beacon(emission),
                                        PHYSICAL_SCALE, PHYSICAL_QUIET))
        start_ts = trace.clock.read(trace.ticks[0][0]) if trace.ticks else trace.clock.read(trace.join_ms)
        manifest = FrameManifest(
            device_id=d, fps=1000.0 / trace.quantum_ms, start_ts=start_ts,
            frame_count=len(frames), session=session_info,
        )
        write_frame_sequence(vdir, frames, manifest)

        manifest = read_frame_manifest(vdir)
        for i, path in enumerate(frame_paths(vdir, manifest.frame_count)):
            playout = manifest.frame_playout(i)
            try:
                det = detect_decode(read_pgm(path), playout, d)
            except FinderNotFound:
                tally["finder_not_found"] += 1
                continue
            except CrcMismatch:
                tally["crc_mismatch"] += 1
                continue
            records.append(DetectionRecord(
                media=VIDEO, device=d, emission_ts=det.emission_ts,
                playout_ts=det.playout_ts, slot=_slot_at(joins, det.playout_ts),
            ))

        n_samples = math.ceil((end - trace.join_ms) * rate / 1000.0)
        mix = np.zeros(n_samples, dtype=np.int32)
        for play_true, slot_index in trace.pulses:
            k = slot_index % tones.tone_count
            if k not in tone_cache:
                tone_cache[k] = synthesize(tones, k, 1, rate).samples[:pulse_samples].astype(np.int32)
            offset = round((play_true - trace.join_ms) * rate / 1000.0)
            mix[offset:offset + pulse_samples] += tone_cache[k]
        pcm = PcmBuffer(sample_rate=rate,
                        samples=np.clip(mix, -32768, 32767).astype(np.int16))
        wav_path = workdir / d / "audio.wav"
        wav_path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(wav_path, pcm)
        write_wav_manifest(wav_path, d, tones,
                           stream_start_ts=trace.clock.read(trace.join_ms),
                           session=session_info)

        _, schedule, wav_start, _ = read_wav_manifest(wav_path)
        loaded = read_wav(wav_path)
        dets = detect_pulses(
            loaded,
            lambda s, base=wav_start, r=loaded.sample_rate: base + round(s * 1000.0 / r),
            schedule, d, tally=tally,
        )
        for det in dets:
            records.append(DetectionRecord(
                media=AUDIO, device=d, emission_ts=det.emission_ts,
                playout_ts=det.playout_ts, slot=_slot_at(joins, det.playout_ts),
                frequency=det.frequency_hz, confidence=det.confidence,
            ))

    records.sort(key=_record_sort_key)
    return DetectionLog(records=records, tally=tally, traces=symbolic.traces), symbolic


def compare_logs(a: list[DetectionRecord], b: list[DetectionRecord],
                 video_tol_ms: float = 34.0, audio_tol_ms: float = 20.0) -> float:
    """Fraction of records agreeing between two logs.

    Records pair up by (media, device, emission) occurrence order; a pair
    agrees when playouts differ by at most the per-media tolerance. Unpaired
    records count against the fraction.
    """
    def grouped(recs):
        g: dict[tuple, list[int]] = {}
        for r in recs:
            g.setdefault((r.media, r.device, r.emission_ts), []).append(r.playout_ts)
        for v in g.values():
            v.sort()
        return g

    ga, gb = grouped(a), grouped(b)
    matched = 0
    total = 0
    for key in set(ga) | set(gb):
        la = ga.get(key, [])
        lb = gb.get(key, [])
        total += max(len(la), len(lb))
        tol = video_tol_ms if key[0] == VIDEO else audio_tol_ms
        matched += sum(1 for x, y in zip(la, lb) if abs(x - y) <= tol)
    return matched / total if total else 1.0
