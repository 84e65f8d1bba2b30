"""Log persistence, exposition text, quality stepping, and the HTTP service."""

import collections
import json
import random
import urllib.error
import urllib.request

import pytest
from hypothesis import given, settings, strategies as st

from xrprobe.exporter import (
    DetectionRecord,
    ExporterState,
    MetricsSnapshot,
    ParseError,
    QualityPolicy,
    adapt_quality,
    make_server,
    read_log,
    record_to_dict,
    render_exposition,
    serve_forever,
    snapshot_from_records,
    write_log,
)


def random_records(seed, n):
    rng = random.Random(seed)
    recs = []
    for _ in range(n):
        media = rng.choice(("video", "audio"))
        emission = rng.randrange(0, 10**9)
        recs.append(DetectionRecord(
            media=media,
            device=f"u{rng.randint(1, 5)}",
            emission_ts=emission,
            playout_ts=emission + rng.randrange(0, 2000),
            slot=rng.choice((None, rng.randint(1, 5))),
            frequency=rng.choice((None, 600.0 + 120 * rng.randint(0, 31))),
            confidence=rng.choice((None, round(rng.random(), 3))),
        ))
    return recs


class TestLogRoundtrip:
    def test_empty(self, tmp_path):
        path = tmp_path / "log.jsonl"
        write_log(path, [])
        assert path.read_text() == ""
        assert read_log(path) == []

    def test_thousand_random_records(self, tmp_path):
        recs = random_records(1, 1000)
        path = tmp_path / "log.jsonl"
        write_log(path, recs)
        assert read_log(path) == recs

    def test_optional_fields_omitted_when_none(self):
        rec = DetectionRecord(media="video", device="u1", emission_ts=1, playout_ts=2)
        d = record_to_dict(rec)
        assert "frequency" not in d
        assert "confidence" not in d

    def test_malformed_line_cites_line_number(self, tmp_path):
        recs = random_records(2, 10)
        path = tmp_path / "log.jsonl"
        write_log(path, recs)
        lines = path.read_text().splitlines()
        lines[6] = "{not json"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            read_log(path)
        assert err.value.line_no == 7
        assert "line 7" in str(err.value)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text('{"media": "video", "device": "u1", "emission_ts": 5}\n')
        with pytest.raises(ParseError):
            read_log(path)

    def test_bad_media_rejected(self, tmp_path):
        path = tmp_path / "log.jsonl"
        path.write_text('{"media": "smell", "device": "u1", '
                        '"emission_ts": 5, "playout_ts": 9}\n')
        with pytest.raises(ParseError):
            read_log(path)


class TestExposition:
    def test_single_gauge_format(self):
        snap = MetricsSnapshot(m2p_ms={"v1": 250.0}, m2e_ms={}, skew_ms={},
                               slot_counts={}, tallies={})
        assert render_exposition(snap) == 'xr_m2p_latency_ms{device="v1"} 250\n'

    def test_empty_snapshot_empty_body(self):
        snap = MetricsSnapshot({}, {}, {}, {}, {})
        assert render_exposition(snap) == ""

    def test_lines_sorted(self):
        snap = snapshot_from_records(random_records(3, 50))
        body = render_exposition(snap)
        lines = body.splitlines()
        assert lines == sorted(lines)

    def test_pure_function_of_snapshot(self):
        recs = random_records(4, 80)
        a = render_exposition(snapshot_from_records(recs))
        b = render_exposition(snapshot_from_records(list(recs)))
        assert a == b

    def test_counters_merged_and_named(self):
        snap = snapshot_from_records(
            [DetectionRecord(media="video", device="u1", emission_ts=10, playout_ts=5)],
            tally=collections.Counter({"crc_mismatch": 2, "unknown_tone": 3}),
        )
        body = render_exposition(snap)
        assert "xr_crc_failures_total 2" in body
        assert "xr_unknown_tones_total 3" in body
        assert "xr_negative_latencies_total 1" in body

    def test_slot_counters(self):
        recs = [DetectionRecord(media="video", device="u1", emission_ts=0,
                                playout_ts=10, slot=2)] * 3
        body = render_exposition(snapshot_from_records(recs))
        assert 'xr_slot_detections_total{media="video",slot="2"} 3' in body

    def test_skew_needs_both_media(self):
        recs = [
            DetectionRecord(media="video", device="u1", emission_ts=0, playout_ts=250),
            DetectionRecord(media="audio", device="u1", emission_ts=0, playout_ts=200),
            DetectionRecord(media="video", device="u2", emission_ts=0, playout_ts=100),
        ]
        snap = snapshot_from_records(recs)
        assert snap.skew_ms == {"u1": 50.0}


class TestAdaptQuality:
    POLICY = QualityPolicy(levels=("low", "medium", "high"),
                           step_down_threshold_ms=400.0,
                           step_up_threshold_ms=150.0,
                           dwell_s=10.0)

    def test_step_down(self):
        d = adapt_quality(500.0, "medium", self.POLICY, dwell_elapsed_s=11.0)
        assert d.action == "step_down"
        assert d.target_level == "low"

    def test_hold_at_top(self):
        d = adapt_quality(100.0, "high", self.POLICY, dwell_elapsed_s=11.0)
        assert d.action == "hold"
        assert d.target_level == "high"

    def test_hold_at_bottom(self):
        d = adapt_quality(900.0, "low", self.POLICY, dwell_elapsed_s=60.0)
        assert d.action == "hold"

    def test_dwell_gates_stepping(self):
        d = adapt_quality(500.0, "medium", self.POLICY, dwell_elapsed_s=9.9)
        assert d.action == "hold"

    def test_step_up(self):
        d = adapt_quality(100.0, "medium", self.POLICY, dwell_elapsed_s=10.0)
        assert d.action == "step_up"
        assert d.target_level == "high"

    def test_band_holds(self):
        d = adapt_quality(300.0, "medium", self.POLICY, dwell_elapsed_s=100.0)
        assert d.action == "hold"

    def test_unknown_level_rejected(self):
        with pytest.raises(ValueError):
            adapt_quality(100.0, "ultra", self.POLICY, dwell_elapsed_s=0.0)

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            QualityPolicy(step_down_threshold_ms=100.0, step_up_threshold_ms=200.0)
        with pytest.raises(ValueError):
            QualityPolicy(levels=("only",))

    @given(mean=st.floats(0, 1000), level=st.sampled_from(("low", "medium", "high")),
           dwell=st.floats(0, 100))
    @settings(max_examples=200)
    def test_target_always_in_levels(self, mean, level, dwell):
        d = adapt_quality(mean, level, self.POLICY, dwell_elapsed_s=dwell)
        assert d.target_level in self.POLICY.levels
        assert d.action in ("step_up", "step_down", "hold")

    def test_no_oscillation_within_dwell(self):
        # after a step, elapsed resets below dwell, so the opposite step
        # cannot fire until a full dwell period passes
        policy = self.POLICY
        level = "medium"
        elapsed = policy.dwell_s
        d1 = adapt_quality(500.0, level, policy, elapsed)
        assert d1.action == "step_down"
        d2 = adapt_quality(100.0, d1.target_level, policy, dwell_elapsed_s=0.0)
        assert d2.action == "hold"


class TestExporterState:
    def test_apply_partial_config(self):
        state = ExporterState()
        applied = state.apply_config({"level": "low", "dwell_s": 5})
        assert applied["level"] == "low"
        assert applied["dwell_s"] == 5.0
        assert applied["levels"] == ["low", "medium", "high"]

    def test_rejects_bad_level(self):
        state = ExporterState()
        with pytest.raises(ValueError):
            state.apply_config({"level": "ultra"})

    def test_rejects_inverted_thresholds(self):
        state = ExporterState()
        with pytest.raises(ValueError):
            state.apply_config({"step_up_threshold_ms": 500.0})


class TestHttpService:
    @pytest.fixture()
    def server(self):
        state = ExporterState()
        state.update_snapshot(snapshot_from_records(random_records(7, 30)))
        srv = make_server(state, port=0)
        serve_forever(srv)
        yield srv
        srv.shutdown()
        srv.server_close()

    def _url(self, server, path):
        return f"http://127.0.0.1:{server.server_address[1]}{path}"

    def test_get_metrics(self, server):
        with urllib.request.urlopen(self._url(server, "/metrics")) as resp:
            assert resp.status == 200
            assert resp.headers["Content-Type"].startswith("text/plain")
            body = resp.read().decode()
        assert "xr_m2p_latency_ms" in body

    def test_unknown_path_404(self, server):
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(self._url(server, "/nope"))
        assert err.value.code == 404

    def test_post_config(self, server):
        req = urllib.request.Request(
            self._url(server, "/config"),
            data=json.dumps({"level": "low"}).encode(),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req) as resp:
            assert resp.status == 200
            applied = json.loads(resp.read())
        assert applied["level"] == "low"

    def test_post_bad_config_400(self, server):
        req = urllib.request.Request(
            self._url(server, "/config"),
            data=json.dumps({"level": "ultra"}).encode(),
            method="POST",
        )
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(req)
        assert err.value.code == 400
        assert "error" in json.loads(err.value.read())
