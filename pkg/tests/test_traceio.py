"""Trace ingestion, synthetic generation, and stats output tests."""

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from walletemu.errors import InvariantError, ParseError
from walletemu.traceio import (
    GeneratorSpec,
    TraceEvent,
    generate_trace,
    load_trace,
    write_stats,
    write_trace,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestLoadTrace:
    def test_well_formed_rows_sorted(self, tmp_path):
        path = tmp_path / "t.csv"
        write_lines(path, [
            "invocation_id,app_id,function_id,arrival_ms,duration_ms",
            "2,0,5,30.0,10.0",
            "0,1,4,10.0,20.0",
            "1,0,5,20.0,5.0",
        ])
        events = load_trace(path)
        assert [e.invocation_id for e in events] == [0, 1, 2]
        assert events[0].duration_ms == 20.0

    def test_duplicate_invocation_id_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        write_lines(path, [
            "invocation_id,app_id,function_id,arrival_ms,duration_ms",
            "0,0,0,1.0,1.0",
            "0,0,1,2.0,1.0",
        ])
        with pytest.raises(ParseError, match="duplicate"):
            load_trace(path)

    def test_unsorted_input_is_stably_sorted(self, tmp_path):
        path = tmp_path / "t.csv"
        write_lines(path, [
            "invocation_id,app_id,function_id,arrival_ms,duration_ms",
            "5,0,0,100.0,1.0",
            "3,0,0,100.0,1.0",
            "1,0,0,50.0,1.0",
        ])
        events = load_trace(path)
        assert [(e.arrival_ms, e.invocation_id) for e in events] == \
            [(50.0, 1), (100.0, 3), (100.0, 5)]

    def test_negative_duration_is_invariant_error(self, tmp_path):
        path = tmp_path / "t.csv"
        write_lines(path, [
            "invocation_id,app_id,function_id,arrival_ms,duration_ms",
            "0,0,0,1.0,-5.0",
        ])
        with pytest.raises(InvariantError):
            load_trace(path)

    def test_bad_header_rejected_with_line(self, tmp_path):
        path = tmp_path / "t.csv"
        write_lines(path, ["nope,header", "0,0,0,1,1"])
        with pytest.raises(ParseError, match=":1"):
            load_trace(path)

    def test_garbage_row_reports_line_number(self, tmp_path):
        path = tmp_path / "t.csv"
        write_lines(path, [
            "invocation_id,app_id,function_id,arrival_ms,duration_ms",
            "0,0,0,1.0,1.0",
            "x,y,z,a,b",
        ])
        with pytest.raises(ParseError, match=":3"):
            load_trace(path)


class TestGenerateTrace:
    def test_deterministic_under_seed(self):
        spec = GeneratorSpec(n_functions=20, n_apps=4, duration_minutes=0.2,
                             arrival_rate_per_s=50, seed=1)
        assert generate_trace(spec) == generate_trace(spec)

    def test_single_function_spec(self):
        spec = GeneratorSpec(n_functions=1, n_apps=1, duration_minutes=0.1,
                             arrival_rate_per_s=30, seed=2)
        trace = generate_trace(spec)
        assert trace
        assert all(e.function_id == 0 and e.app_id == 0 for e in trace)

    def test_poisson_count_within_one_percent_at_full_scale(self):
        # Full-scale check: 30 minutes at ~2278/s is ~4.1 M invocations.
        spec = GeneratorSpec(n_functions=4000, n_apps=200,
                             duration_minutes=30, arrival_rate_per_s=2278,
                             seed=3)
        trace = generate_trace(spec)
        expected = 2278 * 30 * 60
        assert abs(len(trace) - expected) / expected < 0.01
        assert len(trace) > 4_000_000

    def test_durations_clipped_to_one_ms(self):
        spec = GeneratorSpec(n_functions=5, n_apps=2, duration_minutes=0.2,
                             arrival_rate_per_s=100,
                             duration_lognormal_mu=math.log(1.0),
                             duration_lognormal_sigma=3.0, seed=4)
        trace = generate_trace(spec)
        assert min(e.duration_ms for e in trace) >= 1.0

    def test_invalid_spec_rejected(self):
        with pytest.raises(InvariantError):
            GeneratorSpec(n_functions=0).validate()
        with pytest.raises(InvariantError):
            GeneratorSpec(duration_lognormal_sigma=-1).validate()

    def test_unknown_spec_keys_are_parse_errors(self):
        with pytest.raises(ParseError):
            GeneratorSpec.from_json('{"no_such_knob": 1}')
        with pytest.raises(ParseError):
            GeneratorSpec.from_json("not json at all")

    def test_missing_trace_file_is_parse_error(self):
        with pytest.raises(ParseError):
            load_trace("/definitely/not/there.csv")


class TestRoundTrip:
    def test_write_then_load_preserves_generated_trace(self, tmp_path):
        spec = GeneratorSpec(n_functions=30, n_apps=6, duration_minutes=0.2,
                             arrival_rate_per_s=80, seed=5)
        trace = generate_trace(spec)
        path = tmp_path / "round.csv"
        write_trace(trace, path)
        assert load_trace(path) == trace

    @settings(max_examples=30, deadline=None)
    @given(rows=st.lists(
        st.tuples(st.integers(0, 50), st.integers(0, 5), st.integers(0, 9),
                  st.floats(0, 1e6, allow_nan=False),
                  st.floats(0.001, 1e6, allow_nan=False)),
        max_size=20, unique_by=lambda t: t[0]))
    def test_round_trip_arbitrary_events(self, rows):
        import tempfile
        from pathlib import Path
        trace = sorted((TraceEvent(*row) for row in rows),
                       key=lambda e: (e.arrival_ms, e.invocation_id))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "h.csv"
            write_trace(trace, path)
            assert load_trace(path) == trace


class TestWriteStats:
    ROWS = [{"variant": "CVM", "p50_delay_ms": 1.5, "p99_delay_ms": 9.0,
             "p50_slowdown": 2.0, "p99_slowdown": 11.0, "cold": 3,
             "lukewarm": 0, "warm": 7, "makespan_ms": 100.0}]

    def test_identical_inputs_identical_files(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        write_stats(self.ROWS, a, "json")
        write_stats(self.ROWS, b, "json")
        assert a.read_bytes() == b.read_bytes()

    def test_empty_stats_csv_is_header_only(self, tmp_path):
        path = tmp_path / "empty.csv"
        write_stats([], path, "csv")
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("variant,")

    def test_json_round_trips(self, tmp_path):
        path = tmp_path / "s.json"
        write_stats(self.ROWS, path, "json")
        assert json.loads(path.read_text()) == self.ROWS

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_stats(self.ROWS, tmp_path / "x", "xml")
