"""Command line smoke tests for the offline and benchmarking paths."""

import json

from click.testing import CliRunner

from stream4d.cli import main
from stream4d.producer import ProducerProcess, ScanSpec
from stream4d.sparse import read_sparse


def write_spec(path, **overrides):
    base = dict(scan_number=1, scan_rows=4, scan_cols=4, frame_rows=16,
                frame_cols=16, event_rate=5.0, seed=3)
    base.update(overrides)
    path.write_text(json.dumps(base))
    return ScanSpec(**base)


def test_count_command(tmp_path):
    spec_file = tmp_path / "spec.json"
    spec = write_spec(spec_file)
    raw_dir = tmp_path / "raw"
    for s in range(4):
        ProducerProcess(spec, s, None, [], fallback_dir=raw_dir).run()
    out = tmp_path / "counted.s4dc"

    result = CliRunner().invoke(main, [
        "count", "--raw", str(raw_dir), "--out", str(out),
        "--scan-spec", str(spec_file)])
    assert result.exit_code == 0, result.output
    assert "16 frames" in result.output
    assert len(read_sparse(out).frames) == 16


def test_bench_run_writes_report(tmp_path):
    out = tmp_path / "report"
    result = CliRunner().invoke(main, [
        "bench", "run", "--dims", "4x4", "--trials", "2",
        "--frame-geometry", "16x16", "--out", str(out),
        "--work-dir", str(tmp_path / "work")])
    assert result.exit_code == 0, result.output
    assert "Enhancement" in result.output
    for name in ("table.txt", "samples.csv", "histograms.csv",
                 "hist_4x4.png"):
        assert (out / name).exists()
