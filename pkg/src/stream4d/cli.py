"""Command-line entry points for all services and the bench harness."""

from __future__ import annotations

import logging
import signal
import threading
import time
from pathlib import Path

import click

from . import counting
from .consumer import CountingParams, NodeGroupService
from .pipeline import parse_address
from .producer import ProducerProcess, ScanSpec
from .statestore import ClientKind, StateClient, StateServer, Status

log = logging.getLogger(__name__)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


@main.command()
@click.option("--sector", "sector_index", type=int, required=True,
              help="Sector index (0..3) this producer owns.")
@click.option("--scan-spec", "spec_file", type=click.Path(exists=True),
              required=True)
@click.option("--aggregator", "aggregator_addr", default=None,
              help="host:port of the aggregator data channel.")
@click.option("--state-server", "state_addr", required=True)
@click.option("--fallback-dir", type=click.Path(), default="fallback")
@click.option("--threads", "thread_count", type=int, default=4)
def produce(sector_index, spec_file, aggregator_addr, state_addr,
            fallback_dir, thread_count):
    """Stream one scan's sector data, or write raw files if no NodeGroups
    are active."""
    spec = ScanSpec.from_file(spec_file)
    state = StateClient(parse_address(state_addr),
                        uid=f"producer-{sector_index}",
                        kind=ClientKind.producer)
    state.sync()
    state.publish(Status.idle)
    state.start_heartbeat()
    uids = state.active_nodegroups()
    if uids and aggregator_addr:
        state.publish(Status.streaming, scan_number=spec.scan_number)
        proc = ProducerProcess(spec, sector_index,
                               parse_address(aggregator_addr), uids,
                               thread_count)
        proc.run()
        click.echo(f"sent={proc.sent} dropped={proc.dropped}")
        state.publish(Status.draining, scan_number=spec.scan_number)
        state.publish(Status.idle)
    else:
        proc = ProducerProcess(spec, sector_index, None, [],
                               thread_count, fallback_dir=fallback_dir)
        proc.run()
        for p in proc.fallback_paths:
            click.echo(str(p))
        click.echo("mode=disk_fallback")
    state.deregister()
    state.close()


@main.command()
@click.option("--listen", default="127.0.0.1:0",
              help="host:port for the producer-facing data channel.")
@click.option("--state-server", "state_addr", required=True)
@click.option("--metrics-port", type=int, default=None)
def aggregate(listen, state_addr, metrics_port):
    """Run the central routing service until interrupted."""
    from .aggregator import AggregatorService

    state = StateClient(parse_address(state_addr), uid="aggregator",
                        kind=ClientKind.aggregator)
    state.sync()
    pinned: dict[int, list] = {}

    def resolve(scan_number: int):
        groups = pinned.get(scan_number)
        if groups is None:
            uids = state.active_nodegroups()
            groups = [(uid, parse_address(state.get(uid).address))
                      for uid in uids]
            pinned[scan_number] = groups
        return groups

    host, port = parse_address(listen)
    service = AggregatorService(resolve, host, port,
                                metrics_port=metrics_port)
    state.publish(Status.idle,
                  address=f"{service.address[0]}:{service.address[1]}")
    state.start_heartbeat()
    click.echo(f"aggregator listening on "
               f"{service.address[0]}:{service.address[1]}")
    _wait_for_signal()
    service.close()
    state.deregister()
    state.close()


@main.command()
@click.option("--uid", required=True)
@click.option("--listen", default="127.0.0.1:0")
@click.option("--state-server", "state_addr", required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--threshold-n", "n_sigma", type=float, default=4.0)
@click.option("--sample-count", type=int,
              default=counting.DEFAULT_SAMPLE_COUNT)
@click.option("--connectivity", type=click.Choice(["4", "8"]), default="8")
@click.option("--timeout-ms", type=int, default=5000)
@click.option("--orchestrator-url", default=None)
def consume(uid, listen, state_addr, out_dir, n_sigma, sample_count,
            connectivity, timeout_ms, orchestrator_url):
    """Run one NodeGroup consumer until interrupted (drains on SIGTERM)."""
    host, port = parse_address(listen)
    params = CountingParams(n_sigma=n_sigma, sample_count=sample_count,
                            connectivity=int(connectivity),
                            finalize_timeout_ms=timeout_ms)
    service = NodeGroupService(uid, parse_address(state_addr), out_dir,
                               params=params, host=host, port=port,
                               orchestrator_url=orchestrator_url)
    service.start()
    click.echo(f"{uid} listening on "
               f"{service.address[0]}:{service.address[1]}")
    _wait_for_signal()
    service.stop()


@main.command()
@click.option("--raw", "raw_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_file", type=click.Path(), required=True)
@click.option("--scan-spec", "spec_file", type=click.Path(exists=True),
              required=True, help="Spec file describing the raw scan.")
@click.option("--threshold-n", "n_sigma", type=float, default=4.0)
@click.option("--sample-count", type=int,
              default=counting.DEFAULT_SAMPLE_COUNT)
def count(raw_dir, out_file, spec_file, n_sigma, sample_count):
    """Offline single-threaded counting over fallback raw files."""
    from .bench import oracle_count_raw

    spec = ScanSpec.from_file(spec_file)
    scan = oracle_count_raw(raw_dir, spec, n_sigma, sample_count)
    from .sparse import write_sparse
    write_sparse(out_file, scan)
    click.echo(f"{len(scan.frames)} frames, {scan.n_events} events "
               f"-> {out_file}")


@main.command()
@click.option("--port", type=int, default=8000)
@click.option("--state-server", "state_addr", default=None,
              help="host:port of an existing state server; spawned "
                   "locally when omitted.")
@click.option("--records", type=click.Path(), default="scan-records.jsonl")
@click.option("--out", "out_dir", type=click.Path(), default="consumer-output")
def orchestrate(port, state_addr, records, out_dir):
    """Run the orchestrator HTTP API (and optionally a state server)."""
    import uvicorn
    from .orchestrator import Orchestrator, ProcessLauncher, create_app

    if state_addr is None:
        server = StateServer()
        address = server.address
        click.echo(f"state server on {address[0]}:{address[1]}")
    else:
        address = parse_address(state_addr)
    url = f"http://127.0.0.1:{port}"
    launcher = ProcessLauncher(address, Path(out_dir), orchestrator_url=url)
    orch = Orchestrator(address, records, launcher=launcher, out_dir=out_dir)
    app = create_app(orch)
    try:
        uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
    finally:
        orch.close()


@main.command("state-server")
@click.option("--listen", default="127.0.0.1:0")
def state_server(listen):
    """Run a standalone clone-pattern state server."""
    host, port = parse_address(listen)
    server = StateServer(host, port)
    click.echo(f"state server on {server.address[0]}:{server.address[1]}")
    _wait_for_signal()
    server.close()


@main.group()
def bench():
    """Benchmarking commands."""


@bench.command("run")
@click.option("--dims", default="64x64,128x128",
              help="Comma-separated scan raster dims, e.g. 64x64,128x128.")
@click.option("--trials", type=int, default=10)
@click.option("--mode", type=click.Choice(["both", "streaming",
                                           "file_transfer"]), default="both")
@click.option("--out", "out_dir", type=click.Path(), default="report")
@click.option("--nodegroups", type=int, default=2)
@click.option("--frame-geometry", default="128x128",
              help="Reduced detector geometry for desk-scale runs.")
@click.option("--full-geometry", is_flag=True,
              help="Use the full 576x576 detector geometry.")
@click.option("--work-dir", type=click.Path(), default=None)
@click.option("--event-rate", type=float, default=10.0)
@click.option("--seed", type=int, default=1234)
def bench_run(dims, trials, mode, out_dir, nodegroups, frame_geometry,
              full_geometry, work_dir, event_rate, seed):
    """Run the streaming vs file-transfer trial matrix and report."""
    import tempfile
    from .bench import BenchConfig, run_matrix, write_report

    dim_list = [_parse_dims(d) for d in dims.split(",") if d]
    frows, fcols = (576, 576) if full_geometry else _parse_dims(frame_geometry)
    config = BenchConfig(dims=dim_list, trials=trials,
                         n_nodegroups=nodegroups, frame_rows=frows,
                         frame_cols=fcols, event_rate=event_rate, seed=seed)
    if work_dir is None:
        with tempfile.TemporaryDirectory(prefix="stream4d-bench-") as tmp:
            samples = run_matrix(config, tmp, mode)
            report = write_report(samples, out_dir)
    else:
        samples = run_matrix(config, work_dir, mode)
        report = write_report(samples, out_dir)
    click.echo(Path(report["table"]).read_text())
    click.echo(f"report written to {out_dir}")


def _parse_dims(text: str) -> tuple[int, int]:
    rows, _, cols = text.lower().partition("x")
    return int(rows), int(cols)


def _wait_for_signal() -> None:
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    while not stop.is_set():
        time.sleep(0.2)


if __name__ == "__main__":
    main()
