"""Shared fixtures and synthetic-run builders."""

from __future__ import annotations

import pytest

from wattbench.loadgen import RequestRecord
from wattbench.metrics import Sample, classify
from wattbench.power import CounterReading, DomainKind
from wattbench.store import LoadedRun, RunManifest, RunRecord

BIG_RANGE_UJ = 2**48  # large enough that synthetic traces never wrap


def make_counters(watts: float, duration_ms: int, interval_ms: int = 1000) -> list[CounterReading]:
    """Cumulative readings for a constant-power source sampled on schedule."""
    return [
        CounterReading(t, int(watts * t * 1000))  # W * ms = 1000 uJ
        for t in range(0, duration_ms + 1, interval_ms)
    ]


def make_requests(
    n_success: int,
    warmup_ms: int,
    duration_ms: int,
    latency_ms: float = 25.0,
    n_failures: int = 0,
    endpoint: str = "login",
) -> list[RequestRecord]:
    span = duration_ms - warmup_ms
    records = [
        RequestRecord(endpoint, i % 10, warmup_ms + i * span // n_success, latency_ms, "success")
        for i in range(n_success)
    ]
    records += [
        RequestRecord(endpoint, 0, warmup_ms + i * span // max(n_failures, 1),
                      latency_ms, "failure:status_500")
        for i in range(n_failures)
    ]
    return sorted(records, key=lambda r: r.start_ms)


def make_loaded_run(
    run_id: str = "r1",
    commit_id: str = "c1",
    plan_hash: str = "plan0001",
    warmup_ms: int = 10_000,
    duration_ms: int = 110_000,
    cpu_watts: float = 10.0,
    dram_watts: float = 0.3,
    interval_ms: int = 1000,
    n_success: int = 1260,
    latency_ms: float = 25.0,
    host_cpu_percent: float = 33.3,
    extra_samples: list[Sample] | None = None,
    extra_requests: list[RequestRecord] | None = None,
) -> LoadedRun:
    record = RunRecord(
        run_id=run_id,
        commit_id=commit_id,
        plan_id="plan",
        plan_hash=plan_hash,
        repetition_index=0,
        status="valid",
        warmup_ms=warmup_ms,
        duration_ms=duration_ms,
        domains=[
            {"kind": "cpu_package", "max_range_uj": BIG_RANGE_UJ},
            {"kind": "dram", "max_range_uj": BIG_RANGE_UJ},
        ],
    )
    counters = {
        DomainKind.CPU_PACKAGE: make_counters(cpu_watts, duration_ms, interval_ms),
        DomainKind.DRAM: make_counters(dram_watts, duration_ms, interval_ms),
    }
    cpu_desc = classify("cpu_utilization")
    samples = [
        Sample(t, cpu_desc, "host", host_cpu_percent)
        for t in range(interval_ms, duration_ms + 1, interval_ms)
    ]
    if extra_samples:
        samples = sorted(samples + extra_samples, key=lambda s: s.timestamp_ms)
    requests = make_requests(n_success, warmup_ms, duration_ms, latency_ms)
    if extra_requests:
        requests = sorted(requests + extra_requests, key=lambda r: r.start_ms)
    manifest = RunManifest(run_id, commit_id, plan_hash, "valid", "2026-01-01T00:00:00+00:00", [])
    return LoadedRun(record, manifest, counters, samples, requests)


@pytest.fixture
def loaded_run() -> LoadedRun:
    return make_loaded_run()
