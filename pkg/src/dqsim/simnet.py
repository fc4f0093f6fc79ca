"""Deterministic master-worker loop with bounded gradient staleness.

Simulated time is an integer clock; the master applies at most one gradient
per tick, so when it never idles the clock coincides with the update count.
Worker compute latency is drawn in ticks from a per-worker stream at dispatch
time, which makes every run a pure function of the configuration and seeds.

Staleness control. A gradient dispatched at model version ``v`` and applied
as update ``t`` has staleness ``t - v``. Two mechanisms keep that at most
``tau`` for every applied update without ever dropping a result:

* admission: at most ``tau + 1`` dispatched-but-unapplied gradients exist at
  any time (a worker asking for work beyond that waits for a free slot), and
* deadline ordering: the master consumes pending results
  earliest-arrival-first while slack allows, but a result is held back
  whenever consuming it would leave some older outstanding gradient unable
  to meet its own staleness deadline; when nothing is safely consumable the
  master idles until the oldest outstanding result arrives.

Stalling only delays results, so every dispatched gradient is eventually
applied within the epoch that produced it or discarded at the epoch barrier.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .codec import BitLedger, full_bits
from .problems import CompositeProblem

__all__ = [
    "FixedLatency",
    "UniformLatency",
    "GeometricLatency",
    "WorkerSpec",
    "StalenessRecord",
    "run_inner_loop",
    "epoch_barrier",
    "write_trace_csv",
]


@dataclass(frozen=True)
class FixedLatency:
    ticks: int

    def validate(self):
        if self.ticks < 1:
            raise ValueError(f"latency must be >= 1 tick, got {self.ticks}")

    def draw(self, rng: np.random.Generator) -> int:
        return self.ticks


@dataclass(frozen=True)
class UniformLatency:
    low: int
    high: int  # inclusive

    def validate(self):
        if self.low < 1 or self.high < self.low:
            raise ValueError(f"need 1 <= low <= high, got [{self.low}, {self.high}]")

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class GeometricLatency:
    p: float  # success probability; support {1, 2, ...}

    def validate(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"geometric p must be in (0, 1], got {self.p}")

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.geometric(self.p))


@dataclass(frozen=True)
class WorkerSpec:
    worker_id: int
    latency: FixedLatency | UniformLatency | GeometricLatency

    def validate(self):
        self.latency.validate()


@dataclass(frozen=True)
class StalenessRecord:
    """One applied update: update index, the model version its gradient was
    computed on, who computed it, and the clock tick it landed."""

    t: int
    version: int
    worker_id: int
    clock: int

    @property
    def staleness(self) -> int:
        return self.t - self.version


@dataclass
class _Task:
    seq: int
    worker_id: int
    version: int
    arrival: int
    payload: object


def _validate_loop_args(workers, tau, m):
    if not workers:
        raise ValueError("need at least one worker")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if m < 1:
        raise ValueError("m must be >= 1")
    ids = [w.worker_id for w in workers]
    if len(set(ids)) != len(ids):
        raise ValueError("worker ids must be unique")
    for w in workers:
        w.validate()


def _safe_choice(pending, outstanding, t, tau):
    """Earliest-arrived pending task whose consumption leaves every older
    outstanding task able to meet its staleness deadline, or None.

    With tasks ordered by dispatch, the j-th oldest applies no earlier than
    update t + j, so task positions past any zero-slack elder are unsafe. The
    oldest task itself is always safe, which gives liveness.
    """
    by_age = sorted(outstanding.values(), key=lambda task: task.seq)
    slack_ok = []  # slack_ok[p]: all tasks older than position p have slack
    ok = True
    for j, task in enumerate(by_age):
        slack_ok.append(ok)
        ok = ok and (task.version + tau - (t + j) >= 1)
    position = {task.seq: p for p, task in enumerate(by_age)}
    return next((task for task in pending if slack_ok[position[task.seq]]), None)


def run_inner_loop(
    workers: Sequence[WorkerSpec],
    tau: int,
    m: int,
    model_step: Callable[[int, int], object],
    worker_step: Callable[[int, object], object],
    apply_step: Callable[[int, object, StalenessRecord], None],
    latency_rngs: Sequence[np.random.Generator],
    on_arrival: Optional[Callable[[int, int, object], None]] = None,
) -> list[StalenessRecord]:
    """Run exactly ``m`` master updates over the given workers.

    ``model_step(worker_id, version)`` builds the master's broadcast at
    dispatch; ``worker_step(worker_id, model)`` computes the reply. Both are
    invoked at dispatch time in a deterministic order, so per-worker stream
    consumption is independent of event interleaving.
    ``apply_step(t, payload, record)`` mutates master state.
    ``on_arrival(clock, worker_id, payload)`` fires when a result reaches the
    master, applied or not; epoch-end leftovers are the caller's to discard.
    """
    _validate_loop_args(workers, tau, m)
    by_id = {w.worker_id: w for w in workers}
    rng_by_id = {w.worker_id: rng for w, rng in zip(workers, latency_rngs)}

    outstanding: dict[int, _Task] = {}
    pending: list[_Task] = []  # arrived, not applied; kept in arrival order
    ready: deque[int] = deque(sorted(by_id))
    records: list[StalenessRecord] = []
    clock = 0
    t = 0
    seq = 0
    max_slots = tau + 1

    def grant(worker_id: int, version: int) -> None:
        nonlocal seq
        latency = by_id[worker_id].latency.draw(rng_by_id[worker_id])
        payload = worker_step(worker_id, model_step(worker_id, version))
        outstanding[seq] = _Task(seq, worker_id, version, clock + latency, payload)
        seq += 1

    # Initial dispatch happens in the first tick's grant phase (clock 0).
    while t < m:
        # arrivals: results landing this tick, oldest grant first
        arrivals = sorted(
            (task for task in outstanding.values() if task.arrival == clock),
            key=lambda task: task.seq,
        )
        for task in arrivals:
            pending.append(task)
            ready.append(task.worker_id)
            if on_arrival is not None:
                on_arrival(clock, task.worker_id, task.payload)

        # apply phase: at most one update per tick; when nothing is safely
        # consumable the oldest outstanding task is in flight and the master
        # idles until it arrives
        if pending:
            chosen = _safe_choice(pending, outstanding, t, tau)
            if chosen is not None:
                record = StalenessRecord(t, chosen.version, chosen.worker_id, clock)
                apply_step(t, chosen.payload, record)
                records.append(record)
                pending.remove(chosen)
                del outstanding[chosen.seq]
                t += 1
                if t == m:
                    break

        # grant phase: fill free staleness slots, post-update model version
        while ready and len(outstanding) < max_slots:
            grant(ready.popleft(), t)

        clock += 1

    return records


def run_inner_loop_threads(
    workers: Sequence[WorkerSpec],
    tau: int,
    m: int,
    model_step: Callable[[int, int], object],
    worker_step: Callable[[int, object], object],
    apply_step: Callable[[int, object, StalenessRecord], None],
    on_arrival: Optional[Callable[[int, int, object], None]] = None,
) -> list[StalenessRecord]:
    """Real-thread variant of :func:`run_inner_loop`.

    One OS thread per worker; compute time replaces the latency model, so
    arrival order depends on the scheduler and determinism is forfeited. The
    staleness bound is enforced with the same admission and deadline rules.
    Workers share nothing: they receive model messages and return results by
    value over queues, and only the master thread touches master state (all
    model_step/apply_step calls happen here; worker_step runs on the worker's
    thread against its own streams).
    """
    import queue
    import threading

    _validate_loop_args(workers, tau, m)
    results: queue.Queue = queue.Queue()
    inboxes = {w.worker_id: queue.Queue() for w in workers}

    def worker_loop(worker_id: int):
        inbox = inboxes[worker_id]
        while True:
            item = inbox.get()
            if item is None:
                return
            seq, version, model = item
            results.put((seq, worker_id, version, worker_step(worker_id, model)))

    threads = [
        threading.Thread(target=worker_loop, args=(w.worker_id,), daemon=True)
        for w in workers
    ]
    for th in threads:
        th.start()

    outstanding: dict[int, _Task] = {}
    pending: list[_Task] = []
    ready: deque[int] = deque(sorted(w.worker_id for w in workers))
    records: list[StalenessRecord] = []
    t = 0
    seq = 0
    arrivals_seen = 0
    max_slots = tau + 1

    def drain(block: bool) -> bool:
        nonlocal arrivals_seen
        got = False
        while True:
            try:
                item = results.get(block=block and not got)
            except queue.Empty:
                break
            res_seq, worker_id, version, payload = item
            task = outstanding[res_seq]
            task.payload = payload
            task.arrival = arrivals_seen
            arrivals_seen += 1
            pending.append(task)
            ready.append(worker_id)
            if on_arrival is not None:
                on_arrival(task.arrival, worker_id, payload)
            got = True
            if block:
                break
        return got

    try:
        while t < m:
            while ready and len(outstanding) < max_slots:
                worker_id = ready.popleft()
                outstanding[seq] = _Task(seq, worker_id, t, -1, None)
                inboxes[worker_id].put((seq, t, model_step(worker_id, t)))
                seq += 1
            drain(block=not pending)
            chosen = _safe_choice(pending, outstanding, t, tau)
            if chosen is None:
                drain(block=True)
                continue
            record = StalenessRecord(t, chosen.version, chosen.worker_id,
                                     chosen.arrival)
            apply_step(t, chosen.payload, record)
            records.append(record)
            pending.remove(chosen)
            del outstanding[chosen.seq]
            t += 1
    finally:
        for inbox in inboxes.values():
            inbox.put(None)
        for th in threads:
            th.join()
    return records


def epoch_barrier(
    problem: CompositeProblem,
    snapshot: np.ndarray,
    n_workers: int,
    ledger: Optional[BitLedger] = None,
    step: int = 0,
) -> np.ndarray:
    """Synchronous full-batch gradient at the snapshot, map-reduce style.

    All workers receive the snapshot, each reduces its contiguous sample
    range, and the master sums partials in worker order before dividing by n.
    With one worker this is bit-for-bit the single-pass full gradient. The
    full-precision exchange is recorded under its own ledger kind so inner
    and barrier traffic stay separable.
    """
    if n_workers < 1:
        raise ValueError("need at least one worker")
    bounds = np.linspace(0, problem.n, n_workers + 1).astype(int)
    total = np.zeros(problem.d)
    for w in range(n_workers):
        lo, hi = int(bounds[w]), int(bounds[w + 1])
        if ledger is not None:
            ledger.record(step, "down", "full_barrier", full_bits(problem.d))
        if hi > lo:
            total += problem.grad_range_sum(lo, hi, snapshot)
        if ledger is not None:
            ledger.record(step, "up", "full_barrier", full_bits(problem.d))
    return total / problem.n


def write_trace_csv(path, rows: Sequence[dict]) -> None:
    """Per-update trace: t, D(t), worker, epoch, gradient message kind, bits."""
    fields = ["t", "D_t", "worker_id", "epoch", "message_kind", "bits"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
