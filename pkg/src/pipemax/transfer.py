"""CPU-GPU transfer modeling: layouts, timing, priorities, and channels.

A transfer costs a fixed per-fragment overhead plus bytes over bandwidth, so
the KV layout determines efficiency: a block-first layout moves one
contiguous fragment per paged block, while a layer-first layout shatters the
same block into layers * tensors fragments. Host-to-device and
device-to-host are independent full-duplex directions, each carrying one
transfer at a time.

Two priority lanes are kept per direction. Activation hand-offs between
pipeline stages are latency-critical and go to the high lane; bulk KV
prefetch/offload streams go to the low lane, split into block-sized chunks
so that a newly arrived activation waits at most one chunk: dispatch is
non-preemptive, but a low stream yields at its next chunk boundary.
"""

import math
from collections import deque
from dataclasses import dataclass, field

BLOCK_FIRST = "block_first"
LAYER_FIRST = "layer_first"
HIGH = "activation"
LOW = "kv"

_PRIORITY_RANK = {HIGH: 0, LOW: 1}


@dataclass(frozen=True)
class Layout:
    """How a paged KV block is laid out in memory for transfer purposes."""

    kind: str
    layers: int
    kv_tensors_per_layer: int = 2

    def __post_init__(self):
        if self.kind not in (BLOCK_FIRST, LAYER_FIRST):
            raise ValueError(f"unknown layout kind {self.kind!r}")
        if self.layers < 1 or self.kv_tensors_per_layer < 1:
            raise ValueError("layers and kv_tensors_per_layer must be >= 1")


@dataclass
class LinkChannel:
    """One direction of the full-duplex CPU-GPU link."""

    direction: str
    bandwidth: float
    per_transfer_overhead: float = 0.0
    busy_until: float = 0.0

    def __post_init__(self):
        if self.direction not in ("h2d", "d2h"):
            raise ValueError("direction must be 'h2d' or 'd2h'")
        if self.bandwidth < 0 or self.per_transfer_overhead < 0:
            raise ValueError("bandwidth and overhead must be nonnegative")


@dataclass
class TransferRequest:
    """A unit of data movement queued on one link direction."""

    priority: str
    direction: str
    bytes: int
    fragments: int = 1
    tag: object = None

    def __post_init__(self):
        if self.priority not in _PRIORITY_RANK:
            raise ValueError(f"unknown priority {self.priority!r}")
        if self.bytes < 0:
            raise ValueError("bytes must be nonnegative")
        if self.bytes > 0 and self.fragments < 1:
            raise ValueError("a nonempty transfer needs at least one fragment")


def fragments_per_block(layout: Layout) -> int:
    """Transfer fragments needed to move one KV block under the layout."""
    if layout.kind == BLOCK_FIRST:
        return 1
    return layout.layers * layout.kv_tensors_per_layer


def transfer_time(n_bytes: int, fragments: int, channel: LinkChannel) -> float:
    """Seconds to move n_bytes in `fragments` pieces; zero-byte transfers are elided."""
    if n_bytes < 0:
        raise ValueError("bytes must be nonnegative")
    if n_bytes == 0:
        return 0.0
    if fragments < 1:
        raise ValueError("fragments must be >= 1 for a nonempty transfer")
    if channel.bandwidth == 0:
        return math.inf
    return fragments * channel.per_transfer_overhead + n_bytes / channel.bandwidth


def link_utilization(n_bytes: int, fragments: int, channel: LinkChannel) -> float:
    """Fraction of the transfer spent actually moving bytes."""
    total = transfer_time(n_bytes, fragments, channel)
    if total == 0:
        return 1.0
    return (n_bytes / channel.bandwidth) / total


def plan_layer_offload(layer_kv_bytes: int, layer_compute_seconds: float,
                       channel: LinkChannel):
    """Exposed time of offloading one layer's freshly generated KV.

    The copy is issued as one contiguous fragment right after the layer's
    QKV projection and overlaps the rest of the layer's compute (the
    overlap window). Host-side re-layouting is free in simulated time.
    Returns (exposed_seconds, hidden).
    """
    if layer_kv_bytes < 0 or layer_compute_seconds < 0:
        raise ValueError("inputs must be nonnegative")
    exposed = max(0.0, transfer_time(layer_kv_bytes, 1, channel) - layer_compute_seconds)
    return exposed, exposed == 0.0


def chunk_kv_transfer(total_bytes: int, chunk_bytes: int, direction: str = "h2d",
                      tag: object = None) -> list:
    """Split a bulk KV stream into low-priority chunks of at most chunk_bytes.

    Chunking bounds how long a chunk keeps the link busy, which in turn
    bounds the queueing delay of any activation that arrives behind it.
    """
    if chunk_bytes <= 0:
        raise ValueError("chunk_bytes must be positive")
    if total_bytes < 0:
        raise ValueError("total_bytes must be nonnegative")
    out = []
    remaining = total_bytes
    while remaining > 0:
        size = min(chunk_bytes, remaining)
        out.append(TransferRequest(priority=LOW, direction=direction, bytes=size,
                                   fragments=1, tag=tag))
        remaining -= size
    return out


class TransferQueues:
    """Per-direction FIFO lanes, one per priority level."""

    def __init__(self):
        self._lanes = {
            "h2d": {HIGH: deque(), LOW: deque()},
            "d2h": {HIGH: deque(), LOW: deque()},
        }

    def __len__(self):
        return sum(len(lane) for d in self._lanes.values() for lane in d.values())

    def pending(self, direction: str) -> int:
        lanes = self._lanes[direction]
        return len(lanes[HIGH]) + len(lanes[LOW])


def submit_transfer(queues: TransferQueues, req: TransferRequest):
    """Enqueue a transfer request on its direction's priority lane."""
    queues._lanes[req.direction][req.priority].append(req)


def next_transfer(queues: TransferQueues, direction: str, now: float = 0.0):
    """Pop the transfer to dispatch next: oldest high-priority if any, else
    oldest low-priority, else None. Dispatch is non-preemptive; the caller
    only asks once the link is free."""
    lanes = queues._lanes[direction]
    if lanes[HIGH]:
        return lanes[HIGH].popleft()
    if lanes[LOW]:
        return lanes[LOW].popleft()
    return None


@dataclass
class _Stream:
    """A chunked low-priority stream queued on a ChannelSim."""

    submit_time: float
    chunks_left: int
    chunk_seconds: float
    last_chunk_seconds: float
    chunk_bytes: int
    tag: object
    total_bytes: int
    end_time: float = None
    started_at: float = None


@dataclass
class DispatchRecord:
    """One contiguous occupancy of the link, reported for tracing."""

    queued_at: float
    start: float
    end: float
    priority: str
    n_bytes: int
    chunks: int
    tag: object


class ChannelSim:
    """Single-direction link simulator with two priority lanes.

    High-priority transfers dispatch ahead of queued low-priority work; an
    in-flight low chunk finishes first (non-preemptive), so a high transfer
    waits at most one chunk. Low streams are modeled as runs of back-to-back
    chunks rather than individual queue entries; timing is identical because
    consecutive chunks pay the same per-chunk overhead either way.

    Submissions must arrive in nondecreasing time order. With
    `priority_enabled=False` the two lanes collapse into one FIFO ordered by
    submission, which models an orchestration-free baseline.
    """

    def __init__(self, direction: str, bandwidth: float, per_transfer_overhead: float = 0.0,
                 priority_enabled: bool = True, name: str = None):
        self.link = LinkChannel(direction=direction, bandwidth=bandwidth,
                                per_transfer_overhead=per_transfer_overhead)
        self.priority_enabled = priority_enabled
        self.name = name or direction
        self._fifo = deque()  # (kind, payload) in submission order
        self._last_submit = 0.0
        self.records = []

    # -- submission ---------------------------------------------------------

    def _check_order(self, when: float):
        if when < self._last_submit - 1e-12:
            raise ValueError(f"out-of-order submission on {self.name}: "
                             f"{when} after {self._last_submit}")
        self._last_submit = max(self._last_submit, when)

    def submit_stream(self, when: float, total_bytes: int, chunk_bytes: int,
                      tag: object = None) -> _Stream:
        """Queue a chunked low-priority stream; returns a handle whose end
        time is resolved by finish_stream()."""
        self._check_order(when)
        if total_bytes <= 0:
            return _Stream(when, 0, 0.0, 0.0, 0, tag, 0, end_time=when, started_at=when)
        n_chunks = -(-total_bytes // chunk_bytes)
        last = total_bytes - (n_chunks - 1) * chunk_bytes
        stream = _Stream(
            submit_time=when,
            chunks_left=n_chunks,
            chunk_seconds=transfer_time(chunk_bytes, 1, self.link),
            last_chunk_seconds=transfer_time(last, 1, self.link),
            chunk_bytes=chunk_bytes,
            tag=tag,
            total_bytes=total_bytes,
        )
        self._settle_low_until(when)
        self._fifo.append(("low", stream))
        return stream

    def submit_high(self, when: float, n_bytes: int, tag: object = None):
        """Dispatch a high-priority transfer; returns (start, end).

        Queued low work that can start strictly before `when` runs first;
        the chunk in flight at `when` completes, then this transfer goes.
        """
        self._check_order(when)
        if n_bytes <= 0:
            self.records.append(DispatchRecord(when, when, when, HIGH, 0, 0, tag))
            return when, when
        if self.priority_enabled:
            self._settle_low_until(when)
            start = max(when, self.link.busy_until)
        else:
            # FIFO baseline: drain everything already submitted.
            self._settle_low_until(math.inf)
            start = max(when, self.link.busy_until)
        end = start + transfer_time(n_bytes, 1, self.link)
        self.link.busy_until = end
        self.records.append(DispatchRecord(when, start, end, HIGH, n_bytes, 1, tag))
        return start, end

    # -- resolution -----------------------------------------------------------

    def _settle_low_until(self, horizon: float):
        """Run queued low chunks whose start would fall strictly before
        `horizon`; stop at the first chunk boundary at or past it."""
        while self._fifo:
            kind, stream = self._fifo[0]
            start = max(self.link.busy_until, stream.submit_time)
            if start >= horizon:
                break
            if stream.started_at is None:
                stream.started_at = start
            run_start = start
            chunks_before = stream.chunks_left
            # Run consecutive chunks of this stream until the horizon or the
            # stream is exhausted.
            while stream.chunks_left > 0:
                chunk_time = (stream.last_chunk_seconds if stream.chunks_left == 1
                              else stream.chunk_seconds)
                chunk_start = max(self.link.busy_until, stream.submit_time)
                if chunk_start >= horizon:
                    break
                self.link.busy_until = chunk_start + chunk_time
                stream.chunks_left -= 1
            ran = chunks_before - stream.chunks_left
            if ran > 0:
                seg_bytes = stream.chunk_bytes * ran
                if stream.chunks_left == 0:
                    # Last chunk may be partial.
                    n_total = -(-stream.total_bytes // stream.chunk_bytes)
                    seg_bytes -= n_total * stream.chunk_bytes - stream.total_bytes
                self.records.append(DispatchRecord(
                    stream.submit_time, run_start, self.link.busy_until, LOW,
                    seg_bytes, ran, stream.tag))
            if stream.chunks_left == 0:
                stream.end_time = self.link.busy_until
                self._fifo.popleft()
            else:
                break

    def finish_stream(self, stream: _Stream) -> float:
        """Drain the queue far enough to resolve this stream's end time."""
        if stream.end_time is None:
            self._settle_low_until(math.inf)
        if stream.end_time is None:
            raise RuntimeError("stream did not resolve; channel queue corrupted")
        return stream.end_time

    def drain(self) -> float:
        """Complete all queued work; returns the final busy_until."""
        self._settle_low_until(math.inf)
        return self.link.busy_until
