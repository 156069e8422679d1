"""Paged KV-cache accounting with chunked offload to a host tier.

Pages are single token positions, so sparse and full attention share one
indexing abstraction. The pool never recomputes a KV entry under the offload
policy: when the device fills, the oldest request's oldest pages are chunked
onto a FIFO transfer queue to host memory, and reload follows the same global
FIFO whenever space opens up. A request with any page off-device cannot run
attention and is excluded from batches until fully resident.

Two baselines exist for comparison. ``preempt`` evicts a whole request under
pressure and pays recomputation at re-admission. ``oracle`` reserves each
request's full eventual footprint at admission, which avoids both eviction
and offload at the price of idle reserved pages.

Transfers are page-granular and budgeted per direction per iteration, so a
chunk can land partially; chunking only sets how much a single pressure event
enqueues and what one transfer burst amortizes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .errors import ContractError, ImpossibleRequestError


class KvPolicy(str, Enum):
    OFFLOAD = "offload"
    PREEMPT = "preempt"
    ORACLE = "oracle"


@dataclass
class OffloadChunk:
    """A contiguous run of one request's pages moving device -> host."""

    request_id: int | str
    pages: tuple[int, ...]
    enqueue_iteration: int
    transferred: int = 0

    def __post_init__(self) -> None:
        if not self.pages:
            raise ContractError("empty offload chunk")
        if list(self.pages) != sorted(self.pages):
            raise ContractError("chunk pages must be in token order")

    @property
    def remaining(self) -> int:
        return len(self.pages) - self.transferred


@dataclass
class _RequestPages:
    arrival_seq: int
    resident: list[int] = field(default_factory=list)
    host: list[int] = field(default_factory=list)
    queued: int = 0  # pages sitting in the offload queue, still on device
    length: int = 0  # next page index to grant
    high_water: int = 0
    reserved: int = 0  # oracle-only: admitted footprint not yet written
    dropped: int = 0  # pages lost to preemption, recomputed at re-admission

    @property
    def live_pages(self) -> int:
        return len(self.resident) + len(self.host) + self.queued


@dataclass(frozen=True)
class AllocationResult:
    granted: bool
    enqueued: tuple[OffloadChunk, ...] = ()
    preempted: tuple[int | str, ...] = ()

    @property
    def pressure(self) -> bool:
        return not self.granted


@dataclass(frozen=True)
class TransferReport:
    offloaded_pages: int
    reloaded_pages: int


@dataclass(frozen=True)
class PoolSnapshot:
    iteration: int
    capacity_pages: int
    occupied_pages: int
    free_pages: int
    offloaded_pages: int
    recomputed_pages: int
    unique_pages: int

    @property
    def utilization(self) -> float:
        return self.occupied_pages / self.capacity_pages


@dataclass(frozen=True)
class UtilizationReport:
    utilization: tuple[float, ...]
    offloaded: tuple[int, ...]
    recomputation_ratio: float


class KvPool:
    def __init__(
        self,
        capacity_pages: int,
        page_bytes: int,
        chunk_pages: int = 64,
        policy: KvPolicy = KvPolicy.OFFLOAD,
    ) -> None:
        if capacity_pages < 1:
            raise ContractError("capacity must be at least one page")
        if chunk_pages < 1:
            raise ContractError("chunk size must be at least one page")
        if page_bytes < 0:
            raise ContractError("page_bytes cannot be negative")
        self.capacity_pages = capacity_pages
        self.page_bytes = page_bytes
        self.chunk_pages = chunk_pages
        self.policy = policy
        self._requests: dict[int | str, _RequestPages] = {}
        self._offload_queue: deque[OffloadChunk] = deque()
        # (request, page) pairs on host, in offload-completion order; reload
        # pops from the left so neither direction ever overtakes.
        self._host_fifo: deque[tuple[int | str, int]] = deque()
        self._arrivals = 0
        self.recomputed_pages = 0
        self.unique_pages = 0

    # -- admission ---------------------------------------------------------

    def admit(self, request_id: int | str, expected_total: int | None = None) -> bool:
        """Register a request. Under the oracle policy ``expected_total`` is
        required and the full footprint is reserved up front; admission fails
        (returns False) when the reservation does not fit."""
        slot = self._requests.get(request_id)
        if slot is not None and not self._is_preempted(slot):
            raise ContractError(f"request {request_id} already admitted")
        if self.policy is KvPolicy.ORACLE:
            if expected_total is None:
                raise ContractError("oracle policy needs the request's total footprint")
            if expected_total > self.capacity_pages:
                raise ImpossibleRequestError(
                    f"request needs {expected_total} pages, capacity is {self.capacity_pages}"
                )
            if expected_total > self.free_pages:
                return False
        if slot is None:
            slot = _RequestPages(arrival_seq=self._arrivals)
            self._arrivals += 1
            self._requests[request_id] = slot
        else:
            # Preempted request coming back; the high-water mark makes its
            # re-granted pages count as recomputed, not here.
            slot.dropped = 0
            slot.arrival_seq = self._arrivals
            self._arrivals += 1
        if self.policy is KvPolicy.ORACLE:
            slot.reserved = int(expected_total)  # type: ignore[arg-type]
        return True

    def _is_preempted(self, slot: _RequestPages) -> bool:
        return slot.dropped > 0 and slot.live_pages == 0

    # -- allocation --------------------------------------------------------

    def allocate(self, request_id: int | str, n_pages: int, iteration: int = 0) -> AllocationResult:
        """Grant ``n_pages`` new tail pages, or signal pressure after
        enqueuing enough victim chunks (offload) / evictions (preempt) for
        the allocation to fit once transfers drain."""
        if n_pages < 1:
            raise ContractError("allocation must request at least one page")
        slot = self._require(request_id)
        if n_pages > self.capacity_pages or slot.live_pages + n_pages > self.capacity_pages:
            raise ImpossibleRequestError(
                f"request {request_id} would hold {slot.live_pages + n_pages} pages, "
                f"capacity is {self.capacity_pages}"
            )
        if self.policy is KvPolicy.ORACLE:
            if n_pages > slot.reserved:
                raise ContractError("allocation exceeds the oracle reservation")
            slot.reserved -= n_pages
            self._grant(slot, n_pages)
            return AllocationResult(granted=True)
        if n_pages <= self.free_pages:
            self._grant(slot, n_pages)
            return AllocationResult(granted=True)
        if self.policy is KvPolicy.PREEMPT:
            evicted = self._preempt_until_fits(request_id, n_pages)
            if n_pages <= self.free_pages:
                self._grant(slot, n_pages)
                return AllocationResult(granted=True, preempted=evicted)
            return AllocationResult(granted=False, preempted=evicted)
        enqueued = self._enqueue_offloads(request_id, n_pages - self.free_pages, iteration)
        return AllocationResult(granted=False, enqueued=enqueued)

    def _grant(self, slot: _RequestPages, n_pages: int) -> None:
        start = slot.length
        slot.resident.extend(range(start, start + n_pages))
        slot.length += n_pages
        fresh = max(0, slot.length - slot.high_water)
        self.unique_pages += fresh
        self.recomputed_pages += n_pages - fresh
        slot.high_water = max(slot.high_water, slot.length)

    def _enqueue_offloads(
        self, requester: int | str, deficit: int, iteration: int
    ) -> tuple[OffloadChunk, ...]:
        # Victims in arrival order, oldest resident pages first, skipping the
        # requester (offloading its own pages cannot make its own tokens fit).
        pending = deficit - sum(c.remaining for c in self._offload_queue)
        chunks: list[OffloadChunk] = []
        victims = sorted(
            (rid for rid, s in self._requests.items() if rid != requester and s.resident),
            key=lambda rid: self._requests[rid].arrival_seq,
        )
        for rid in victims:
            victim = self._requests[rid]
            while pending > 0 and victim.resident:
                take = min(self.chunk_pages, pending, len(victim.resident))
                pages = tuple(victim.resident[:take])
                del victim.resident[:take]
                victim.queued += take
                chunk = OffloadChunk(rid, pages, enqueue_iteration=iteration)
                self._offload_queue.append(chunk)
                chunks.append(chunk)
                pending -= take
            if pending <= 0:
                break
        return tuple(chunks)

    def _preempt_until_fits(self, requester: int | str, n_pages: int) -> tuple[int | str, ...]:
        evicted: list[int | str] = []
        while n_pages > self.free_pages:
            victims = [
                rid
                for rid, s in self._requests.items()
                if rid != requester and s.live_pages > 0
            ]
            if not victims:
                break
            rid = max(victims, key=lambda r: self._requests[r].arrival_seq)
            slot = self._requests[rid]
            slot.dropped = slot.live_pages
            self._drop_queued(rid)
            slot.resident.clear()
            self._host_fifo = deque(p for p in self._host_fifo if p[0] != rid)
            slot.host.clear()
            slot.length = 0
            evicted.append(rid)
        return tuple(evicted)

    def _drop_queued(self, request_id: int | str) -> None:
        if self._requests[request_id].queued == 0:
            return
        kept: deque[OffloadChunk] = deque()
        for chunk in self._offload_queue:
            if chunk.request_id != request_id:
                kept.append(chunk)
        self._offload_queue = kept
        self._requests[request_id].queued = 0

    # -- transfers ---------------------------------------------------------

    def step(
        self,
        offload_budget_pages: int,
        reload_budget_pages: int,
        allow_reload: bool = True,
    ) -> TransferReport:
        """Drain both transfer queues within their per-iteration budgets.

        Offload frees device pages; reload consumes free pages. A step that
        begins with offload work pending does no reloading at all, and the
        caller additionally clears ``allow_reload`` while allocation pressure
        is outstanding, so the two directions cannot chase each other: space
        freed for a stalled allocation survives at least one step.
        """
        had_offloads = bool(self._offload_queue)
        offloaded = 0
        while offload_budget_pages > 0 and self._offload_queue:
            chunk = self._offload_queue[0]
            take = min(offload_budget_pages, chunk.remaining)
            slot = self._requests[chunk.request_id]
            moved = chunk.pages[chunk.transferred : chunk.transferred + take]
            chunk.transferred += take
            slot.queued -= take
            slot.host.extend(moved)
            self._host_fifo.extend((chunk.request_id, p) for p in moved)
            offloaded += take
            offload_budget_pages -= take
            if chunk.remaining == 0:
                self._offload_queue.popleft()
        reloaded = 0
        if allow_reload and not had_offloads and not self._offload_queue:
            while reload_budget_pages > 0 and self._host_fifo and self.free_pages > 0:
                rid, page = self._host_fifo.popleft()
                slot = self._requests[rid]
                slot.host.remove(page)
                slot.resident.append(page)
                slot.resident.sort()
                reloaded += 1
                reload_budget_pages -= 1
        return TransferReport(offloaded_pages=offloaded, reloaded_pages=reloaded)

    # -- lifecycle ---------------------------------------------------------

    def free_tail(self, request_id: int | str, n_pages: int) -> None:
        """Drop the newest pages (rejected draft entries). They are always
        still resident; their indices may be granted again for new tokens."""
        if n_pages == 0:
            return
        slot = self._require(request_id)
        if n_pages < 0 or n_pages > len(slot.resident):
            raise ContractError("tail free exceeds resident pages")
        tail = slot.resident[-n_pages:]
        if tail != list(range(slot.length - n_pages, slot.length)):
            raise ContractError("tail pages are not resident")
        del slot.resident[-n_pages:]
        slot.length -= n_pages
        slot.high_water = slot.length  # freed identities are dead, not pending redo
        if self.policy is KvPolicy.ORACLE:
            slot.reserved += n_pages

    def release(self, request_id: int | str) -> None:
        slot = self._require(request_id)
        self._drop_queued(request_id)
        self._host_fifo = deque(p for p in self._host_fifo if p[0] != request_id)
        del self._requests[request_id]

    # -- queries -----------------------------------------------------------

    def _require(self, request_id: int | str) -> _RequestPages:
        slot = self._requests.get(request_id)
        if slot is None:
            raise ContractError(f"unknown request {request_id}")
        return slot

    @property
    def occupied_pages(self) -> int:
        return sum(len(s.resident) + s.queued for s in self._requests.values())

    @property
    def reserved_pages(self) -> int:
        return sum(s.reserved for s in self._requests.values())

    @property
    def free_pages(self) -> int:
        return self.capacity_pages - self.occupied_pages - self.reserved_pages

    @property
    def offloaded_pages(self) -> int:
        return sum(len(s.host) for s in self._requests.values())

    @property
    def transfers_pending(self) -> bool:
        return bool(self._offload_queue) or bool(self._host_fifo)

    @property
    def utilization(self) -> float:
        return self.occupied_pages / self.capacity_pages

    def pages_of(self, request_id: int | str) -> tuple[int, ...]:
        slot = self._require(request_id)
        queued = [
            p
            for chunk in self._offload_queue
            if chunk.request_id == request_id
            for p in chunk.pages[chunk.transferred :]
        ]
        return tuple(sorted(slot.resident + slot.host + queued))

    def is_schedulable(self, request_id: int | str) -> bool:
        slot = self._require(request_id)
        return not slot.host and slot.queued == 0 and slot.dropped == 0

    def snapshot(self, iteration: int) -> PoolSnapshot:
        return PoolSnapshot(
            iteration=iteration,
            capacity_pages=self.capacity_pages,
            occupied_pages=self.occupied_pages,
            free_pages=self.free_pages,
            offloaded_pages=self.offloaded_pages,
            recomputed_pages=self.recomputed_pages,
            unique_pages=self.unique_pages,
        )

    def check(self) -> None:
        """Conservation and exclusivity invariants; cheap enough to call
        every simulated iteration."""
        occupied = 0
        for rid, slot in self._requests.items():
            if slot.queued != sum(
                c.remaining for c in self._offload_queue if c.request_id == rid
            ):
                raise ContractError(f"queued-page count out of sync for {rid}")
            pages = self.pages_of(rid)
            if len(pages) != slot.live_pages or len(set(pages)) != len(pages):
                raise ContractError(f"page multi-residency for {rid}")
            occupied += len(slot.resident) + slot.queued
        if occupied + self.reserved_pages + self.free_pages != self.capacity_pages:
            raise ContractError("page conservation violated")
        host_count = sum(1 for _ in self._host_fifo)
        if host_count != self.offloaded_pages:
            raise ContractError("host FIFO out of sync with per-request host lists")


def page_bytes_per_token(
    num_layers: int, num_kv_heads: int, head_dim: int, bytes_per_scalar: int = 2
) -> int:
    """Per-token KV footprint: K and V, every layer, every kv head."""
    return 2 * num_layers * num_kv_heads * head_dim * bytes_per_scalar


def offload_bandwidth_required(
    batch: int, page_bytes: int, iteration_latency_ms: float
) -> float:
    """Sustained device-to-host bandwidth (bytes/s) to keep up with new KV.

    Steady state produces one fresh page per request per iteration, so the
    transfer rate only has to match batch x page_bytes per step.
    """
    if batch < 0 or page_bytes < 0 or iteration_latency_ms <= 0:
        raise ContractError("bandwidth inputs must be positive")
    return batch * page_bytes / (iteration_latency_ms / 1000.0)


def utilization_report(snapshots: list[PoolSnapshot] | tuple[PoolSnapshot, ...]) -> UtilizationReport:
    if not snapshots:
        return UtilizationReport(utilization=(), offloaded=(), recomputation_ratio=0.0)
    last = snapshots[-1]
    ratio = last.recomputed_pages / last.unique_pages if last.unique_pages else 0.0
    return UtilizationReport(
        utilization=tuple(s.utilization for s in snapshots),
        offloaded=tuple(s.offloaded_pages for s in snapshots),
        recomputation_ratio=ratio,
    )
