"""Relay bid telemetry: bids per slot, update lag, cancellations and winner
time, aggregated per builder.

Bids from several pubkeys of one builder are merged into one stream before
anything is measured. Per-builder aggregates are plain sums (fractions for the
means), so slots can be processed in any order and merged afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .ingest import BidRecord

MAINNET_GENESIS = 1606824023
SLOT_SECONDS = 12
CANCEL_MODES = ("running_max", "previous")


def slot_start_ms(slot: int, genesis_time: int = MAINNET_GENESIS) -> int:
    return (genesis_time + SLOT_SECONDS * slot) * 1000


@dataclass(frozen=True)
class SlotBidBook:
    slot: int
    genesis_time: int
    bids: Mapping[str, tuple[BidRecord, ...]]  # builder_id -> time-sorted bids
    winner: BidRecord | None

    @classmethod
    def from_bids(cls, slot: int, bids: Iterable[BidRecord], genesis_time: int = MAINNET_GENESIS) -> "SlotBidBook":
        per: dict[str, list[BidRecord]] = {}
        winner = None
        for b in bids:
            if b.slot != slot:
                raise ValueError(f"bid for slot {b.slot} in book for slot {slot}")
            per.setdefault(b.builder_id, []).append(b)
            if b.won:
                if winner is not None:
                    raise ValueError(f"slot {slot}: more than one winning bid")
                winner = b
        books = {k: tuple(sorted(v, key=lambda b: (b.received_at, b.builder_pubkey, b.value)))
                 for k, v in sorted(per.items())}
        return cls(slot, genesis_time, books, winner)

    @property
    def start_ms(self) -> int:
        return slot_start_ms(self.slot, self.genesis_time)


def update_lag(times: Sequence[int]) -> Fraction | None:
    """Mean gap between successive bids (ms); None for fewer than two bids."""
    if len(times) < 2:
        return None
    return Fraction(times[-1] - times[0], len(times) - 1)


def count_cancellations(values: Sequence[int], mode: str = "running_max") -> int:
    """Bids lowered below the running maximum (or below the previous bid)."""
    if mode not in CANCEL_MODES:
        raise ValueError(f"unknown cancellation mode {mode!r}")
    n = 0
    ref = None
    for v in values:
        if ref is not None and v < ref:
            n += 1
        if mode == "previous" or ref is None or v > ref:
            ref = v
    return n


def bid_stats(book: SlotBidBook) -> dict[str, tuple[int, Fraction | None]]:
    return {b: (len(bs), update_lag([x.received_at for x in bs])) for b, bs in book.bids.items()}


def detect_cancellations(book: SlotBidBook, mode: str = "running_max") -> dict[str, int]:
    return {b: count_cancellations([x.value for x in bs], mode) for b, bs in book.bids.items()}


def winner_time(book: SlotBidBook) -> tuple[str, int] | None:
    """(winning builder, ms after slot start); negative when the bid came early."""
    if book.winner is None:
        return None
    return book.winner.builder_id, book.winner.received_at - book.start_ms


@dataclass
class BidAccumulator:
    slots: int = 0  # slots with at least one bid
    bids: int = 0
    lag_sum: Fraction = Fraction(0)
    lag_slots: int = 0
    cancels: int = 0
    won: int = 0
    winner_time_sum: int = 0

    def merge(self, other: "BidAccumulator") -> "BidAccumulator":
        return BidAccumulator(*(getattr(self, f) + getattr(other, f) for f in self.__dataclass_fields__))


@dataclass
class BidAggregate:
    builders: dict[str, BidAccumulator] = field(default_factory=dict)
    cancel_mode: str = "running_max"

    def _acc(self, builder: str) -> BidAccumulator:
        acc = self.builders.get(builder)
        if acc is None:
            acc = self.builders[builder] = BidAccumulator()
        return acc

    def add(self, book: SlotBidBook) -> None:
        cancels = detect_cancellations(book, self.cancel_mode)
        for builder, (count, lag) in bid_stats(book).items():
            acc = self._acc(builder)
            acc.slots += 1
            acc.bids += count
            acc.cancels += cancels[builder]
            if lag is not None:
                acc.lag_sum += lag
                acc.lag_slots += 1
        w = winner_time(book)
        if w is not None:
            acc = self._acc(w[0])
            acc.won += 1
            acc.winner_time_sum += w[1]

    def merge(self, other: "BidAggregate") -> "BidAggregate":
        out = BidAggregate(cancel_mode=self.cancel_mode)
        for src in (self, other):
            for b, acc in src.builders.items():
                out.builders[b] = out._acc(b).merge(acc)
        return out


@dataclass(frozen=True)
class BuilderBidMetrics:
    builder_id: str
    total_blocks: int  # slots won
    slots_bid: int
    avg_bids: float | None
    avg_update_lag_ms: float | None
    avg_winner_time_ms: float | None
    total_cancels: int
    avg_cancels: float | None


def finalize(agg: BidAggregate) -> list[BuilderBidMetrics]:
    """Per-builder table ordered by slots won (desc), then name.

    Bid counts and cancellations are averaged over every slot the builder bid
    in; winner time over the slots it won; update lag over slots with at
    least two bids.
    """
    out = []
    for b, a in agg.builders.items():
        out.append(BuilderBidMetrics(
            builder_id=b,
            total_blocks=a.won,
            slots_bid=a.slots,
            avg_bids=a.bids / a.slots if a.slots else None,
            avg_update_lag_ms=float(a.lag_sum / a.lag_slots) if a.lag_slots else None,
            avg_winner_time_ms=a.winner_time_sum / a.won if a.won else None,
            total_cancels=a.cancels,
            avg_cancels=a.cancels / a.slots if a.slots else None,
        ))
    out.sort(key=lambda m: (-m.total_blocks, m.builder_id))
    return out


def aggregate_slots(by_slot: Mapping[int, Sequence[BidRecord]], genesis_time: int = MAINNET_GENESIS,
                    cancel_mode: str = "running_max") -> BidAggregate:
    agg = BidAggregate(cancel_mode=cancel_mode)
    for slot, bids in by_slot.items():
        agg.add(SlotBidBook.from_bids(slot, bids, genesis_time))
    return agg
