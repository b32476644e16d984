"""Builder-level aggregation: market share, profitability classes, order-flow
and transparency compositions, entropy, MSOF, block packing and EOF providers.

Aggregation is a fold over :class:`BlockFacts`. Accumulators only hold sums
and counters, so shards can be merged in any order.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .ingest import WEI_PER_ETH, BlockRecord, Registries
from .labeler import ORDER_FLOW_LABELS, TRANSPARENCY_LABELS, BlockLabels
from .metrics import BlockEconomics, settlement_indices, transaction_values

DEFAULT_DUST_WEI = WEI_PER_ETH // 1000  # 0.001 ETH
POSITIONS = ("ToB", "BoB", "EoB")
PROFIT_CLASSES = ("profitable", "neutral", "subsidized")
MAX_ENTROPY = math.log2(len(ORDER_FLOW_LABELS))

OFA_PROVIDERS = {
    "mev_share": "Flashbots Protect",
    "cowswap_mevblocker": "MEVBlocker",
    "matching_address": "OFA matching-address",
}


def classify_profitability(builder_profit: int, dust: int = DEFAULT_DUST_WEI) -> str:
    if builder_profit > dust:
        return "profitable"
    if builder_profit < -dust:
        return "subsidized"
    return "neutral"


def position_classes(n: int) -> list[str]:
    """ToB/BoB/EoB class of each index 0..n-1 by normalized index i/n."""
    out = []
    for i in range(n):
        if 10 * i < n:
            out.append("ToB")
        elif 10 * i >= 9 * n:
            out.append("EoB")
        else:
            out.append("BoB")
    return out


def shannon_entropy(composition: Sequence[float]) -> float:
    """Entropy in bits of a share vector; zero shares are skipped."""
    if any(p < 0 or not math.isfinite(p) for p in composition):
        raise ValueError("composition has negative or non-finite entries")
    if abs(math.fsum(composition) - 1.0) > 1e-9:
        raise ValueError(f"composition sums to {math.fsum(composition)!r}, not 1")
    h = -math.fsum(p * math.log2(p) for p in composition if p > 0)
    return h if h > 0 else 0.0


@dataclass(frozen=True)
class Msof:
    label: str
    share: float
    tie: bool = False


def msof(composition: Sequence[float], labels: Sequence[str] = ORDER_FLOW_LABELS) -> Msof | None:
    """Most significant order flow: the arg-max label, first in enum order on ties."""
    if len(composition) != len(labels):
        raise ValueError("composition and labels differ in length")
    best = max(composition) if composition else 0
    if best <= 0:
        return None
    idx = [i for i, p in enumerate(composition) if p == best]
    return Msof(labels[idx[0]], best, len(idx) > 1)


def _shares(values: Sequence[int]) -> list[float]:
    total = sum(values)
    if total <= 0:
        return [0.0] * len(values)
    return [float(Fraction(v, total)) for v in values]


# -- per-block facts -------------------------------------------------------------

@dataclass(frozen=True)
class TxFact:
    index: int
    transparency: str
    order_flow: str
    value: int
    gas: int
    sender: str
    recipient: str | None
    builder_tx: bool
    position: str | None
    provider_key: str | None  # raw EOF provider key, resolved at finalize


@dataclass(frozen=True)
class BlockFacts:
    slot: int
    builder_id: str
    timestamp: int
    economics: BlockEconomics
    txs: tuple[TxFact, ...]

    @property
    def date(self) -> str:
        return datetime.fromtimestamp(self.timestamp, tz=timezone.utc).strftime("%Y-%m-%d")


def _provider_key(tx, transparency: str, bundle_kind: str | None, registries: Registries) -> str | None:
    if transparency == "ofa_bundle":
        return "name:" + OFA_PROVIDERS.get(bundle_kind or "", "OFA")
    if transparency != "exclusive_signal":
        return None
    name = (
        registries["eof_provider"].get(tx.sender)
        or registries["eof_provider"].get(tx.recipient)
        or registries["searcher"].get(tx.sender)
    )
    if name:
        return "name:" + name
    return "addr:" + tx.sender


def block_facts(block: BlockRecord, labeled: BlockLabels, econ: BlockEconomics,
                registries: Registries) -> BlockFacts:
    settle = settlement_indices(block, registries) if not econ.excluded else frozenset()
    values = transaction_values(block, labeled.bundles, settle)
    builder_txs = {t.block_index for t in block.transactions if t.sender == block.fee_recipient} | set(settle)
    kept = [t.block_index for t in block.transactions if t.block_index not in builder_txs]
    pos = dict(zip(kept, position_classes(len(kept))))
    facts = []
    for lt in labeled.labels:
        tx = lt.tx
        is_builder = tx.block_index in builder_txs
        kind = lt.bundle.kind if lt.bundle is not None else None
        facts.append(TxFact(
            index=tx.block_index,
            transparency=lt.transparency,
            order_flow=lt.order_flow,
            value=values.get(tx.block_index, 0),
            gas=tx.gas_used,
            sender=tx.sender,
            recipient=tx.recipient,
            builder_tx=is_builder,
            position=pos.get(tx.block_index),
            provider_key=None if is_builder else _provider_key(tx, lt.transparency, kind, registries),
        ))
    return BlockFacts(block.slot, block.builder_id, block.timestamp, econ, tuple(facts))


# -- accumulation ------------------------------------------------------------------

@dataclass
class ProfileAccumulator:
    blocks: int = 0
    excluded_blocks: int = 0
    excluded_value: int = 0
    true_value: int = 0
    profit: int = 0
    validator_payment: int = 0
    relay_payment: int = 0
    subsidy: int = 0
    margin_sum: Fraction = Fraction(0)
    margin_blocks: int = 0
    classes: Counter = field(default_factory=Counter)
    other_payer_blocks: int = 0
    reported_blocks: int = 0
    promise_delivered: int = 0
    over_promised: int = 0
    under_promised: int = 0
    of_value: Counter = field(default_factory=Counter)
    of_gas: Counter = field(default_factory=Counter)
    tr_value: Counter = field(default_factory=Counter)
    tr_gas: Counter = field(default_factory=Counter)
    position_value: Counter = field(default_factory=Counter)
    eof_value: Counter = field(default_factory=Counter)

    def add(self, facts: BlockFacts, dust: int) -> None:
        e = facts.economics
        self.blocks += 1
        if e.excluded:
            self.excluded_blocks += 1
            self.excluded_value += e.excluded_value
            return
        self.true_value += e.true_value
        self.profit += e.builder_profit
        self.validator_payment += e.validator_payment
        self.relay_payment += e.relay_payment
        if e.builder_profit < 0:
            self.subsidy += -e.builder_profit
        if e.profit_margin is not None:
            # exact sum, so merged shards agree regardless of order
            self.margin_sum += Fraction(e.builder_profit, e.true_value)
            self.margin_blocks += 1
        self.classes[classify_profitability(e.builder_profit, dust)] += 1
        if e.payment_payer == "related_address":
            self.other_payer_blocks += 1
        if e.over_promised is not None:
            self.reported_blocks += 1
            self.over_promised += e.over_promised
            self.under_promised += e.under_promised
            if e.over_promised == 0:
                self.promise_delivered += 1
        for t in facts.txs:
            self.of_value[t.order_flow] += t.value
            self.of_gas[t.order_flow] += t.gas
            self.tr_value[t.transparency] += t.value
            self.tr_gas[t.transparency] += t.gas
            if t.position is not None:
                self.position_value[t.position] += t.value
            if t.provider_key is not None:
                self.eof_value[t.provider_key] += t.value

    def merge(self, other: "ProfileAccumulator") -> "ProfileAccumulator":
        out = ProfileAccumulator()
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, Counter):
                merged = Counter(a)
                merged.update(b)
                setattr(out, name, merged)
            else:
                setattr(out, name, a + b)
        return out


@dataclass
class CorpusAccumulator:
    """Everything the reports need, merged associatively across shards."""

    builders: dict = field(default_factory=lambda: defaultdict(ProfileAccumulator))
    daily: dict = field(default_factory=lambda: defaultdict(lambda: defaultdict(ProfileAccumulator)))
    label_blocks: Counter = field(default_factory=Counter)
    tx_counts: Counter = field(default_factory=Counter)
    of_by_transparency: Counter = field(default_factory=Counter)
    of_by_transparency_value: Counter = field(default_factory=Counter)
    block_eof: dict = field(default_factory=dict)
    dust: int = DEFAULT_DUST_WEI

    def add(self, facts: BlockFacts) -> None:
        acc = self.builders[facts.builder_id]
        acc.add(facts, self.dust)
        self.daily[facts.date][facts.builder_id].add(facts, self.dust)
        if facts.economics.excluded:
            return
        seen = set()
        eof = Counter()
        for t in facts.txs:
            seen.add(("transparency", t.transparency))
            seen.add(("order_flow", t.order_flow))
            self.tx_counts[("transparency", t.transparency)] += 1
            self.tx_counts[("order_flow", t.order_flow)] += 1
            self.of_by_transparency[(t.order_flow, t.transparency)] += 1
            self.of_by_transparency_value[(t.order_flow, t.transparency)] += t.value
            if t.provider_key is not None:
                eof[t.provider_key] += t.value
        for key in seen:
            self.label_blocks[key] += 1
        self.block_eof[facts.slot] = (facts.builder_id, eof)

    def merge(self, other: "CorpusAccumulator") -> "CorpusAccumulator":
        out = CorpusAccumulator(dust=self.dust)
        for src in (self, other):
            for b, acc in src.builders.items():
                out.builders[b] = out.builders[b].merge(acc)
            for d, per in src.daily.items():
                for b, acc in per.items():
                    out.daily[d][b] = out.daily[d][b].merge(acc)
            out.label_blocks.update(src.label_blocks)
            out.tx_counts.update(src.tx_counts)
            out.of_by_transparency.update(src.of_by_transparency)
            out.of_by_transparency_value.update(src.of_by_transparency_value)
            out.block_eof.update(src.block_eof)
        return out


# -- finalisation ------------------------------------------------------------------

@dataclass(frozen=True)
class BuilderProfile:
    builder_id: str
    total_blocks: int
    market_share: Fraction
    excluded_blocks: int
    total_true_value: int
    total_profit: int
    total_subsidy: int
    total_validator_payment: int
    total_relay_payment: int
    profit_margin: float | None
    mean_block_margin: float | None
    profitable_fraction: float
    neutral_fraction: float
    subsidized_fraction: float
    class_counts: Mapping[str, int]
    of_composition: tuple[float, ...]
    transparency_composition: tuple[float, ...]
    entropy: float | None
    msof: Msof | None
    position_split: tuple[float, ...]
    position_value: tuple[int, ...]
    eof_provider_shares: Mapping[str, float]
    eof_provider_value: Mapping[str, int]
    excluded_value: int
    other_payer_fraction: float
    promise_delivered_fraction: float | None
    over_promised: int
    under_promised: int


class ProviderNames:
    """Maps raw provider keys to display names.

    Unregistered senders are enumerated ``provider#1``, ``provider#2``, ... in
    address order, which keeps naming independent of processing order.
    """

    def __init__(self, keys: Iterable[str]):
        addrs = sorted({k[5:] for k in keys if k.startswith("addr:")})
        self._enum = {a: f"provider#{i}" for i, a in enumerate(addrs, start=1)}

    def __call__(self, key: str) -> str:
        if key.startswith("name:"):
            return key[5:]
        return self._enum[key[5:]]

    def aggregate(self, values: Mapping[str, int]) -> dict[str, int]:
        out: Counter = Counter()
        for k, v in values.items():
            out[self(k)] += v
        return dict(out)


def eof_provider_shares(values: Mapping[str, int]) -> dict[str, float]:
    """Normalize provider -> exclusive value into shares of the builder's total."""
    total = sum(values.values())
    if total <= 0:
        return {k: 0.0 for k in values}
    return {k: float(Fraction(v, total)) for k, v in sorted(values.items())}


def finalize_profile(builder: str, acc: ProfileAccumulator, all_blocks: int,
                     names: ProviderNames) -> BuilderProfile:
    counted = acc.blocks - acc.excluded_blocks
    cls = {c: acc.classes.get(c, 0) for c in PROFIT_CLASSES}
    fr = {c: (cls[c] / counted if counted else 0.0) for c in PROFIT_CLASSES}
    of = _shares([acc.of_value.get(l, 0) for l in ORDER_FLOW_LABELS])
    tr = _shares([acc.tr_value.get(l, 0) for l in TRANSPARENCY_LABELS])
    has_value = sum(of) > 0
    eof_vals = names.aggregate(acc.eof_value)
    return BuilderProfile(
        builder_id=builder,
        total_blocks=acc.blocks,
        market_share=Fraction(acc.blocks, all_blocks) if all_blocks else Fraction(0),
        excluded_blocks=acc.excluded_blocks,
        total_true_value=acc.true_value,
        total_profit=acc.profit,
        total_subsidy=acc.subsidy,
        total_validator_payment=acc.validator_payment,
        total_relay_payment=acc.relay_payment,
        profit_margin=float(Fraction(acc.profit, acc.true_value)) if acc.true_value > 0 else None,
        mean_block_margin=float(acc.margin_sum / acc.margin_blocks) if acc.margin_blocks else None,
        profitable_fraction=fr["profitable"],
        neutral_fraction=fr["neutral"],
        subsidized_fraction=fr["subsidized"],
        class_counts=cls,
        of_composition=tuple(of),
        transparency_composition=tuple(tr),
        entropy=shannon_entropy(of) if has_value else None,
        msof=msof(of),
        position_split=tuple(_shares([acc.position_value.get(p, 0) for p in POSITIONS])),
        position_value=tuple(acc.position_value.get(p, 0) for p in POSITIONS),
        eof_provider_shares=eof_provider_shares(eof_vals),
        eof_provider_value=dict(sorted(eof_vals.items())),
        excluded_value=acc.excluded_value,
        other_payer_fraction=acc.other_payer_blocks / counted if counted else 0.0,
        promise_delivered_fraction=acc.promise_delivered / acc.reported_blocks if acc.reported_blocks else None,
        over_promised=acc.over_promised,
        under_promised=acc.under_promised,
    )


def provider_names(corpus: CorpusAccumulator) -> ProviderNames:
    keys = set()
    for acc in corpus.builders.values():
        keys.update(acc.eof_value)
    return ProviderNames(keys)


def build_profiles(corpus: CorpusAccumulator) -> list[BuilderProfile]:
    """One profile per builder, ordered by block count (desc) then name."""
    total = sum(a.blocks for a in corpus.builders.values())
    names = provider_names(corpus)
    out = [
        finalize_profile(b, acc, total, names)
        for b, acc in corpus.builders.items()
    ]
    out.sort(key=lambda p: (-p.total_blocks, p.builder_id))
    return out


def aggregate(facts: Iterable[BlockFacts], dust: int = DEFAULT_DUST_WEI) -> CorpusAccumulator:
    corpus = CorpusAccumulator(dust=dust)
    for f in facts:
        corpus.add(f)
    return corpus
