"""Transparency and order-flow labelling of block transactions.

Every transaction receives exactly one transparency label and one order-flow
label. OFA bundles are found first (greedy, left to right, no overlap) because
bundle membership decides both the transparency label and the ``ofa_backrun``
order-flow label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .ingest import GWEI, BlockRecord, Registries, TransactionRecord

TRANSPARENCY_LABELS = ("public_signal", "exclusive_signal", "ofa_bundle")

ORDER_FLOW_LABELS = (
    "atomic_arb",
    "non_atomic_arb",
    "sandwich",
    "liquidation",
    "telegram_bot",
    "solver_model",
    "cex_deposit",
    "retail_swap",
    "bot_swap",
    "ofa_backrun",
    "other_public",
    "other_exclusive",
)

BUNDLE_KINDS = ("cowswap_mevblocker", "matching_address", "mev_share")

NON_ATOMIC_MAX_GAS = 400_000
NON_ATOMIC_MIN_TIP_PER_GAS = 1 * GWEI

_MEV_LABEL_MAP = {
    "atomic_arb": "atomic_arb",
    "sandwich_front": "sandwich",
    "sandwich_back": "sandwich",
    "liquidation": "liquidation",
}

# position of each order-flow label in the labelling cascade
CASCADE_RULE = {
    "ofa_backrun": 1,
    "atomic_arb": 2, "sandwich": 2, "liquidation": 2, "non_atomic_arb": 2,
    "telegram_bot": 3,
    "solver_model": 4,
    "cex_deposit": 5,
    "retail_swap": 6, "bot_swap": 6,
    "other_public": 7, "other_exclusive": 7,
}


@dataclass(frozen=True)
class OfaBundle:
    kind: str
    start_index: int
    backrun_tx: str
    refund_tx: str
    refund_value: int
    user_tx: str | None = None

    @property
    def members(self) -> tuple[str, ...]:
        if self.user_tx is None:
            return (self.backrun_tx, self.refund_tx)
        return (self.user_tx, self.backrun_tx, self.refund_tx)

    def role_of(self, tx_hash: str) -> str | None:
        if tx_hash == self.user_tx:
            return "user"
        if tx_hash == self.backrun_tx:
            return "backrun"
        if tx_hash == self.refund_tx:
            return "refund"
        return None


def _refund_covered(backrun: TransactionRecord, refund: TransactionRecord, builder: str) -> bool:
    # refund is a successful builder transfer of at most what the backrun paid
    return (
        refund.sender == builder
        and not refund.failed
        and refund.value > 0
        and backrun.tip_total + backrun.effective_coinbase >= refund.value
    )


def _refund_kind(refund: TransactionRecord, user: TransactionRecord | None,
                 registries: Registries) -> str | None:
    to = refund.recipient
    if to is None:
        return None
    if user is None:
        if to == registries.mevblocker_safe:
            return "cowswap_mevblocker"
        if to in registries["ofa_refund_address"]:
            return "mev_share"
        return None
    if user.recipient == registries.cowswap_settlement and to == registries.mevblocker_safe:
        return "cowswap_mevblocker"
    if user.has_token_activity:
        if to == user.sender:
            return "matching_address"
        if to in registries["ofa_refund_address"]:
            return "mev_share"
    return None


def detect_ofa_bundles(block: BlockRecord, registries: Registries) -> list[OfaBundle]:
    """Find user/backrun/refund triples and backrun/refund pairs.

    Triples are tried before pairs at each position; a matched transaction is
    consumed and never joins a second bundle.
    """
    txs = block.transactions
    builder = block.fee_recipient
    out: list[OfaBundle] = []
    i, n = 0, len(txs)
    while i < n:
        if i + 2 < n:
            user, backrun, refund = txs[i], txs[i + 1], txs[i + 2]
            if _refund_covered(backrun, refund, builder):
                kind = _refund_kind(refund, user, registries)
                if kind is not None:
                    out.append(OfaBundle(kind, i, backrun.hash, refund.hash, refund.value, user.hash))
                    i += 3
                    continue
        if i + 1 < n:
            backrun, refund = txs[i], txs[i + 1]
            if _refund_covered(backrun, refund, builder):
                kind = _refund_kind(refund, None, registries)
                if kind is not None:
                    out.append(OfaBundle(kind, i, backrun.hash, refund.hash, refund.value))
                    i += 2
                    continue
        i += 1
    return out


def label_transparency(tx: TransactionRecord, bundles: Sequence[OfaBundle]) -> str:
    if any(tx.hash in b.members for b in bundles):
        return "ofa_bundle"
    return "public_signal" if tx.seen_in_mempool else "exclusive_signal"


class BlockContext:
    """Per-block lookups shared by the order-flow heuristics."""

    def __init__(self, block: BlockRecord, bundles: Sequence[OfaBundle]):
        self.block = block
        self.bundles = tuple(bundles)
        self.bundle_of: dict[str, OfaBundle] = {}
        for b in self.bundles:
            for h in b.members:
                self.bundle_of[h] = b
        # first block_index at which each (pool, direction) is swapped
        self.first_swap: dict[tuple[str, str], int] = {}
        for tx in block.transactions:
            for key in tx.swap_pool_directions:
                self.first_swap.setdefault(key, tx.block_index)

    def neighbours(self, tx: TransactionRecord):
        txs = self.block.transactions
        i = tx.block_index
        if i > 0:
            yield txs[i - 1]
        if i + 1 < len(txs):
            yield txs[i + 1]

    def is_backrun(self, tx: TransactionRecord) -> bool:
        b = self.bundle_of.get(tx.hash)
        return b is not None and b.backrun_tx == tx.hash


def non_atomic_conditions(tx: TransactionRecord, ctx: BlockContext,
                          registries: Registries) -> dict[str, bool]:
    """Evaluate the six CEX-DEX arbitrage conditions individually."""
    pays = tx.tip_total >= NON_ATOMIC_MIN_TIP_PER_GAS * tx.gas_used or tx.effective_coinbase > 0
    if not pays:
        pays = any(n.sender == tx.sender and n.effective_coinbase > 0 for n in ctx.neighbours(tx))
    shape = (tx.erc20_transfer_count == 2 or tx.swap_count == 1) and tx.gas_used < NON_ATOMIC_MAX_GAS
    first = bool(tx.swap_pool_directions) and all(
        ctx.first_swap.get(k) == tx.block_index for k in tx.swap_pool_directions
    )
    router = tx.recipient in registries["known_router"] or tx.recipient in registries["solver_router"]
    return {
        "fee_or_coinbase": pays,
        "not_in_mempool": not tx.seen_in_mempool,
        "no_mev_label_or_bundle": tx.hash not in registries["mev_label"] and tx.hash not in ctx.bundle_of,
        "two_transfers_low_gas": shape,
        "first_swap_in_pool": first,
        "not_known_router": not router,
    }


def detect_non_atomic_arb(tx: TransactionRecord, ctx: BlockContext, registries: Registries) -> bool:
    return all(non_atomic_conditions(tx, ctx, registries).values())


def label_order_flow(tx: TransactionRecord, transparency: str, ctx: BlockContext,
                     registries: Registries) -> str:
    if ctx.is_backrun(tx):
        return "ofa_backrun"
    mev = registries["mev_label"].get(tx.hash)
    if mev in _MEV_LABEL_MAP:
        return _MEV_LABEL_MAP[mev]
    # sandwich victims fall through to their original objective
    if mev is None and detect_non_atomic_arb(tx, ctx, registries):
        return "non_atomic_arb"
    to = tx.recipient
    if to in registries["telegram_bot"]:
        return "telegram_bot"
    if to in registries["solver_router"]:
        return "solver_model"
    if to in registries["cex_deposit"]:
        return "cex_deposit"
    if tx.has_token_activity:
        if to in registries["known_router"] or to in registries["non_mev_contract"]:
            return "retail_swap"
        return "bot_swap"
    return "other_public" if transparency == "public_signal" else "other_exclusive"


@dataclass(frozen=True)
class LabeledTransaction:
    tx: TransactionRecord
    transparency: str
    order_flow: str
    bundle: OfaBundle | None = None

    @property
    def bundle_role(self) -> str | None:
        return None if self.bundle is None else self.bundle.role_of(self.tx.hash)


@dataclass(frozen=True)
class BlockLabels:
    block: BlockRecord
    bundles: tuple[OfaBundle, ...]
    labels: tuple[LabeledTransaction, ...]

    def bundle_id(self, bundle: OfaBundle) -> str:
        return f"{self.block.slot}:{bundle.start_index}"


def label_block(block: BlockRecord, registries: Registries) -> BlockLabels:
    bundles = detect_ofa_bundles(block, registries)
    ctx = BlockContext(block, bundles)
    out = []
    for tx in block.transactions:
        transparency = label_transparency(tx, bundles)
        flow = label_order_flow(tx, transparency, ctx, registries)
        out.append(LabeledTransaction(tx, transparency, flow, ctx.bundle_of.get(tx.hash)))
    return BlockLabels(block, tuple(bundles), tuple(out))


def labels_by_hash(block_labels: BlockLabels) -> Mapping[str, LabeledTransaction]:
    return {lt.tx.hash: lt for lt in block_labels.labels}
