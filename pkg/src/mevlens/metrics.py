"""Per-block economics: true value, validator payment, relay payment, builder
profit and profit margin. Integer wei throughout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .ingest import BlockRecord, Registries, Registry
from .labeler import OfaBundle


@dataclass(frozen=True)
class ValidatorPayment:
    payment: int
    payer: str  # builder | related_address | none
    excluded: bool
    index: int | None = None


def identify_validator_payment(block: BlockRecord) -> ValidatorPayment:
    """Locate the transfer to the proposer's fee recipient, scanning from the tail.

    Blocks whose fee recipient *is* the proposer are flagged as excluded.
    """
    proposer = block.proposer_fee_recipient
    if proposer is not None and block.fee_recipient == proposer:
        return ValidatorPayment(0, "none", True)
    if proposer is None:
        return ValidatorPayment(0, "none", False)
    for tx in reversed(block.transactions):
        if tx.recipient == proposer and tx.value > 0 and not tx.failed:
            payer = "builder" if tx.sender == block.fee_recipient else "related_address"
            return ValidatorPayment(tx.value, payer, False, tx.block_index)
    return ValidatorPayment(0, "none", False)


def relay_payment_indices(block: BlockRecord, relay_fee: Registry) -> list[int]:
    return [
        tx.block_index
        for tx in block.transactions
        if tx.sender == block.fee_recipient
        and tx.recipient in relay_fee
        and tx.value > 0
        and not tx.failed
    ]


def relay_payment(block: BlockRecord, relay_fee: Registry) -> int:
    txs = block.transactions
    return sum(txs[i].value for i in relay_payment_indices(block, relay_fee))


def settlement_indices(block: BlockRecord, registries: Registries) -> frozenset[int]:
    """Indices of builder settlement transactions (validator and relay payments)."""
    out = set(relay_payment_indices(block, registries["relay_fee_address"]))
    vp = identify_validator_payment(block)
    if vp.index is not None:
        out.add(vp.index)
    return frozenset(out)


def transaction_values(block: BlockRecord, bundles: Sequence[OfaBundle],
                       settlement: Iterable[int] = ()) -> dict[int, int]:
    """Value each non-settlement transaction contributes to the block.

    Tip plus coinbase transfer (zero for failed transactions). An OFA refund is
    charged against the backrun it rebates, so the values sum to the block's
    true value and none is negative.
    """
    skip = set(settlement)
    refunds = {b.backrun_tx: b.refund_value for b in bundles}
    out = {}
    for tx in block.transactions:
        if tx.block_index in skip:
            continue
        out[tx.block_index] = tx.tip_total + tx.effective_coinbase - refunds.get(tx.hash, 0)
    return out


def true_block_value(block: BlockRecord, bundles: Sequence[OfaBundle],
                     settlement: Iterable[int] = ()) -> int:
    skip = set(settlement)
    gross = sum(
        tx.tip_total + tx.effective_coinbase
        for tx in block.transactions
        if tx.block_index not in skip
    )
    return gross - sum(b.refund_value for b in bundles)


def payload_value_discrepancy(reported: int, paid: int) -> tuple[int, int]:
    """(over_promised, under_promised) between relay-reported and paid value."""
    return max(0, reported - paid), max(0, paid - reported)


@dataclass(frozen=True)
class BlockEconomics:
    slot: int
    builder_id: str
    timestamp: int
    excluded: bool
    payment_payer: str
    true_value: int | None = None
    validator_payment: int | None = None
    relay_payment: int | None = None
    builder_profit: int | None = None
    profit_margin: float | None = None
    exclusion_reason: str | None = None
    over_promised: int | None = None
    under_promised: int | None = None
    # on-chain value of an excluded block, reported separately (never in profit aggregates)
    excluded_value: int = 0


def block_economics(block: BlockRecord, bundles: Sequence[OfaBundle],
                    registries: Registries) -> BlockEconomics:
    vp = identify_validator_payment(block)
    if vp.excluded:
        return BlockEconomics(
            slot=block.slot,
            builder_id=block.builder_id,
            timestamp=block.timestamp,
            excluded=True,
            payment_payer="none",
            exclusion_reason="proposer_is_fee_recipient",
            excluded_value=true_block_value(block, bundles),
        )
    settle = settlement_indices(block, registries)
    tv = true_block_value(block, bundles, settle)
    rp = relay_payment(block, registries["relay_fee_address"])
    bp = tv - vp.payment - rp
    over = under = None
    if block.relay_reported_value is not None:
        over, under = payload_value_discrepancy(block.relay_reported_value, vp.payment)
    return BlockEconomics(
        slot=block.slot,
        builder_id=block.builder_id,
        timestamp=block.timestamp,
        excluded=False,
        payment_payer=vp.payer,
        true_value=tv,
        validator_payment=vp.payment,
        relay_payment=rp,
        builder_profit=bp,
        profit_margin=bp / tv if tv > 0 else None,
        over_promised=over,
        under_promised=under,
    )
