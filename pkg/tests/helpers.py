"""Small constructors for hand-built blocks used across the unit tests."""

from dataclasses import replace

from mevlens.ingest import GWEI, WEI_PER_ETH, BlockRecord, Registries, Registry, TransactionRecord

ETH = WEI_PER_ETH
BUILDER = "0x" + "b1" * 20
PROPOSER = "0x" + "a0" * 20
SEARCHER = "0x" + "5e" * 20
BOT = "0x" + "b0" * 20
USER = "0x" + "0e" * 20
RELAY = "0x" + "4e" * 20
REFUND = "0x" + "f0" * 20
ROUTER = "0x3fc91a3afd70395cd496c647d5a6cc9d4b2b7fad"
BANANA = "0x" + "ba" * 20
POOL = "0x" + "9f" * 20


def h(n) -> str:
    return "0x%064x" % n


def tx(n, **kw) -> TransactionRecord:
    base = dict(hash=h(n), block_index=0, sender=USER, recipient=None, status="success", gas_used=21_000,
                priority_fee_per_gas=0, tip_total=0, coinbase_transfer=0, value=0)
    base.update(kw)
    return TransactionRecord(**base)


def block(txs, slot=1, fee_recipient=BUILDER, proposer=PROPOSER, builder="b", reported=None, ts=None) -> BlockRecord:
    txs = tuple(replace(t, block_index=i) for i, t in enumerate(txs))
    return BlockRecord(slot=slot, block_number=slot, builder_id=builder, builder_pubkey="0x" + "11" * 48,
                       fee_recipient=fee_recipient, transactions=txs,
                       timestamp=ts if ts is not None else 1_700_000_000 + 12 * slot,
                       proposer_fee_recipient=proposer, relay_reported_value=reported)


def vp(n, value, sender=BUILDER) -> TransactionRecord:
    return tx(n, sender=sender, recipient=PROPOSER, value=value)


def registries(**extra) -> Registries:
    kinds = {
        "known_router": Registry("known_router", {ROUTER: "Uniswap Universal Router"}),
        "telegram_bot": Registry("telegram_bot", {BANANA: "Banana Gun"}),
        "ofa_refund_address": Registry("ofa_refund_address", {REFUND: "MEV-Share"}),
        "relay_fee_address": Registry("relay_fee_address", {RELAY: "UltraSound"}),
    }
    for k, v in extra.items():
        kinds[k] = Registry(k, v)
    return Registries(kinds)


def cex_dex(n=1, **kw) -> TransactionRecord:
    """A transaction meeting every non-atomic arbitrage condition."""
    base = dict(sender=SEARCHER, recipient=BOT, gas_used=180_000, priority_fee_per_gas=2 * GWEI,
                tip_total=2 * GWEI * 180_000, erc20_transfer_count=2, swap_count=1,
                swap_pool_directions=((POOL, "0to1"),))
    base.update(kw)
    return tx(n, **base)
