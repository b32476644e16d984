import pytest
from hypothesis import given, settings, strategies as st

from mevlens import fixtures
from mevlens.ingest import COWSWAP_SETTLEMENT, GWEI, MEVBLOCKER_SAFE, REGISTRY_KINDS
from mevlens.labeler import (
    ORDER_FLOW_LABELS, TRANSPARENCY_LABELS, BlockContext, detect_non_atomic_arb, detect_ofa_bundles,
    label_block, label_transparency, non_atomic_conditions,
)
from helpers import (
    BANANA, BOT, BUILDER, ETH, REFUND, ROUTER, SEARCHER, USER, block, cex_dex, registries, tx, vp,
)

REGS = registries()


def _labels(b, regs=REGS):
    return {t.tx.hash: t for t in label_block(b, regs).labels}


def test_cowswap_triple():
    user = tx(1, recipient=COWSWAP_SETTLEMENT, erc20_transfer_count=4, swap_count=2)
    backrun = tx(2, sender=SEARCHER, recipient=BOT, coinbase_transfer=5 * ETH // 100)
    refund = tx(3, sender=BUILDER, recipient=MEVBLOCKER_SAFE, value=4 * ETH // 100)
    bundles = detect_ofa_bundles(block([user, backrun, refund, vp(4, ETH)]), REGS)
    assert len(bundles) == 1
    b = bundles[0]
    assert (b.kind, b.user_tx, b.backrun_tx, b.refund_tx, b.refund_value) == (
        "cowswap_mevblocker", user.hash, backrun.hash, refund.hash, 4 * ETH // 100)


def test_mev_share_pair_without_user():
    backrun = tx(2, sender=SEARCHER, recipient=BOT, tip_total=ETH // 100, coinbase_transfer=ETH // 100)
    refund = tx(3, sender=BUILDER, recipient=REFUND, value=ETH // 100)
    bundles = detect_ofa_bundles(block([tx(1, recipient=USER, value=1), backrun, refund]), REGS)
    assert [(b.kind, b.user_tx) for b in bundles] == [("mev_share", None)]


def test_no_builder_transfers_no_bundles():
    b = block([tx(1, recipient=USER, value=1), tx(2, sender=SEARCHER, coinbase_transfer=ETH)])
    assert detect_ofa_bundles(b, REGS) == []


def test_refund_above_fees_is_not_a_bundle():
    user = tx(1, recipient=COWSWAP_SETTLEMENT, erc20_transfer_count=4, swap_count=2)
    backrun = tx(2, sender=SEARCHER, coinbase_transfer=5 * ETH // 100)
    refund = tx(3, sender=BUILDER, recipient=MEVBLOCKER_SAFE, value=6 * ETH // 100)
    assert detect_ofa_bundles(block([user, backrun, refund]), REGS) == []


def test_bundle_membership_beats_mempool_visibility():
    user = tx(1, recipient=ROUTER, erc20_transfer_count=2, swap_count=1, first_seen_mempool=5)
    backrun = tx(2, sender=SEARCHER, coinbase_transfer=ETH // 10)
    refund = tx(3, sender=BUILDER, recipient=REFUND, value=ETH // 20)
    b = block([user, backrun, refund])
    labs = _labels(b)
    assert labs[user.hash].transparency == "ofa_bundle"
    assert labs[backrun.hash].order_flow == "ofa_backrun"
    assert label_transparency(tx(9, first_seen_mempool=1), []) == "public_signal"
    assert label_transparency(tx(9), []) == "exclusive_signal"


def test_non_atomic_examples():
    ok = cex_dex(1)
    b = block([tx(0, recipient=USER, value=1), ok])
    ctx = BlockContext(b, [])
    assert detect_non_atomic_arb(b.transactions[1], ctx, REGS)
    seen = block([tx(0, recipient=USER, value=1), cex_dex(1, first_seen_mempool=3)])
    assert not detect_non_atomic_arb(seen.transactions[1], BlockContext(seen, []), REGS)
    heavy = block([tx(0, recipient=USER, value=1), cex_dex(1, gas_used=500_000, tip_total=2 * GWEI * 500_000)])
    assert not detect_non_atomic_arb(heavy.transactions[1], BlockContext(heavy, []), REGS)
    second = block([cex_dex(0, sender=USER), cex_dex(1)])
    conds = non_atomic_conditions(second.transactions[1], BlockContext(second, []), REGS)
    assert not conds["first_swap_in_pool"] and sum(not v for v in conds.values()) == 1


def test_tip_threshold_is_per_gas():
    # 0.99 gwei per gas on 180k gas is far above 1 gwei in absolute terms, still not enough
    low = cex_dex(1, priority_fee_per_gas=GWEI - 10**7, tip_total=(GWEI - 10**7) * 180_000)
    b = block([tx(0, recipient=USER, value=1), low])
    assert not non_atomic_conditions(b.transactions[1], BlockContext(b, []), REGS)["fee_or_coinbase"]


@pytest.mark.parametrize("case, expected", [
    (tx(1, recipient=BANANA, erc20_transfer_count=2, swap_count=1, first_seen_mempool=1), "telegram_bot"),
    (tx(1, recipient=USER, value=ETH, first_seen_mempool=1), "other_public"),
    (tx(1, recipient=ROUTER, erc20_transfer_count=2, swap_count=1, first_seen_mempool=1), "retail_swap"),
    (tx(1, recipient=BOT, erc20_transfer_count=3, swap_count=2, gas_used=300_000), "bot_swap"),
    (tx(1, recipient=USER, value=ETH), "other_exclusive"),
])
def test_order_flow_examples(case, expected):
    b = block([tx(0, recipient=USER, value=1, first_seen_mempool=1), case])
    assert _labels(b)[case.hash].order_flow == expected


def test_mev_labels_map_and_victim_falls_through():
    front = tx(1, sender=SEARCHER, erc20_transfer_count=2, swap_count=1)
    victim = tx(2, recipient=ROUTER, erc20_transfer_count=2, swap_count=1, first_seen_mempool=1)
    back = tx(3, sender=SEARCHER, erc20_transfer_count=2, swap_count=1)
    arb = tx(4, sender=SEARCHER, erc20_transfer_count=3, swap_count=2)
    liq = tx(5, sender=SEARCHER, erc20_transfer_count=3, swap_count=1)
    regs = registries(mev_label={front.hash: "sandwich_front", victim.hash: "sandwich_victim",
                                 back.hash: "sandwich_back", arb.hash: "atomic_arb", liq.hash: "liquidation"})
    labs = _labels(block([front, victim, back, arb, liq]), regs)
    assert [labs[t.hash].order_flow for t in (front, victim, back, arb, liq)] == [
        "sandwich", "retail_swap", "sandwich", "atomic_arb", "liquidation"]


@pytest.mark.parametrize("variant", fixtures.NON_ATOMIC_VARIANTS)
def test_non_atomic_minimal_pair(variant):
    pair = fixtures.non_atomic_pair(variant)
    good = _labels(pair.good, pair.registries_for("good"))[pair.subject]
    bad = _labels(pair.bad, pair.registries_for("bad"))[pair.subject]
    assert good.order_flow == "non_atomic_arb"
    assert bad.order_flow != "non_atomic_arb"


@pytest.mark.parametrize("variant", fixtures.OFA_VARIANTS)
def test_ofa_minimal_pair(variant):
    pair = fixtures.ofa_pair(variant)
    kind = variant.split(":")[0]

    def has(b):
        return any(x.kind == kind and pair.subject in x.members for x in detect_ofa_bundles(b, pair.registries))

    assert has(pair.good) and not has(pair.bad)
    assert _labels(pair.good, pair.registries)[pair.subject].transparency == "ofa_bundle"
    assert _labels(pair.bad, pair.registries)[pair.subject].transparency != "ofa_bundle"


def test_greedy_scan_consumes_members():
    # two candidate refunds in a row: the first bundle takes the middle tx, the second cannot reuse it
    backrun = tx(1, sender=SEARCHER, coinbase_transfer=ETH)
    r1 = tx(2, sender=BUILDER, recipient=REFUND, value=ETH // 10)
    r2 = tx(3, sender=BUILDER, recipient=REFUND, value=ETH // 10)
    bundles = detect_ofa_bundles(block([tx(0, recipient=USER, value=1), backrun, r1, r2]), REGS)
    members = [m for b in bundles for m in b.members]
    assert len(members) == len(set(members))


# -- properties on generated corpora --------------------------------------------------

@st.composite
def random_blocks(draw):
    n = draw(st.integers(1, 12))
    pool = st.sampled_from(["0x" + "31" * 20, "0x" + "32" * 20])
    addrs = st.sampled_from([BUILDER, SEARCHER, USER, BOT, ROUTER, BANANA, REFUND, MEVBLOCKER_SAFE,
                             COWSWAP_SETTLEMENT])
    txs = []
    for i in range(n):
        gas = draw(st.integers(21_000, 600_000))
        fee = draw(st.sampled_from([0, GWEI // 2, 2 * GWEI]))
        txs.append(tx(i + 1, sender=draw(addrs), recipient=draw(st.one_of(st.none(), addrs)), gas_used=gas,
                      priority_fee_per_gas=fee, tip_total=fee * gas,
                      coinbase_transfer=draw(st.sampled_from([0, ETH // 100])),
                      value=draw(st.sampled_from([0, ETH // 200, ETH])),
                      status=draw(st.sampled_from(["success", "success", "failed"])),
                      erc20_transfer_count=draw(st.integers(0, 4)), swap_count=draw(st.integers(0, 2)),
                      swap_pool_directions=tuple(draw(st.lists(st.tuples(pool, st.sampled_from(["0to1", "1to0"])),
                                                               max_size=2))),
                      first_seen_mempool=draw(st.one_of(st.none(), st.just(1)))))
    mev = {t.hash: draw(st.sampled_from(["atomic_arb", "sandwich_victim"])) for t in txs if draw(st.booleans()) and
           draw(st.booleans())}
    return block(txs), mev


@settings(max_examples=150, deadline=None)
@given(random_blocks())
def test_totality_and_adjacency(case):
    b, mev = case
    regs = registries(mev_label=mev) if mev else REGS
    bl = label_block(b, regs)
    assert [t.tx.hash for t in bl.labels] == [t.hash for t in b.transactions]
    for t in bl.labels:
        assert t.transparency in TRANSPARENCY_LABELS and t.order_flow in ORDER_FLOW_LABELS
    index = {t.hash: t.block_index for t in b.transactions}
    for bun in bl.bundles:
        idx = [index[m] for m in bun.members]
        assert idx == list(range(idx[0], idx[0] + len(idx)))


@settings(max_examples=150, deadline=None)
@given(random_blocks())
def test_non_atomic_never_on_seen_or_mev_labelled(case):
    b, mev = case
    regs = registries(mev_label=mev) if mev else REGS
    for t in label_block(b, regs).labels:
        if t.order_flow == "non_atomic_arb":
            assert t.tx.first_seen_mempool is None and t.tx.hash not in mev


# order-flow labels each registry can produce
OWNS = {"known_router": {"retail_swap"}, "telegram_bot": {"telegram_bot"}, "solver_router": {"solver_model"},
        "cex_deposit": {"cex_deposit"}, "mev_label": {"sandwich", "atomic_arb", "liquidation"},
        "ofa_refund_address": {"ofa_backrun"}}


@settings(max_examples=80, deadline=None)
@given(random_blocks(), st.sampled_from(sorted(OWNS)))
def test_removing_a_registry_only_moves_toward_fallback(case, kind):
    b, mev = case
    regs = registries(mev_label=mev, solver_router={COWSWAP_SETTLEMENT: "Cowswap"},
                      cex_deposit={USER: "CEX"})
    full = _labels(b, regs)
    less = _labels(b, regs.without(kind))
    for hsh, t in less.items():
        before = full[hsh]
        assert not (t.transparency == "ofa_bundle" and before.transparency != "ofa_bundle")
        if t.order_flow == before.order_flow:
            continue
        # the removed registry's own labels never appear, and only transactions
        # whose label depended on it move (to the next rule down the cascade)
        assert t.order_flow not in OWNS[kind]
        depended = (before.order_flow in OWNS[kind]
                    or (kind == "mev_label" and hsh in mev)
                    or (kind == "ofa_refund_address" and before.transparency == "ofa_bundle"))
        assert depended, (kind, before.order_flow, t.order_flow)


def test_registry_kinds_cover_labeler_lookups():
    assert {"known_router", "telegram_bot", "solver_router", "cex_deposit", "mev_label",
            "ofa_refund_address", "non_mev_contract"} <= set(REGISTRY_KINDS)
