import json
import tracemalloc

import pytest
from hypothesis import given, settings, strategies as st

from mevlens.ingest import (
    InputError, InvariantViolation, LoadReport, Registry, block_to_json, iter_blocks, join_mempool_visibility,
    load_bids, load_blocks, load_mempool, load_registry, parse_block, read_text_source, unknown_builder_id,
)
from helpers import BUILDER, PROPOSER, USER, block, h, tx

PUBKEY = "0x" + "ab" * 48


def _line(slot, **over):
    obj = {"slot": slot, "block_number": slot, "builder_pubkey": PUBKEY, "fee_recipient": BUILDER,
           "timestamp": 1_700_000_000, "transactions": [
               {"hash": h(slot * 10), "block_index": 0, "sender": USER, "recipient": PROPOSER,
                "status": "success", "gas_used": 21000, "priority_fee_per_gas": "0", "tip_total": "0",
                "coinbase_transfer": "0", "value": "5"}]}
    obj.update(over)
    return json.dumps(obj)


def test_three_good_lines():
    src = read_text_source("\n".join(_line(s) for s in (1, 2, 3)))
    rep = LoadReport("t")
    blocks = list(iter_blocks(src, None, rep))
    assert len(blocks) == 3 and rep.rejected == 0


def test_missing_fee_recipient_rejected_with_field():
    bad = json.loads(_line(2))
    del bad["fee_recipient"]
    src = read_text_source("\n".join([_line(1), json.dumps(bad), _line(3)]))
    rep = LoadReport("t")
    blocks = list(iter_blocks(src, None, rep))
    assert len(blocks) == 2
    assert rep.rejected == 1 and rep.rejections[0].field == "fee_recipient" and rep.rejections[0].line == 2


def test_accepted_plus_rejected_equals_lines():
    lines = [_line(1), "{not json", _line(3, transactions="x"), _line(4)]
    rep = LoadReport("t")
    list(iter_blocks(read_text_source("\n".join(lines)), None, rep))
    assert rep.accepted + rep.rejected == len(lines)


def test_header_line_is_metadata():
    text = json.dumps({"_meta": {"blocks": 1190617}}) + "\n" + _line(1)
    rep = LoadReport("t")
    assert len(list(iter_blocks(read_text_source(text), None, rep))) == 1
    assert rep.header == {"blocks": 1190617}


def test_streaming_does_not_buffer_corpus(tmp_path):
    # a header claiming full mainnet scale; memory must not grow with the file
    p_small, p_big = tmp_path / "s.jsonl", tmp_path / "b.jsonl"
    header = json.dumps({"_meta": {"blocks": 1190617}}) + "\n"
    p_small.write_text(header + "\n".join(_line(s) for s in range(200)))
    p_big.write_text(header + "\n".join(_line(s) for s in range(2000)))

    def peak(p):
        tracemalloc.start()
        n = sum(1 for _ in iter_blocks(p))
        _, top = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        return n, top

    n1, m1 = peak(p_small)
    n2, m2 = peak(p_big)
    assert (n1, n2) == (200, 2000)
    assert m2 < 3 * m1


def test_unknown_pubkey_gets_synthetic_builder():
    b = parse_block(json.loads(_line(1)))
    assert b.builder_id == unknown_builder_id(PUBKEY) == "unknown:" + PUBKEY[:10]
    reg = Registry("builder_pubkey", {PUBKEY: "beaverbuild"})
    assert parse_block(json.loads(_line(1)), reg).builder_id == "beaverbuild"


def test_non_contiguous_indices_rejected():
    obj = json.loads(_line(1))
    obj["transactions"][0]["block_index"] = 1
    rep = LoadReport("t")
    assert list(iter_blocks(read_text_source(json.dumps(obj)), None, rep)) == []
    assert rep.rejections[0].field == "transactions"


def test_mempool_join_counts():
    b1 = block([tx(1), tx(2), tx(3)], slot=1)
    b2 = block([tx(4), tx(5)], slot=2)
    vis = {h(1): 10, h(3): 30, h(5): 50}
    joined, unmatched = join_mempool_visibility([b1, b2], vis)
    seen = [t.hash for b in joined for t in b.transactions if t.first_seen_mempool is not None]
    assert sorted(seen) == [h(1), h(3), h(5)] and unmatched == 0
    assert joined[0].transactions[1].first_seen_mempool is None


def test_mempool_keeps_earliest_sighting():
    text = f"hash,first_seen_ms\n{h(1)},50\n{h(1)},20\n{h(2)},7\n"
    vis, rep = load_mempool(read_text_source(text))
    assert vis == {h(1): 20, h(2): 7} and rep.accepted == 3


def test_registry_dedup_and_conflict():
    a, b = "0x" + "11" * 20, "0x" + "22" * 20
    reg = load_registry(read_text_source(f"address,entity\n{a},X\n{b},Y\n"), "searcher")
    assert len(reg) == 2
    reg = load_registry(read_text_source(f"address,entity\n{a},X\n{a.upper().replace('0X', '0x')},X\n"), "searcher")
    assert len(reg) == 1
    with pytest.raises(InputError, match=a):
        load_registry(read_text_source(f"address,entity\n{a},X\n{a},Z\n"), "searcher")


def test_registry_empty_is_error():
    with pytest.raises(InputError):
        load_registry(read_text_source("address,entity\n"), "searcher")


BIDS_HEADER = "slot,builder_pubkey,received_at_ms,value_wei,won\n"


def test_bids_group_by_slot():
    text = BIDS_HEADER + "".join(f"{s},{PUBKEY},{t},{v},false\n" for s, t, v in
                                 [(1, 5, 1), (1, 3, 2), (2, 9, 1), (2, 8, 1)])
    by_slot, rep = load_bids(read_text_source(text))
    assert {s: len(b) for s, b in by_slot.items()} == {1: 2, 2: 2}
    assert [b.received_at for b in by_slot[1]] == [3, 5]
    assert by_slot[1][0].builder_id == "unknown:" + PUBKEY[:10]


def test_two_winners_is_invariant_violation():
    text = BIDS_HEADER + f"1,{PUBKEY},1,1,true\n1,{PUBKEY},2,2,true\n"
    with pytest.raises(InvariantViolation):
        load_bids(read_text_source(text))


def test_missing_column_names_file():
    with pytest.raises(InputError, match="won"):
        load_bids(read_text_source("slot,builder_pubkey,received_at_ms,value_wei\n"))


hexaddr = st.binary(min_size=20, max_size=20).map(lambda b: "0x" + b.hex())
amount = st.integers(min_value=0, max_value=10**24)


@st.composite
def blocks(draw):
    n = draw(st.integers(0, 6))
    txs = []
    for i in range(n):
        pools = draw(st.lists(st.tuples(hexaddr, st.sampled_from(["0to1", "1to0"])), max_size=2))
        txs.append(tx(draw(st.integers(1, 2**60)) * 10 + i, sender=draw(hexaddr),
                      recipient=draw(st.one_of(st.none(), hexaddr)),
                      status=draw(st.sampled_from(["success", "failed"])), gas_used=draw(st.integers(0, 10**7)),
                      priority_fee_per_gas=draw(amount), tip_total=draw(amount), coinbase_transfer=draw(amount),
                      value=draw(amount), erc20_transfer_count=draw(st.integers(0, 5)),
                      swap_count=draw(st.integers(0, 3)), swap_pool_directions=tuple(pools),
                      first_seen_mempool=draw(st.one_of(st.none(), st.integers(0, 2**45)))))
    return block(txs, slot=draw(st.integers(0, 10**8)), reported=draw(st.one_of(st.none(), amount)))


@settings(max_examples=60, deadline=None)
@given(blocks())
def test_json_round_trip(b):
    again = parse_block(json.loads(json.dumps(block_to_json(b))))
    assert again == b


def test_load_blocks_file_round_trip(tmp_path):
    from mevlens.ingest import write_blocks
    bs = [block([tx(1, value=3)], slot=5), block([tx(2)], slot=4)]
    p = tmp_path / "b.jsonl"
    with open(p, "w") as fh:
        write_blocks(bs, fh, {"n": 2})
    got, rep = load_blocks(p)
    assert [b.slot for b in got] == [4, 5] and rep.header == {"n": 2}
    assert got[1] == bs[0]
