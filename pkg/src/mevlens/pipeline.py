"""Stage orchestration: label -> metrics -> analytics -> bids -> stats.

Every stage reads its upstream CSVs from the output directory (so a stage can
be re-run on hand-edited inputs) and commits its own outputs atomically.
Per-block and per-slot work is spread over a process pool; results are
collected in input order, so output never depends on the worker count.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

from . import reports as R
from .analytics import (
    DEFAULT_DUST_WEI, POSITIONS, CorpusAccumulator, ProfileAccumulator, ProviderNames,
    block_facts, build_profiles, eof_provider_shares,
)
from .bids import CANCEL_MODES, MAINNET_GENESIS, BidAggregate, SlotBidBook, finalize
from .ingest import (
    InputError, InvariantViolation, Registries, apply_payload, apply_visibility, iter_blocks,
    LoadReport, load_bids, load_mempool, load_payloads, load_registries,
)
from .labeler import (
    ORDER_FLOW_LABELS, TRANSPARENCY_LABELS, BlockLabels, LabeledTransaction, OfaBundle, label_block,
)
from .metrics import BlockEconomics, block_economics
from .stats import (
    DEFAULT_ALPHA, DEFAULT_FOLDS, DEFAULT_SEED, InsufficientSamples, ep_profitability_test,
    exclusive_providers, lda_decoding_accuracy, spearman,
)

STAGES = ("label", "metrics", "analytics", "bids", "stats")
STAGE_OUTPUTS = {
    "label": ("labels.csv",),
    "metrics": ("economics.csv",),
    "analytics": ("profiles.csv", "composition.csv", "positions.csv", "eof_shares.csv",
                  "daily_series.csv", "block_eof.csv"),
    "bids": ("bid_metrics.csv",),
    "stats": ("correlations.csv", "decoding_matrix.csv", "exclusive_providers.csv"),
}


@dataclass
class RunConfig:
    blocks: str | None = None
    mempool: str | None = None
    registries: str | None = None
    bids: str | None = None
    payloads: str | None = None
    out_dir: str = "out"
    dust_wei: int = DEFAULT_DUST_WEI
    alpha: float = DEFAULT_ALPHA
    top_k: int = 10
    min_market_share: float = 0.0001
    seed: int = DEFAULT_SEED
    folds: int = DEFAULT_FOLDS
    genesis_time: int = MAINNET_GENESIS
    cancel_mode: str = "running_max"
    workers: int = 1

    def validate(self) -> None:
        if self.dust_wei < 0:
            raise InputError("dust_wei must be non-negative")
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")
        if self.top_k < 3:
            raise InputError("top_k must be at least 3")
        if not 0 <= self.min_market_share < 1:
            raise InputError("min_market_share must lie in [0, 1)")
        if self.folds < 2:
            raise InputError("folds must be at least 2")
        if self.workers < 1:
            raise InputError("workers must be at least 1")
        if self.cancel_mode not in CANCEL_MODES:
            raise InputError(f"cancel_mode must be one of {', '.join(CANCEL_MODES)}")

    def echo(self) -> dict:
        # analysis settings only: output location and worker count do not
        # change results and would break byte-identical comparisons
        return {k: v for k, v in asdict(self).items() if k not in ("out_dir", "workers")}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.echo(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# -- process pool -------------------------------------------------------------------

_CTX: dict = {}


def _init_worker(ctx: dict) -> None:
    _CTX.clear()
    _CTX.update(ctx)


def _chunks(items: Sequence, n: int) -> list[Sequence]:
    if not items:
        return []
    size = max(1, -(-len(items) // n))
    return [items[i:i + size] for i in range(0, len(items), size)]


def parallel_map(fn: Callable, items: Sequence, workers: int, ctx: dict) -> list:
    """``[fn(x) for x in items]`` using ``workers`` processes, order preserved.

    ``fn`` reads shared read-only state from the module-level context.
    """
    if workers <= 1 or len(items) < 2:
        _init_worker(ctx)
        return [fn(x) for x in items]
    chunks = _chunks(list(items), workers * 4)
    mp = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=mp,
                             initializer=_init_worker, initargs=(ctx,)) as ex:
        parts = list(ex.map(_run_chunk, [(fn, c) for c in chunks]))
    return [y for part in parts for y in part]


def _run_chunk(arg):
    fn, chunk = arg
    return [fn(x) for x in chunk]


# -- inputs -------------------------------------------------------------------------

def _need(path: str | None, what: str, stage: str) -> Path:
    if not path:
        raise InputError(f"stage {stage} needs {what} (not configured)")
    p = Path(path)
    if not p.exists():
        raise InputError(f"stage {stage}: {what} not found: {p}")
    return p


def load_registries_cfg(cfg: RunConfig, stage: str) -> Registries:
    return load_registries(_need(cfg.registries, "the registry directory", stage))


def load_corpus(cfg: RunConfig, registries: Registries, stage: str, visibility: bool):
    """Blocks with payload data (and optionally mempool visibility) applied."""
    summary = {}
    path = _need(cfg.blocks, "blocks.jsonl", stage)
    rep = LoadReport(str(path))
    blocks = list(iter_blocks(path, registries["builder_pubkey"], rep))
    blocks.sort(key=lambda b: b.slot)
    summary["blocks"] = rep.summary()
    if len({b.slot for b in blocks}) != len(blocks):
        raise InvariantViolation(f"{path}: duplicate slot in block corpus")
    if cfg.payloads:
        payloads, prep = load_payloads(_need(cfg.payloads, "payloads.csv", stage))
        summary["payloads"] = prep.summary()
        blocks = [apply_payload(b, payloads) for b in blocks]
    if visibility:
        vis, mrep = load_mempool(_need(cfg.mempool, "mempool.csv", stage))
        summary["mempool"] = mrep.summary()
        matched = 0
        joined = []
        for b in blocks:
            jb = apply_visibility(b, vis)
            matched += sum(t.first_seen_mempool is not None for t in jb.transactions)
            joined.append(jb)
        blocks = joined
        summary["mempool_unmatched"] = len(vis) - matched
    return blocks, summary


# -- label ---------------------------------------------------------------------------

def _label_rows(block) -> list[dict]:
    bl = label_block(block, _CTX["registries"])
    rows = []
    for lt in bl.labels:
        b = lt.bundle
        rows.append({
            "hash": lt.tx.hash, "slot": block.slot, "block_index": lt.tx.block_index,
            "transparency": lt.transparency, "order_flow": lt.order_flow,
            "bundle_id": bl.bundle_id(b) if b else None,
            "bundle_kind": b.kind if b else None,
            "bundle_role": lt.bundle_role,
        })
    return rows


def stage_label(cfg: RunConfig) -> tuple[dict, dict]:
    regs = load_registries_cfg(cfg, "label")
    blocks, summary = load_corpus(cfg, regs, "label", visibility=True)
    per_block = parallel_map(_label_rows, blocks, cfg.workers, {"registries": regs})
    rows = [r for rs in per_block for r in rs]
    tr = Counter(r["transparency"] for r in rows)
    of = Counter(r["order_flow"] for r in rows)
    summary.update({
        "transactions": len(rows),
        "bundles": len({r["bundle_id"] for r in rows if r["bundle_id"]}),
        "transparency_counts": {k: tr[k] for k in TRANSPARENCY_LABELS},
        "order_flow_counts": {k: of[k] for k in ORDER_FLOW_LABELS},
    })
    return {"labels.csv": R.render_csv("labels.csv", rows)}, summary


# -- reconstruct labels from labels.csv --------------------------------------------------

def read_labels(out_dir) -> dict[int, list[dict]]:
    by_slot: dict[int, list[dict]] = defaultdict(list)
    for r in R.read_csv(Path(out_dir) / "labels.csv", "labels.csv"):
        by_slot[int(r["slot"])].append(r)
    return by_slot


def block_labels_from_rows(block, rows: list[dict]) -> BlockLabels:
    by_hash = {r["hash"]: r for r in rows}
    if len(by_hash) != len(block.transactions) or any(t.hash not in by_hash for t in block.transactions):
        raise InvariantViolation(f"labels.csv does not cover block at slot {block.slot}")
    members: dict[str, dict] = defaultdict(dict)
    kinds = {}
    for r in rows:
        if r["bundle_id"]:
            members[r["bundle_id"]][r["bundle_role"]] = r["hash"]
            kinds[r["bundle_id"]] = r["bundle_kind"]
    txs = {t.hash: t for t in block.transactions}
    bundles = {}
    for bid, roles in members.items():
        if "backrun" not in roles or "refund" not in roles:
            raise InvariantViolation(f"labels.csv: bundle {bid} lacks a backrun or refund")
        start = min(txs[h].block_index for h in roles.values())
        bundles[bid] = OfaBundle(kinds[bid], start, roles["backrun"], roles["refund"],
                                 txs[roles["refund"]].value, roles.get("user"))
    labeled = []
    for t in block.transactions:
        r = by_hash[t.hash]
        labeled.append(LabeledTransaction(t, r["transparency"], r["order_flow"],
                                          bundles.get(r["bundle_id"]) if r["bundle_id"] else None))
    ordered = tuple(sorted(bundles.values(), key=lambda b: b.start_index))
    return BlockLabels(block, ordered, tuple(labeled))


# -- metrics ---------------------------------------------------------------------------

def _econ_row(item) -> dict:
    block, rows = item
    bl = block_labels_from_rows(block, rows)
    e = block_economics(block, bl.bundles, _CTX["registries"])
    if not e.excluded and e.builder_profit != e.true_value - e.validator_payment - e.relay_payment:
        raise InvariantViolation(f"slot {block.slot}: profit identity broken")
    return {
        "slot": e.slot, "builder": e.builder_id, "timestamp": e.timestamp,
        "tv_wei": e.true_value, "vp_wei": e.validator_payment, "rp_wei": e.relay_payment,
        "bp_wei": e.builder_profit, "pm": e.profit_margin, "excluded": e.excluded,
        "exclusion_reason": e.exclusion_reason, "payer": e.payment_payer,
        "over_promised_wei": e.over_promised, "under_promised_wei": e.under_promised,
        "excluded_value_wei": e.excluded_value,
    }


def stage_metrics(cfg: RunConfig) -> tuple[dict, dict]:
    regs = load_registries_cfg(cfg, "metrics")
    labels = read_labels(cfg.out_dir)
    blocks, summary = load_corpus(cfg, regs, "metrics", visibility=False)
    rows = parallel_map(_econ_row, [(b, labels.get(b.slot, [])) for b in blocks],
                        cfg.workers, {"registries": regs})
    kept = [r for r in rows if not r["excluded"]]
    tv = sum(r["tv_wei"] for r in kept)
    lhs = sum(r["bp_wei"] + r["vp_wei"] + r["rp_wei"] for r in kept)
    if tv != lhs:
        raise InvariantViolation(f"corpus conservation broken: {lhs} != {tv}")
    summary.update({
        "blocks_priced": len(rows),
        "excluded_blocks": len(rows) - len(kept),
        "total_true_value_wei": str(tv),
        "conservation_residual_wei": str(lhs - tv),
    })
    return {"economics.csv": R.render_csv("economics.csv", rows)}, summary


def read_economics(out_dir) -> dict[int, BlockEconomics]:
    out = {}
    for r in R.read_csv(Path(out_dir) / "economics.csv", "economics.csv"):
        excluded = R.parse_bool(r["excluded"])
        out[int(r["slot"])] = BlockEconomics(
            slot=int(r["slot"]), builder_id=r["builder"], timestamp=int(r["timestamp"]),
            excluded=excluded, payment_payer=r["payer"],
            true_value=R.opt_int(r["tv_wei"]), validator_payment=R.opt_int(r["vp_wei"]),
            relay_payment=R.opt_int(r["rp_wei"]), builder_profit=R.opt_int(r["bp_wei"]),
            profit_margin=R.opt_float(r["pm"]), exclusion_reason=r["exclusion_reason"] or None,
            over_promised=R.opt_int(r["over_promised_wei"]),
            under_promised=R.opt_int(r["under_promised_wei"]),
            excluded_value=R.opt_int(r["excluded_value_wei"]) or 0,
        )
    return out


# -- analytics -----------------------------------------------------------------------------

def _facts(item):
    block, rows, econ = item
    return block_facts(block, block_labels_from_rows(block, rows), econ, _CTX["registries"])


def _share(v: int, total: int) -> float:
    return float(Fraction(v, total)) if total > 0 else 0.0


def _eth_ratio(num: int, den: int) -> float | None:
    return float(Fraction(num, den * R.WEI_PER_ETH)) if den > 0 else None


def _merge_all(accs) -> ProfileAccumulator:
    out = ProfileAccumulator()
    for a in accs:
        out = out.merge(a)
    return out


def profile_row(p) -> dict:
    counted = p.total_blocks - p.excluded_blocks
    row = {
        "builder": p.builder_id, "total_blocks": p.total_blocks,
        "market_share": p.market_share, "market_share_pct": R.pct(p.market_share),
        "validator_payment_wei": p.total_validator_payment,
        "validator_payment_eth": R.wei_to_eth(p.total_validator_payment),
        "subsidy_wei": p.total_subsidy, "subsidy_eth": R.wei_to_eth(p.total_subsidy),
        "profit_wei": p.total_profit, "profit_eth": R.wei_to_eth(p.total_profit),
        "true_value_wei": p.total_true_value, "true_value_eth": R.wei_to_eth(p.total_true_value),
        "profit_margin": p.profit_margin, "profit_margin_pct": R.pct(p.profit_margin),
        "mean_block_margin": p.mean_block_margin,
        "profitable_blocks": p.class_counts["profitable"],
        "neutral_blocks": p.class_counts["neutral"],
        "subsidized_blocks": p.class_counts["subsidized"],
        "profitable_pct": R.pct(p.profitable_fraction),
        "neutral_pct": R.pct(p.neutral_fraction),
        "subsidized_pct": R.pct(p.subsidized_fraction),
        "tob_value_pct": R.pct(p.position_split[0]),
        "bob_value_pct": R.pct(p.position_split[1]),
        "eob_value_pct": R.pct(p.position_split[2]),
        "entropy": p.entropy,
        "msof_label": p.msof.label if p.msof else None,
        "msof_share": p.msof.share if p.msof else None,
        "msof_tie": p.msof.tie if p.msof else None,
        "excluded_blocks": p.excluded_blocks,
        "excluded_blocks_pct": R.pct(Fraction(p.excluded_blocks, p.total_blocks)) if p.total_blocks else None,
        "excluded_value_wei": p.excluded_value, "excluded_value_eth": R.wei_to_eth(p.excluded_value),
        "other_fee_payer_pct": R.pct(p.other_payer_fraction) if counted else None,
        "promise_delivered_pct": R.pct(p.promise_delivered_fraction),
        "over_promised_wei": p.over_promised, "over_promised_eth": R.wei_to_eth(p.over_promised),
        "under_promised_wei": p.under_promised, "under_promised_eth": R.wei_to_eth(p.under_promised),
        "relay_payment_wei": p.total_relay_payment, "relay_payment_eth": R.wei_to_eth(p.total_relay_payment),
    }
    row.update(zip(R.TR_SHARE_COLUMNS, p.transparency_composition))
    row.update(zip(R.OF_SHARE_COLUMNS, p.of_composition))
    return row


def _composition_rows(scope: str, key: str, acc: ProfileAccumulator, corpus: CorpusAccumulator | None,
                      counted_blocks: int) -> list[dict]:
    rows = []
    for dim, labels, vals, gas in (
        ("transparency", TRANSPARENCY_LABELS, acc.tr_value, acc.tr_gas),
        ("order_flow", ORDER_FLOW_LABELS, acc.of_value, acc.of_gas),
    ):
        tv, tg = sum(vals.values()), sum(gas.values())
        for l in labels:
            v, g = vals.get(l, 0), gas.get(l, 0)
            row = {"scope": scope, "key": key, "dimension": dim, "label": l,
                   "value_wei": v, "gas_used": g, "value_share": _share(v, tv), "gas_share": _share(g, tg),
                   "value_per_gas_eth": _eth_ratio(v, g)}
            if corpus is not None:
                nb = corpus.label_blocks.get((dim, l), 0)
                row.update({
                    "tx_count": corpus.tx_counts.get((dim, l), 0),
                    "blocks_with_label": nb,
                    "occurrence": _share(nb, counted_blocks),
                    "avg_value_eth": _eth_ratio(v, nb),
                })
            rows.append(row)
    return rows


def analytics_outputs(corpus: CorpusAccumulator) -> tuple[dict, dict]:
    profiles = build_profiles(corpus)
    names = ProviderNames(
        {k for a in corpus.builders.values() for k in a.eof_value}
    )
    total = _merge_all(corpus.builders[b] for b in sorted(corpus.builders))
    counted = total.blocks - total.excluded_blocks

    comp = _composition_rows("corpus", "all", total, corpus, counted)
    for p in profiles:
        comp += _composition_rows("builder", p.builder_id, corpus.builders[p.builder_id], None, 0)
    days = sorted(corpus.daily)
    for d in days:
        comp += _composition_rows("day", d, _merge_all(corpus.daily[d][b] for b in sorted(corpus.daily[d])), None, 0)
    for of in ORDER_FLOW_LABELS:
        n_of = sum(corpus.of_by_transparency.get((of, t), 0) for t in TRANSPARENCY_LABELS)
        v_of = sum(corpus.of_by_transparency_value.get((of, t), 0) for t in TRANSPARENCY_LABELS)
        for t in TRANSPARENCY_LABELS:
            n = corpus.of_by_transparency.get((of, t), 0)
            v = corpus.of_by_transparency_value.get((of, t), 0)
            comp.append({"scope": "label_transparency", "key": of, "dimension": "transparency", "label": t,
                         "tx_count": n, "value_wei": v, "value_share": _share(v, v_of),
                         "occurrence": _share(n, n_of)})

    positions = []
    for p in profiles:
        positions.append({
            "builder": p.builder_id,
            **{f"{pos.lower()}_value_wei": v for pos, v in zip(POSITIONS, p.position_value)},
            **{f"{pos.lower()}_share": s for pos, s in zip(POSITIONS, p.position_split)},
        })

    eof = []
    corpus_eof: Counter = Counter()
    for p in profiles:
        corpus_eof.update(p.eof_provider_value)
        for prov, share in p.eof_provider_shares.items():
            eof.append({"scope": "builder", "builder": p.builder_id, "provider": prov,
                        "value_wei": p.eof_provider_value[prov], "share": share})
    for prov, share in eof_provider_shares(dict(corpus_eof)).items():
        eof.append({"scope": "corpus", "provider": prov, "value_wei": corpus_eof[prov], "share": share})
    for d in days:
        day_vals: Counter = Counter()
        for b in sorted(corpus.daily[d]):
            vals = names.aggregate(corpus.daily[d][b].eof_value)
            day_vals.update(vals)
            for prov, share in eof_provider_shares(vals).items():
                eof.append({"scope": "builder_day", "builder": b, "date": d, "provider": prov,
                            "value_wei": vals[prov], "share": share})
        for prov, share in eof_provider_shares(dict(day_vals)).items():
            eof.append({"scope": "day", "date": d, "provider": prov, "value_wei": day_vals[prov], "share": share})

    daily = []
    cum: Counter = Counter()
    for d in days:
        per = corpus.daily[d]
        n_day = sum(a.blocks for a in per.values())
        for b in sorted(per):
            a = per[b]
            cum[b] += a.profit
            daily.append({
                "date": d, "builder": b, "blocks": a.blocks, "market_share": _share(a.blocks, n_day),
                "profit_wei": a.profit, "profit_eth": R.wei_to_eth(a.profit),
                "cum_profit_wei": cum[b], "cum_profit_eth": R.wei_to_eth(cum[b]),
                "true_value_wei": a.true_value,
                "profit_margin": float(Fraction(a.profit, a.true_value)) if a.true_value > 0 else None,
                "mean_block_margin": float(a.margin_sum / a.margin_blocks) if a.margin_blocks else None,
            })

    block_eof = []
    for slot in sorted(corpus.block_eof):
        builder, vals = corpus.block_eof[slot]
        named = names.aggregate(vals)
        tot = sum(named.values())
        if tot <= 0:
            block_eof.append({"slot": slot, "builder": builder, "provider": "", "value_wei": 0, "share": 0.0})
            continue
        for prov in sorted(named):
            block_eof.append({"slot": slot, "builder": builder, "provider": prov,
                              "value_wei": named[prov], "share": _share(named[prov], tot)})

    files = {
        "profiles.csv": R.render_csv("profiles.csv", [profile_row(p) for p in profiles]),
        "composition.csv": R.render_csv("composition.csv", comp),
        "positions.csv": R.render_csv("positions.csv", positions),
        "eof_shares.csv": R.render_csv("eof_shares.csv", eof),
        "daily_series.csv": R.render_csv("daily_series.csv", daily),
        "block_eof.csv": R.render_csv("block_eof.csv", block_eof),
    }
    summary = {
        "builders": len(profiles),
        "days": len(days),
        "providers": len(corpus_eof),
        "conservation_residual_wei": str(
            total.profit + total.validator_payment + total.relay_payment - total.true_value),
    }
    return files, summary


def stage_analytics(cfg: RunConfig) -> tuple[dict, dict]:
    regs = load_registries_cfg(cfg, "analytics")
    labels = read_labels(cfg.out_dir)
    econ = read_economics(cfg.out_dir)
    blocks, summary = load_corpus(cfg, regs, "analytics", visibility=False)
    missing = [b.slot for b in blocks if b.slot not in econ]
    if missing:
        raise InputError(f"economics.csv lacks slot {missing[0]} (re-run the metrics stage)")
    facts = parallel_map(_facts, [(b, labels.get(b.slot, []), econ[b.slot]) for b in blocks],
                         cfg.workers, {"registries": regs})
    corpus = CorpusAccumulator(dust=cfg.dust_wei)
    for f in facts:
        corpus.add(f)
    files, s = analytics_outputs(corpus)
    summary.update(s)
    return files, summary


# -- bids ----------------------------------------------------------------------------------

def _bid_chunk(slots) -> BidAggregate:
    agg = BidAggregate(cancel_mode=_CTX["cancel_mode"])
    for slot, bids in slots:
        agg.add(SlotBidBook.from_bids(slot, bids, _CTX["genesis_time"]))
    return agg


def bid_rows(agg: BidAggregate) -> list[dict]:
    return [asdict(m) | {"builder": m.builder_id} for m in finalize(agg)]


def stage_bids(cfg: RunConfig) -> tuple[dict, dict]:
    path = _need(cfg.bids, "bids.csv", "bids")
    reg = None
    if cfg.registries and Path(cfg.registries).is_dir():
        reg = load_registries(cfg.registries)["builder_pubkey"]
    by_slot, rep = load_bids(path, reg)
    items = list(by_slot.items())
    chunks = _chunks(items, cfg.workers * 4) if cfg.workers > 1 else [items]
    parts = parallel_map(_bid_chunk, chunks, cfg.workers,
                         {"cancel_mode": cfg.cancel_mode, "genesis_time": cfg.genesis_time})
    agg = BidAggregate(cancel_mode=cfg.cancel_mode)
    for p in parts:
        agg = agg.merge(p)
    rows = bid_rows(agg)
    return {"bid_metrics.csv": R.render_csv("bid_metrics.csv", rows)}, {
        "bids": rep.summary(), "slots": len(by_slot), "builders": len(rows)}


# -- stats ---------------------------------------------------------------------------------

FEATURE_COLUMNS = {
    "exclusive_signal_share": "tr_exclusive_signal_share",
    "public_signal_share": "tr_public_signal_share",
    "ofa_bundle_share": "tr_ofa_bundle_share",
    **{f"{l}_share": f"of_{l}_share" for l in ORDER_FLOW_LABELS},
    "tob_share": "tob_value_pct",
    "bob_share": "bob_value_pct",
    "eob_share": "eob_value_pct",
    "profitable_rate": "profitable_pct",
    "subsidy_rate": "subsidized_pct",
}
BID_FEATURES = {"cancellations_per_block": "avg_cancels", "update_lag_ms": "avg_update_lag_ms"}


def _decode_task(task):
    builder, provider = task
    x, owners = _CTX["columns"][provider], _CTX["owners"]
    try:
        return lda_decoding_accuracy(x, [o == builder for o in owners], _CTX["folds"], _CTX["seed"],
                                     _CTX["alpha"], builder, provider)
    except InsufficientSamples as exc:
        return str(exc)


def _pairwise(xs, ys):
    keep = [(x, y) for x, y in zip(xs, ys) if x is not None and y is not None]
    return [k[0] for k in keep], [k[1] for k in keep]


def _corr_row(analysis, target, feature, xs, ys, alpha, diag) -> dict | None:
    xs, ys = _pairwise(xs, ys)
    try:
        r = spearman(xs, ys, alpha)
    except ValueError as exc:
        diag.append(f"{analysis}:{target}~{feature}: {exc}")
        return None
    return {"analysis": analysis, "target": target, "feature": feature, "coefficient": r.coefficient,
            "p_value": r.p_value, "n": r.n, "significant": r.significant}


def run_stats(profiles: list[dict], block_eof: list[dict], bid_metrics: list[dict] | None,
              cfg: RunConfig) -> tuple[dict, dict]:
    diag: list[str] = []
    share = {p["builder"]: float(p["market_share"]) for p in profiles}
    included = [p for p in profiles if share[p["builder"]] >= cfg.min_market_share]
    inc_names = {p["builder"] for p in included}

    # decoding matrix over the included builders' blocks
    slots: dict[int, tuple[str, dict]] = {}
    for r in block_eof:
        if r["builder"] not in inc_names:
            continue
        b, vals = slots.setdefault(int(r["slot"]), (r["builder"], {}))
        if r["provider"]:
            vals[r["provider"]] = float(r["share"])
    order = sorted(slots)
    owners = [slots[s][0] for s in order]
    presence: Counter = Counter()
    for s in order:
        for prov, v in slots[s][1].items():
            if v > 0:
                presence[prov] += 1
    providers = sorted(p for p, n in presence.items() if n >= 2 * cfg.folds)
    sparse = len(presence) - len(providers)
    if sparse:
        diag.append(f"decoding: {sparse} provider(s) present in fewer than {2 * cfg.folds} blocks skipped")
    columns = {p: [slots[s][1].get(p, 0.0) for s in order] for p in providers}
    tasks = [(b, p) for b in sorted(inc_names) for p in providers]
    ctx = {"columns": columns, "owners": owners, "folds": cfg.folds, "seed": cfg.seed, "alpha": cfg.alpha}
    out = parallel_map(_decode_task, tasks, cfg.workers, ctx)
    results = [r for r in out if not isinstance(r, str)]
    skipped = [r for r in out if isinstance(r, str)]
    if skipped:
        diag.append(f"decoding: {len(skipped)} pair(s) skipped for insufficient samples")
    eps = exclusive_providers(results)
    by_pair = {(r.provider_id, r.builder_id): r for r in results}

    # EP builders vs profitability
    ep_builders = {b for _, b in eps}
    summary: dict = {"included_builders": len(included), "decoded_pairs": len(results),
                     "exclusive_providers": [list(e) for e in eps]}
    counts = {p["builder"]: {"profitable": int(p["profitable_blocks"]), "neutral": int(p["neutral_blocks"]),
                             "subsidized": int(p["subsidized_blocks"])} for p in included}
    try:
        t = ep_profitability_test(counts, ep_builders)
        summary["ep_chi_square"] = {**t, "significant": t["p_value"] < cfg.alpha}
    except ValueError as exc:
        diag.append(f"ep chi-square: {exc}")

    corr = []
    prof_rate = [R.opt_float(p["profitable_pct"]) for p in included]
    has_ep = [1.0 if p["builder"] in ep_builders else 0.0 for p in included]
    ms_all = [share[p["builder"]] for p in included]
    for row in (
        _corr_row("ep", "has_exclusive_provider", "profitable_rate", prof_rate, has_ep, cfg.alpha, diag),
        _corr_row("entropy", "market_share", "entropy", [R.opt_float(p["entropy"]) for p in included],
                  ms_all, cfg.alpha, diag),
    ):
        if row:
            corr.append(row)

    top = sorted(included, key=lambda p: (-share[p["builder"]], p["builder"]))[: cfg.top_k]
    targets = {"market_share": [share[p["builder"]] for p in top],
               "profit_margin": [R.opt_float(p["profit_margin"]) for p in top]}
    bidx = {r["builder"]: r for r in (bid_metrics or [])}
    feats = {f: [R.opt_float(p[c]) for p in top] for f, c in FEATURE_COLUMNS.items()}
    if bid_metrics is None:
        diag.append("bid features skipped: bid_metrics.csv not available")
    else:
        for f, c in BID_FEATURES.items():
            feats[f] = [R.opt_float(bidx[p["builder"]][c]) if p["builder"] in bidx else None for p in top]
    row = _corr_row("top_k", "profit_margin", "market_share", targets["market_share"],
                    targets["profit_margin"], cfg.alpha, diag)
    if row:
        corr.append(row)
    for tname, tvals in targets.items():
        for fname, fvals in feats.items():
            if tname == "profit_margin" and fname == "profitable_rate":
                continue  # related by definition
            row = _corr_row("top_k", tname, fname, fvals, tvals, cfg.alpha, diag)
            if row:
                corr.append(row)

    dm = [{"builder": r.builder_id, "provider": r.provider_id, "decoding_accuracy": r.decoding_accuracy,
           "threshold": r.threshold, "significant": r.significant, "n_test": r.n_test} for r in results]
    ep_rows = [{"provider": p, "builder": b, "decoding_accuracy": by_pair[(p, b)].decoding_accuracy,
                "threshold": by_pair[(p, b)].threshold} for p, b in eps]
    summary["diagnostics"] = diag
    files = {
        "correlations.csv": R.render_csv("correlations.csv", corr),
        "decoding_matrix.csv": R.render_csv("decoding_matrix.csv", dm),
        "exclusive_providers.csv": R.render_csv("exclusive_providers.csv", ep_rows),
    }
    return files, summary


def stage_stats(cfg: RunConfig) -> tuple[dict, dict]:
    out = Path(cfg.out_dir)
    profiles = R.read_csv(out / "profiles.csv", "profiles.csv")
    block_eof = R.read_csv(out / "block_eof.csv", "block_eof.csv")
    bm_path = out / "bid_metrics.csv"
    bid_metrics = R.read_csv(bm_path, "bid_metrics.csv") if bm_path.exists() else None
    return run_stats(profiles, block_eof, bid_metrics, cfg)


STAGE_FUNCS = {
    "label": stage_label,
    "metrics": stage_metrics,
    "analytics": stage_analytics,
    "bids": stage_bids,
    "stats": stage_stats,
}


def run(cfg: RunConfig, stages: Sequence[str]) -> dict:
    """Run stages in pipeline order; returns the run summary (also written)."""
    cfg.validate()
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise InputError(f"unknown stage(s): {', '.join(unknown)}")
    ordered = [s for s in STAGES if s in stages]
    summary = {"stages": ordered, "config": cfg.echo(), "config_hash": cfg.digest(),
               "seed": cfg.seed, "results": {}}
    for s in ordered:
        files, info = STAGE_FUNCS[s](cfg)
        R.commit_outputs(cfg.out_dir, files)
        info["outputs"] = sorted(files)
        summary["results"][s] = info
    R.commit_outputs(cfg.out_dir, {R.SUMMARY_FILE: R.render_json(summary)})
    return summary
