"""CSV report emission and reading.

Each report has a fixed column contract (``COLUMNS``). Amounts are written as
integer wei, with ``*_eth`` companions rendered at 18-decimal fixed point.
Floats use ``repr`` so output is byte-stable. A stage's outputs are committed
together: every file goes to a temp name first and is renamed only once all
of them rendered successfully.
"""

from __future__ import annotations

import csv
import io
import json
import os
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .ingest import WEI_PER_ETH, InputError
from .labeler import ORDER_FLOW_LABELS, TRANSPARENCY_LABELS

OF_SHARE_COLUMNS = tuple(f"of_{l}_share" for l in ORDER_FLOW_LABELS)
TR_SHARE_COLUMNS = tuple(f"tr_{l}_share" for l in TRANSPARENCY_LABELS)

COLUMNS: dict[str, tuple[str, ...]] = {
    "labels.csv": (
        "hash", "slot", "block_index", "transparency", "order_flow",
        "bundle_id", "bundle_kind", "bundle_role",
    ),
    "economics.csv": (
        "slot", "builder", "timestamp", "tv_wei", "vp_wei", "rp_wei", "bp_wei", "pm",
        "excluded", "exclusion_reason", "payer", "over_promised_wei", "under_promised_wei",
        "excluded_value_wei",
    ),
    "profiles.csv": (
        "builder", "total_blocks", "market_share", "market_share_pct",
        "validator_payment_wei", "validator_payment_eth",
        "subsidy_wei", "subsidy_eth", "profit_wei", "profit_eth",
        "true_value_wei", "true_value_eth", "profit_margin", "profit_margin_pct", "mean_block_margin",
        "profitable_blocks", "neutral_blocks", "subsidized_blocks",
        "profitable_pct", "neutral_pct", "subsidized_pct",
        "tob_value_pct", "bob_value_pct", "eob_value_pct",
        "entropy", "msof_label", "msof_share", "msof_tie",
        *TR_SHARE_COLUMNS, *OF_SHARE_COLUMNS,
        "excluded_blocks", "excluded_blocks_pct", "excluded_value_wei", "excluded_value_eth",
        "other_fee_payer_pct", "promise_delivered_pct",
        "over_promised_wei", "over_promised_eth", "under_promised_wei", "under_promised_eth",
        "relay_payment_wei", "relay_payment_eth",
    ),
    "composition.csv": (
        "scope", "key", "dimension", "label", "tx_count", "blocks_with_label",
        "value_wei", "gas_used", "value_share", "gas_share", "occurrence",
        "avg_value_eth", "value_per_gas_eth",
    ),
    "positions.csv": (
        "builder", "tob_value_wei", "bob_value_wei", "eob_value_wei",
        "tob_share", "bob_share", "eob_share",
    ),
    "eof_shares.csv": ("scope", "builder", "date", "provider", "value_wei", "share"),
    "daily_series.csv": (
        "date", "builder", "blocks", "market_share", "profit_wei", "profit_eth",
        "cum_profit_wei", "cum_profit_eth", "true_value_wei", "profit_margin", "mean_block_margin",
    ),
    "block_eof.csv": ("slot", "builder", "provider", "value_wei", "share"),
    "bid_metrics.csv": (
        "builder", "total_blocks", "slots_bid", "avg_bids", "avg_update_lag_ms",
        "avg_winner_time_ms", "total_cancels", "avg_cancels",
    ),
    "correlations.csv": ("analysis", "target", "feature", "coefficient", "p_value", "n", "significant"),
    "decoding_matrix.csv": ("builder", "provider", "decoding_accuracy", "threshold", "significant", "n_test"),
    "exclusive_providers.csv": ("provider", "builder", "decoding_accuracy", "threshold"),
}

SUMMARY_FILE = "run_summary.json"


# -- formatting --------------------------------------------------------------------

def wei_to_eth(wei: int) -> str:
    """Exact decimal ETH string with 18 fractional digits."""
    sign = "-" if wei < 0 else ""
    q, r = divmod(abs(int(wei)), WEI_PER_ETH)
    return f"{sign}{q}.{r:018d}"


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Fraction):
        value = float(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def pct(x) -> float | None:
    return None if x is None else float(x) * 100.0


def render_csv(name: str, rows: Iterable[Mapping]) -> str:
    cols = COLUMNS[name]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def render_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def commit_outputs(out_dir, files: Mapping[str, str]) -> list[str]:
    """Write all files atomically as a group; on failure nothing new is left."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    temps = []
    try:
        for name, text in files.items():
            tmp = out / f".{name}.tmp{os.getpid()}"
            temps.append((tmp, out / name))
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        for tmp, final in temps:
            os.replace(tmp, final)
    except BaseException:
        for tmp, _ in temps:
            try:
                tmp.unlink()
            except FileNotFoundError:
                pass
        raise
    return sorted(files)


# -- reading -------------------------------------------------------------------------

def read_csv(path, name: str | None = None) -> list[dict]:
    """Rows of a report file; the header must carry the report's contract columns."""
    path = Path(path)
    name = name or path.name
    if not path.exists():
        raise InputError(f"missing input {path} (produced by an earlier stage)")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        need = COLUMNS.get(name, ())
        missing = [c for c in need if c not in header]
        if missing:
            raise InputError(f"{path}: missing column(s) {', '.join(missing)}")
        return list(reader)


def opt_int(s: str) -> int | None:
    return None if s == "" else int(s)


def opt_float(s: str) -> float | None:
    return None if s == "" else float(s)


def parse_bool(s: str) -> bool:
    return s.strip().lower() in ("true", "1", "yes")


def shares_row(prefix_cols: Sequence[str], values: Sequence[float]) -> dict:
    return dict(zip(prefix_cols, values))
