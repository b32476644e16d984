"""Input corpora: blocks (JSONL), mempool visibility, registries, payloads and
relay bids (CSV).

All monetary fields are integer wei. Loaders never drop malformed input
silently: every rejected line is recorded in a :class:`LoadReport` together
with its line number and the offending field.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping

WEI_PER_ETH = 10**18
GWEI = 10**9

COWSWAP_SETTLEMENT = "0x9008d19f58aabd9ed0d60971565aa8510560ab41"
MEVBLOCKER_SAFE = "0xce91228789b57deb45e66ca10ff648385fe7093b"
UNISWAP_UNIVERSAL_ROUTER = "0x3fc91a3afd70395cd496c647d5a6cc9d4b2b7fad"

REGISTRY_KINDS = (
    "cex_deposit",
    "telegram_bot",
    "solver_router",
    "known_router",
    "non_mev_contract",
    "searcher",
    "mev_label",
    "builder_pubkey",
    "eof_provider",
    "ofa_refund_address",
    "relay_fee_address",
)
MEV_LABEL_VALUES = frozenset(
    {"atomic_arb", "sandwich_front", "sandwich_back", "sandwich_victim", "liquidation"}
)
# registries keyed by transaction hash / builder pubkey rather than address
_KEY_PATTERNS = {"mev_label": "hash", "builder_pubkey": "pubkey"}

_HEX = {
    "address": re.compile(r"^0x[0-9a-f]{40}$"),
    "hash": re.compile(r"^0x[0-9a-f]{64}$"),
    "pubkey": re.compile(r"^0x[0-9a-f]{96}$"),
}


class InputError(Exception):
    """Unreadable or unusable input. Maps to CLI exit code 1."""


class InvariantViolation(Exception):
    """Input that parses but breaks a data invariant. Maps to exit code 2."""


class SchemaError(ValueError):
    def __init__(self, field_name: str | None, reason: str):
        super().__init__(f"{field_name}: {reason}" if field_name else reason)
        self.field = field_name
        self.reason = reason


def normalize_hex(value, kind: str, field_name: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(field_name, f"expected hex string, got {type(value).__name__}")
    v = value.strip().lower()
    if not _HEX[kind].match(v):
        raise SchemaError(field_name, f"not a valid {kind}: {value!r}")
    return v


def _int(value, field_name: str, minimum: int | None = 0) -> int:
    # wei amounts may arrive as JSON numbers or decimal strings
    if isinstance(value, bool):
        raise SchemaError(field_name, "expected integer, got bool")
    if isinstance(value, int):
        out = value
    elif isinstance(value, str) and re.fullmatch(r"-?\d+", value.strip()):
        out = int(value.strip())
    elif isinstance(value, float) and value.is_integer():
        out = int(value)
    else:
        raise SchemaError(field_name, f"expected integer, got {value!r}")
    if minimum is not None and out < minimum:
        raise SchemaError(field_name, f"must be >= {minimum}, got {out}")
    return out


def unknown_builder_id(pubkey: str) -> str:
    return f"unknown:{pubkey[:10]}"


@dataclass(frozen=True)
class TransactionRecord:
    hash: str
    block_index: int
    sender: str
    recipient: str | None
    status: str
    gas_used: int
    priority_fee_per_gas: int
    tip_total: int
    coinbase_transfer: int
    value: int
    erc20_transfer_count: int = 0
    swap_count: int = 0
    swap_pool_directions: tuple[tuple[str, str], ...] = ()
    first_seen_mempool: int | None = None

    @property
    def failed(self) -> bool:
        return self.status == "failed"

    @property
    def effective_coinbase(self) -> int:
        """Coinbase transfer as counted toward block value (0 for failed txs)."""
        return 0 if self.failed else self.coinbase_transfer

    @property
    def seen_in_mempool(self) -> bool:
        return self.first_seen_mempool is not None

    @property
    def has_token_activity(self) -> bool:
        return self.erc20_transfer_count > 0 or self.swap_count > 0


@dataclass(frozen=True)
class BlockRecord:
    slot: int
    block_number: int
    builder_id: str
    builder_pubkey: str
    fee_recipient: str
    transactions: tuple[TransactionRecord, ...]
    timestamp: int
    proposer_fee_recipient: str | None = None
    relay_reported_value: int | None = None


@dataclass(frozen=True)
class Rejection:
    line: int
    field: str | None
    reason: str


@dataclass
class LoadReport:
    source: str
    accepted: int = 0
    rejections: list[Rejection] = field(default_factory=list)
    header: dict | None = None

    @property
    def rejected(self) -> int:
        return len(self.rejections)

    def reject(self, line: int, err: Exception) -> None:
        fname = getattr(err, "field", None)
        self.rejections.append(Rejection(line, fname, str(err)))

    def summary(self) -> dict:
        return {
            "source": self.source,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "rejections": [asdict(r) for r in self.rejections[:50]],
        }


# -- blocks ------------------------------------------------------------------

_TX_REQUIRED = (
    "hash", "block_index", "sender", "status", "gas_used",
    "priority_fee_per_gas", "tip_total", "coinbase_transfer", "value",
)
_BLOCK_REQUIRED = (
    "slot", "block_number", "builder_pubkey", "fee_recipient", "timestamp", "transactions",
)


def _parse_tx(obj: Mapping, pos: int) -> TransactionRecord:
    if not isinstance(obj, Mapping):
        raise SchemaError(f"transactions[{pos}]", "expected object")
    for name in _TX_REQUIRED:
        if name not in obj:
            raise SchemaError(f"transactions[{pos}].{name}", "missing required field")
    status = obj["status"]
    if status not in ("success", "failed"):
        raise SchemaError(f"transactions[{pos}].status", f"unknown status {status!r}")
    recipient = obj.get("recipient")
    pools = []
    for p in obj.get("swap_pool_directions") or ():
        if not (isinstance(p, (list, tuple)) and len(p) == 2):
            raise SchemaError(f"transactions[{pos}].swap_pool_directions", "expected [pool, direction] pairs")
        pools.append((str(p[0]).lower(), str(p[1])))
    seen = obj.get("first_seen_mempool")
    return TransactionRecord(
        hash=normalize_hex(obj["hash"], "hash", f"transactions[{pos}].hash"),
        block_index=_int(obj["block_index"], f"transactions[{pos}].block_index"),
        sender=normalize_hex(obj["sender"], "address", f"transactions[{pos}].sender"),
        recipient=None if recipient is None else normalize_hex(recipient, "address", f"transactions[{pos}].recipient"),
        status=status,
        gas_used=_int(obj["gas_used"], f"transactions[{pos}].gas_used"),
        priority_fee_per_gas=_int(obj["priority_fee_per_gas"], f"transactions[{pos}].priority_fee_per_gas"),
        tip_total=_int(obj["tip_total"], f"transactions[{pos}].tip_total"),
        coinbase_transfer=_int(obj["coinbase_transfer"], f"transactions[{pos}].coinbase_transfer"),
        value=_int(obj["value"], f"transactions[{pos}].value"),
        erc20_transfer_count=_int(obj.get("erc20_transfer_count", 0), f"transactions[{pos}].erc20_transfer_count"),
        swap_count=_int(obj.get("swap_count", 0), f"transactions[{pos}].swap_count"),
        swap_pool_directions=tuple(pools),
        first_seen_mempool=None if seen is None else _int(seen, f"transactions[{pos}].first_seen_mempool", None),
    )


def parse_block(obj: Mapping, builder_registry: "Registry | None" = None) -> BlockRecord:
    """Validate one decoded JSONL object and build a :class:`BlockRecord`."""
    if not isinstance(obj, Mapping):
        raise SchemaError(None, "line is not a JSON object")
    for name in _BLOCK_REQUIRED:
        if name not in obj:
            raise SchemaError(name, "missing required field")
    if not isinstance(obj["transactions"], list):
        raise SchemaError("transactions", "expected list")
    txs = sorted((_parse_tx(t, i) for i, t in enumerate(obj["transactions"])), key=lambda t: t.block_index)
    for expect, tx in enumerate(txs):
        if tx.block_index != expect:
            raise SchemaError("transactions", f"block_index not contiguous from 0 (expected {expect}, got {tx.block_index})")
    pubkey = normalize_hex(obj["builder_pubkey"], "pubkey", "builder_pubkey")
    builder_id = None
    if builder_registry is not None:
        builder_id = builder_registry.get(pubkey)
    if builder_id is None:
        builder_id = obj.get("builder_id") or unknown_builder_id(pubkey)
    proposer = obj.get("proposer_fee_recipient")
    reported = obj.get("relay_reported_value")
    return BlockRecord(
        slot=_int(obj["slot"], "slot"),
        block_number=_int(obj["block_number"], "block_number"),
        builder_id=str(builder_id),
        builder_pubkey=pubkey,
        fee_recipient=normalize_hex(obj["fee_recipient"], "address", "fee_recipient"),
        transactions=tuple(txs),
        timestamp=_int(obj["timestamp"], "timestamp"),
        proposer_fee_recipient=None if proposer is None else normalize_hex(proposer, "address", "proposer_fee_recipient"),
        relay_reported_value=None if reported is None else _int(reported, "relay_reported_value"),
    )


def block_to_json(block: BlockRecord) -> dict:
    """Inverse of :func:`parse_block` (wei amounts as decimal strings)."""
    txs = []
    for t in block.transactions:
        d = {
            "hash": t.hash,
            "block_index": t.block_index,
            "sender": t.sender,
            "recipient": t.recipient,
            "status": t.status,
            "gas_used": t.gas_used,
            "priority_fee_per_gas": str(t.priority_fee_per_gas),
            "tip_total": str(t.tip_total),
            "coinbase_transfer": str(t.coinbase_transfer),
            "value": str(t.value),
            "erc20_transfer_count": t.erc20_transfer_count,
            "swap_count": t.swap_count,
            "swap_pool_directions": [list(p) for p in t.swap_pool_directions],
        }
        if t.first_seen_mempool is not None:
            d["first_seen_mempool"] = t.first_seen_mempool
        txs.append(d)
    out = {
        "slot": block.slot,
        "block_number": block.block_number,
        "builder_id": block.builder_id,
        "builder_pubkey": block.builder_pubkey,
        "fee_recipient": block.fee_recipient,
        "timestamp": block.timestamp,
        "transactions": txs,
    }
    if block.proposer_fee_recipient is not None:
        out["proposer_fee_recipient"] = block.proposer_fee_recipient
    if block.relay_reported_value is not None:
        out["relay_reported_value"] = str(block.relay_reported_value)
    return out


def _open_text(source) -> tuple[IO[str], bool, str]:
    if isinstance(source, (str, Path)):
        try:
            return open(source, "r", encoding="utf-8", newline=""), True, str(source)
        except OSError as exc:
            raise InputError(f"cannot read {source}: {exc.strerror or exc}") from exc
    return source, False, getattr(source, "name", "<stream>")


def iter_blocks(source, builder_registry: "Registry | None" = None,
                report: LoadReport | None = None) -> Iterator[BlockRecord]:
    """Stream blocks from a JSONL file, one line at a time.

    A line holding a ``_meta`` object is treated as the corpus header and
    stored on ``report.header``. Blank lines are ignored; every other line is
    either accepted or recorded as a rejection.
    """
    fh, owned, name = _open_text(source)
    if report is None:
        report = LoadReport(name)
    try:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                report.reject(lineno, SchemaError(None, f"invalid JSON: {exc.msg}"))
                continue
            if isinstance(obj, dict) and "_meta" in obj:
                report.header = obj["_meta"]
                continue
            try:
                block = parse_block(obj, builder_registry)
            except SchemaError as exc:
                report.reject(lineno, exc)
                continue
            report.accepted += 1
            yield block
    finally:
        if owned:
            fh.close()


def load_blocks(path, builder_registry: "Registry | None" = None) -> tuple[list[BlockRecord], LoadReport]:
    report = LoadReport(str(path))
    blocks = list(iter_blocks(path, builder_registry, report))
    blocks.sort(key=lambda b: b.slot)
    return blocks, report


def write_blocks(blocks: Iterable[BlockRecord], fh: IO[str], header: dict | None = None) -> None:
    if header is not None:
        fh.write(json.dumps({"_meta": header}, sort_keys=True) + "\n")
    for b in blocks:
        fh.write(json.dumps(block_to_json(b), separators=(",", ":")) + "\n")


# -- CSV helpers ---------------------------------------------------------------

def _csv_rows(source, required: Iterable[str]) -> tuple[Iterator[tuple[int, dict]], str, callable]:
    fh, owned, name = _open_text(source)
    reader = csv.DictReader(fh)
    header = reader.fieldnames
    if header is None:
        if owned:
            fh.close()
        raise InputError(f"{name}: empty file, header row is mandatory")
    missing = [c for c in required if c not in header]
    if missing:
        if owned:
            fh.close()
        raise InputError(f"{name}: missing column(s) {', '.join(missing)}")

    def rows():
        try:
            for row in reader:
                # header is line 1
                yield reader.line_num, row
        finally:
            if owned:
                fh.close()

    return rows(), name, header


def load_mempool(path) -> tuple[dict[str, int], LoadReport]:
    """Read ``hash,first_seen_ms`` rows into one merged visibility map.

    Repeated hashes (several monitored nodes) keep the earliest sighting.
    """
    rows, name, _ = _csv_rows(path, ("hash", "first_seen_ms"))
    report = LoadReport(name)
    out: dict[str, int] = {}
    for lineno, row in rows:
        try:
            h = normalize_hex(row["hash"], "hash", "hash")
            ts = _int(row["first_seen_ms"], "first_seen_ms", None)
        except SchemaError as exc:
            report.reject(lineno, exc)
            continue
        report.accepted += 1
        prev = out.get(h)
        out[h] = ts if prev is None else min(prev, ts)
    return out, report


def apply_visibility(block: BlockRecord, visibility: Mapping[str, int]) -> BlockRecord:
    txs = tuple(replace(t, first_seen_mempool=visibility.get(t.hash)) for t in block.transactions)
    return replace(block, transactions=txs)


def join_mempool_visibility(blocks: Iterable[BlockRecord],
                            visibility: Mapping[str, int]) -> tuple[list[BlockRecord], int]:
    """Set ``first_seen_mempool`` from the visibility map.

    Returns the joined blocks and the number of visibility entries that matched
    no transaction in ``blocks``.
    """
    out = []
    matched = 0
    for b in blocks:
        joined = apply_visibility(b, visibility)
        matched += sum(1 for t in joined.transactions if t.first_seen_mempool is not None)
        out.append(joined)
    return out, len(visibility) - matched


# -- registries ------------------------------------------------------------------

@dataclass(frozen=True)
class Registry:
    kind: str
    entries: Mapping[str, str]
    sub_labels: Mapping[str, str] = field(default_factory=dict)

    def __contains__(self, key) -> bool:
        return key is not None and key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, key, default=None):
        if key is None:
            return default
        return self.entries.get(key, default)

    @classmethod
    def empty(cls, kind: str) -> "Registry":
        return cls(kind, {}, {})


def registry_from_rows(kind: str, rows: Iterable[tuple[str, str, str]], source: str = "<rows>") -> Registry:
    if kind not in REGISTRY_KINDS:
        raise InputError(f"unknown registry kind {kind!r}")
    key_kind = _KEY_PATTERNS.get(kind, "address")
    entries: dict[str, str] = {}
    subs: dict[str, str] = {}
    for lineno, (key, entity, sub) in enumerate(rows, start=2):
        try:
            k = normalize_hex(key, key_kind, "txhash" if key_kind == "hash" else key_kind)
        except SchemaError as exc:
            raise InputError(f"{source}:{lineno}: {exc}") from exc
        entity = (entity or "").strip()
        if not entity:
            raise InputError(f"{source}:{lineno}: empty entity for {k}")
        if kind == "mev_label" and entity not in MEV_LABEL_VALUES:
            raise InputError(f"{source}:{lineno}: unknown MEV label {entity!r}")
        prev = entries.get(k)
        if prev is not None and prev != entity:
            raise InputError(f"{source}: conflicting entities for {k}: {prev!r} vs {entity!r}")
        entries[k] = entity
        if sub:
            subs.setdefault(k, sub.strip())
    return Registry(kind, entries, subs)


def load_registry(path, kind: str) -> Registry:
    """Load ``registry_<kind>.csv`` (columns: address|txhash|pubkey, entity, sub_label)."""
    fh, owned, name = _open_text(path)
    try:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        key_col = next((c for c in ("address", "txhash", "pubkey") if c in header), None)
        if key_col is None or "entity" not in header:
            raise InputError(f"{name}: registry needs columns address (or txhash/pubkey) and entity")
        rows = [(r[key_col], r["entity"], r.get("sub_label") or "") for r in reader]
    finally:
        if owned:
            fh.close()
    reg = registry_from_rows(kind, rows, name)
    if not reg.entries:
        raise InputError(f"{name}: registry {kind} has no entries")
    return reg


@dataclass(frozen=True)
class Registries:
    """All label registries plus the fixed OFA contract addresses."""

    by_kind: Mapping[str, Registry] = field(default_factory=dict)
    cowswap_settlement: str = COWSWAP_SETTLEMENT
    mevblocker_safe: str = MEVBLOCKER_SAFE

    def __getitem__(self, kind: str) -> Registry:
        if kind not in REGISTRY_KINDS:
            raise KeyError(kind)
        return self.by_kind.get(kind) or Registry.empty(kind)

    def without(self, kind: str) -> "Registries":
        kinds = {k: v for k, v in self.by_kind.items() if k != kind}
        return replace(self, by_kind=kinds)

    def with_registry(self, reg: Registry) -> "Registries":
        kinds = dict(self.by_kind)
        kinds[reg.kind] = reg
        return replace(self, by_kind=kinds)


def load_registries(directory) -> Registries:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"registry directory not found: {directory}")
    found = {}
    for kind in REGISTRY_KINDS:
        p = directory / f"registry_{kind}.csv"
        if p.exists():
            found[kind] = load_registry(p, kind)
    return Registries(found)


# -- payloads ------------------------------------------------------------------

@dataclass(frozen=True)
class Payload:
    slot: int
    builder_pubkey: str
    fee_recipient: str
    proposer_fee_recipient: str
    value: int


def load_payloads(path) -> tuple[dict[int, Payload], LoadReport]:
    cols = ("slot", "builder_pubkey", "fee_recipient", "proposer_fee_recipient", "value_wei")
    rows, name, _ = _csv_rows(path, cols)
    report = LoadReport(name)
    out: dict[int, Payload] = {}
    for lineno, row in rows:
        try:
            p = Payload(
                slot=_int(row["slot"], "slot"),
                builder_pubkey=normalize_hex(row["builder_pubkey"], "pubkey", "builder_pubkey"),
                fee_recipient=normalize_hex(row["fee_recipient"], "address", "fee_recipient"),
                proposer_fee_recipient=normalize_hex(row["proposer_fee_recipient"], "address", "proposer_fee_recipient"),
                value=_int(row["value_wei"], "value_wei"),
            )
            if p.slot in out and out[p.slot] != p:
                raise SchemaError("slot", f"conflicting payload for slot {p.slot}")
        except SchemaError as exc:
            report.reject(lineno, exc)
            continue
        report.accepted += 1
        out[p.slot] = p
    return out, report


def apply_payload(block: BlockRecord, payloads: Mapping[int, Payload]) -> BlockRecord:
    p = payloads.get(block.slot)
    if p is None:
        return block
    return replace(block, proposer_fee_recipient=p.proposer_fee_recipient, relay_reported_value=p.value)


# -- bids ----------------------------------------------------------------------

@dataclass(frozen=True)
class BidRecord:
    slot: int
    builder_pubkey: str
    builder_id: str
    received_at: int
    value: int
    won: bool


def _bool(value: str, field_name: str) -> bool:
    v = (value or "").strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no", ""):
        return False
    raise SchemaError(field_name, f"expected boolean, got {value!r}")


def load_bids(path, builder_registry: Registry | None = None) -> tuple[dict[int, list[BidRecord]], LoadReport]:
    """Relay bids grouped by slot; each slot's list is sorted by receipt time.

    Raises :class:`InvariantViolation` when a slot has more than one winning bid.
    """
    cols = ("slot", "builder_pubkey", "received_at_ms", "value_wei", "won")
    rows, name, _ = _csv_rows(path, cols)
    report = LoadReport(name)
    by_slot: dict[int, list[BidRecord]] = {}
    for lineno, row in rows:
        try:
            pubkey = normalize_hex(row["builder_pubkey"], "pubkey", "builder_pubkey")
            bid = BidRecord(
                slot=_int(row["slot"], "slot"),
                builder_pubkey=pubkey,
                builder_id=(builder_registry.get(pubkey) if builder_registry else None) or unknown_builder_id(pubkey),
                received_at=_int(row["received_at_ms"], "received_at_ms", None),
                value=_int(row["value_wei"], "value_wei"),
                won=_bool(row["won"], "won"),
            )
        except SchemaError as exc:
            report.reject(lineno, exc)
            continue
        report.accepted += 1
        by_slot.setdefault(bid.slot, []).append(bid)
    for slot, bids in by_slot.items():
        if sum(b.won for b in bids) > 1:
            raise InvariantViolation(f"{name}: slot {slot} has more than one winning bid")
        bids.sort(key=lambda b: (b.received_at, b.builder_pubkey, b.value))
    return dict(sorted(by_slot.items())), report


def read_text_source(text: str) -> io.StringIO:
    """Wrap literal CSV/JSONL text so loaders can read it (used by tests/tools)."""
    return io.StringIO(text)
