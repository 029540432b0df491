"""Aggregates ground-truth outcome rows or detector result rows into the
measurement dimensions used in reporting: latency distributions, late-bid
shares, bid prices, facet breakdown, and partner popularity.

Percentiles use linear interpolation between closest ranks, computed in
Decimal so grouped reports are exact and byte-stable.  Rank bins are 500
sites wide, partner-popularity bins group 10 partners at a time.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from decimal import Decimal
from typing import Iterable

from .domain import decimal_str, quantize_cpm

RANK_BIN_WIDTH = 500
POPULARITY_BIN_WIDTH = 10

LATENCY_GROUPS = ("site", "partner", "partner_count", "slot_count", "rank_bin")
PRICE_GROUPS = ("slot_size", "facet", "partner_popularity_bin")

REPORT_NAMES = (
    "latency_by_site",
    "latency_by_partner",
    "latency_by_partner_count",
    "latency_by_slot_count",
    "latency_by_rank_bin",
    "late_bid_fractions",
    "late_by_partner",
    "prices_by_slot_size",
    "prices_by_facet",
    "prices_by_popularity_bin",
    "facet_breakdown",
    "partner_popularity",
    "partner_combinations",
)

CSV_COLUMNS = ("group", "count", "p5", "p25", "p50", "p75", "p95", "mean")


@dataclass(frozen=True)
class BidPoint:
    partner: str
    size: str | None
    cpm: Decimal
    latency_ms: Decimal | None
    late: bool
    channel: str


@dataclass(frozen=True)
class AuctionRecord:
    """One auction round, normalized from either input schema."""

    site_id: str
    round_index: int
    facet: str | None
    is_hb: bool
    rank: int | None
    partner_ids: tuple[str, ...]
    bids: tuple[BidPoint, ...]
    total_latency_ms: Decimal | None
    slot_count: int


def _dec(value) -> Decimal | None:
    if value is None:
        return None
    return Decimal(str(value))


def record_from_outcome_row(row: dict) -> AuctionRecord:
    facet = row.get("facet")
    bids = []
    if facet == "waterfall_only":
        for tier in row.get("tiers_tried", []):
            if tier.get("bid") is not None:
                bids.append(
                    BidPoint(
                        partner=tier["partner"],
                        size=None,
                        cpm=_dec(tier["bid"]),
                        latency_ms=_dec(tier["latency_ms"]),
                        late=False,
                        channel="client",
                    )
                )
    else:
        for slot in row.get("slots", []):
            for bid in slot.get("bids", []):
                arrived = _dec(bid.get("arrived_at_ms"))
                requested = _dec(bid.get("requested_at_ms"))
                latency = None
                if bid.get("channel") == "client" and arrived is not None and requested is not None:
                    latency = arrived - requested
                bids.append(
                    BidPoint(
                        partner=bid["partner"],
                        size=slot.get("size"),
                        cpm=_dec(bid["cpm"]),
                        latency_ms=latency,
                        late=bool(bid.get("late")),
                        channel=bid.get("channel", "client"),
                    )
                )
    return AuctionRecord(
        site_id=row["site_id"],
        round_index=int(row.get("round_index", 0)),
        facet=facet,
        is_hb=facet in ("client_side", "server_side", "hybrid"),
        rank=int(row["rank"]) if row.get("rank") is not None else None,
        partner_ids=tuple(row.get("partner_ids", [])),
        bids=tuple(bids),
        total_latency_ms=_dec(row.get("total_latency_ms")),
        slot_count=int(row.get("slot_count", 0)),
    )


def record_from_result_row(row: dict, rank_by_site: dict[str, int] | None = None) -> AuctionRecord:
    bids = []
    for auction in row.get("auctions", []):
        for bid in auction.get("bids", []):
            bids.append(
                BidPoint(
                    partner=bid["partner"],
                    size=auction.get("size"),
                    cpm=_dec(bid["cpm"]),
                    latency_ms=_dec(bid.get("latency_ms")),
                    late=bool(bid.get("late")),
                    channel=bid.get("channel", "client"),
                )
            )
    rank = None
    if rank_by_site:
        rank = rank_by_site.get(row["site_id"])
    return AuctionRecord(
        site_id=row["site_id"],
        round_index=int(row.get("round_index", 0)),
        facet=row.get("facet"),
        is_hb=bool(row.get("is_hb")),
        rank=rank,
        partner_ids=tuple(row.get("partners", [])),
        bids=tuple(bids),
        total_latency_ms=_dec(row.get("hb_latency_ms")),
        slot_count=len(row.get("auctions", [])),
    )


def load_records(path, rank_by_site: dict[str, int] | None = None) -> list[AuctionRecord]:
    """Read an outcomes or results JSONL file; the schema is sniffed per row."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            if "error" in row:
                continue
            if "is_hb" in row:
                records.append(record_from_result_row(row, rank_by_site))
            else:
                records.append(record_from_outcome_row(row))
    return records


def percentile(values, q_pct: int) -> Decimal:
    """q_pct-th percentile, linear interpolation between closest ranks."""
    data = sorted(values)
    if not data:
        raise ValueError("percentile of empty data")
    n = len(data)
    if n == 1:
        return data[0]
    pos = q_pct * (n - 1)
    i, rem = divmod(pos, 100)
    i = int(i)
    if rem == 0:
        return data[i]
    return data[i] + (data[i + 1] - data[i]) * Decimal(rem) / Decimal(100)


@dataclass(frozen=True)
class StatsSummary:
    count: int
    p5: Decimal
    p25: Decimal
    p50: Decimal
    p75: Decimal
    p95: Decimal
    mean: Decimal

    @classmethod
    def of(cls, values) -> "StatsSummary":
        data = sorted(values)
        if not data:
            raise ValueError("cannot summarize empty data")
        total = sum(data, Decimal(0))
        return cls(
            count=len(data),
            p5=percentile(data, 5),
            p25=percentile(data, 25),
            p50=percentile(data, 50),
            p75=percentile(data, 75),
            p95=percentile(data, 95),
            mean=total / Decimal(len(data)),
        )


def _summarize_groups(groups: dict[str, list[Decimal]]) -> dict[str, StatsSummary]:
    return {key: StatsSummary.of(vals) for key, vals in groups.items() if vals}


def rank_bin_label(rank: int) -> str:
    lo = ((rank - 1) // RANK_BIN_WIDTH) * RANK_BIN_WIDTH + 1
    return f"{lo}-{lo + RANK_BIN_WIDTH - 1}"


def latency_stats(
    records: Iterable[AuctionRecord],
    group_by: str,
    include_zero_bid_auctions: bool = True,
) -> dict[str, StatsSummary]:
    """Latency distributions grouped one of five ways.

    Per-auction groupings use the auction's total latency; the partner
    grouping uses per-bid response times.  Auctions that drew no bids can be
    filtered out, since a wrapper waiting on silence measures only its
    timeout.
    """
    if group_by not in LATENCY_GROUPS:
        raise ValueError(f"unknown latency grouping {group_by!r}; expected one of {LATENCY_GROUPS}")
    groups: dict[str, list[Decimal]] = {}
    for rec in records:
        if group_by == "partner":
            for bid in rec.bids:
                if bid.latency_ms is not None:
                    groups.setdefault(bid.partner, []).append(bid.latency_ms)
            continue
        if rec.total_latency_ms is None:
            continue
        if not include_zero_bid_auctions and not rec.bids:
            continue
        if group_by == "site":
            key = rec.site_id
        elif group_by == "partner_count":
            key = str(len(rec.partner_ids))
        elif group_by == "slot_count":
            key = str(rec.slot_count)
        else:
            if rec.rank is None:
                continue
            key = rank_bin_label(rec.rank)
        groups.setdefault(key, []).append(rec.total_latency_ms)
    return _summarize_groups(groups)


@dataclass(frozen=True)
class LateBidStats:
    per_auction: StatsSummary | None
    per_auction_with_late: StatsSummary | None
    per_partner: dict[str, tuple[int, int, Decimal]]  # partner -> (bids, late, fraction)


def late_bid_stats(records: Iterable[AuctionRecord]) -> LateBidStats:
    """Late-bid shares: per-auction fraction distribution (auctions with no
    bids are excluded to avoid 0/0) and per-partner late percentage."""
    fractions: list[Decimal] = []
    with_late: list[Decimal] = []
    partner_totals: dict[str, list[int]] = {}
    for rec in records:
        client_bids = [b for b in rec.bids if b.channel == "client"]
        if client_bids:
            late = sum(1 for b in client_bids if b.late)
            fraction = Decimal(late) / Decimal(len(client_bids))
            fractions.append(fraction)
            if late:
                with_late.append(fraction)
        for bid in client_bids:
            tally = partner_totals.setdefault(bid.partner, [0, 0])
            tally[0] += 1
            tally[1] += int(bid.late)
    per_partner = {
        pid: (total, late, Decimal(late) / Decimal(total))
        for pid, (total, late) in partner_totals.items()
    }
    return LateBidStats(
        per_auction=StatsSummary.of(fractions) if fractions else None,
        per_auction_with_late=StatsSummary.of(with_late) if with_late else None,
        per_partner=per_partner,
    )


def _popularity_order(records: list[AuctionRecord]) -> list[str]:
    presence: dict[str, set[str]] = {}
    for rec in records:
        if not rec.is_hb:
            continue
        for pid in rec.partner_ids:
            presence.setdefault(pid, set()).add(rec.site_id)
    return sorted(presence, key=lambda pid: (-len(presence[pid]), pid))


def price_stats(records: Iterable[AuctionRecord], group_by: str) -> dict[str, StatsSummary]:
    """Bid-price distributions by slot size ("WxH"), facet, or partner
    popularity bin (partners ranked by site presence, 10 per bin)."""
    if group_by not in PRICE_GROUPS:
        raise ValueError(f"unknown price grouping {group_by!r}; expected one of {PRICE_GROUPS}")
    records = list(records)
    groups: dict[str, list[Decimal]] = {}
    if group_by == "partner_popularity_bin":
        order = _popularity_order(records)
        bin_of = {
            pid: f"{(i // POPULARITY_BIN_WIDTH) * POPULARITY_BIN_WIDTH + 1}-"
            f"{(i // POPULARITY_BIN_WIDTH) * POPULARITY_BIN_WIDTH + POPULARITY_BIN_WIDTH}"
            for i, pid in enumerate(order)
        }
    for rec in records:
        for bid in rec.bids:
            if group_by == "slot_size":
                if bid.size is None:
                    continue
                key = bid.size
            elif group_by == "facet":
                if rec.facet is None:
                    continue
                key = rec.facet
            else:
                key = bin_of.get(bid.partner)
                if key is None:
                    continue
            groups.setdefault(key, []).append(bid.cpm)
    return _summarize_groups(groups)


def facet_breakdown(records: Iterable[AuctionRecord]) -> dict[str, Decimal]:
    """Proportion of each HB facet among sites detected as HB."""
    facet_by_site: dict[str, str] = {}
    for rec in records:
        if rec.is_hb and rec.facet:
            facet_by_site[rec.site_id] = rec.facet
    total = len(facet_by_site)
    if total == 0:
        return {}
    counts: dict[str, int] = {}
    for facet in facet_by_site.values():
        counts[facet] = counts.get(facet, 0) + 1
    return {facet: Decimal(n) / Decimal(total) for facet, n in sorted(counts.items())}


@dataclass(frozen=True)
class PopularityReport:
    hb_sites: int
    presence: dict[str, tuple[int, Decimal]]  # partner -> (sites, fraction)
    combinations: list[tuple[str, int, Decimal]]  # sorted most frequent first


def partner_popularity_and_combinations(records: Iterable[AuctionRecord]) -> PopularityReport:
    """Per-partner site presence and the frequency-ranked exact partner sets."""
    partners_by_site: dict[str, set[str]] = {}
    for rec in records:
        if not rec.is_hb:
            continue
        partners_by_site.setdefault(rec.site_id, set()).update(rec.partner_ids)
    total = len(partners_by_site)
    presence_sites: dict[str, int] = {}
    combo_counts: dict[str, int] = {}
    for site, pids in partners_by_site.items():
        for pid in pids:
            presence_sites[pid] = presence_sites.get(pid, 0) + 1
        combo_counts["+".join(sorted(pids))] = combo_counts.get("+".join(sorted(pids)), 0) + 1
    presence = {
        pid: (n, Decimal(n) / Decimal(total)) for pid, n in presence_sites.items()
    }
    combinations = [
        (combo, n, Decimal(n) / Decimal(total))
        for combo, n in sorted(combo_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    ]
    return PopularityReport(hb_sites=total, presence=presence, combinations=combinations)


def _fmt(value: Decimal) -> str:
    return decimal_str(quantize_cpm(value))


def _stats_row(group: str, s: StatsSummary) -> dict:
    return {
        "group": group,
        "count": s.count,
        "p5": _fmt(s.p5),
        "p25": _fmt(s.p25),
        "p50": _fmt(s.p50),
        "p75": _fmt(s.p75),
        "p95": _fmt(s.p95),
        "mean": _fmt(s.mean),
    }


def _flat_row(group: str, count: int, value: Decimal) -> dict:
    text = _fmt(value)
    return {"group": group, "count": count, "p5": text, "p25": text, "p50": text,
            "p75": text, "p95": text, "mean": text}


def _numeric_key(key: str):
    return (0, int(key)) if key.isdigit() else (1, key)


def build_report(
    name: str,
    records: list[AuctionRecord],
    include_zero_bid_auctions: bool = True,
) -> list[dict]:
    """Rows for one named report, in the fixed CSV column schema."""
    if name == "latency_by_site":
        stats = latency_stats(records, "site", include_zero_bid_auctions)
        return [_stats_row(k, stats[k]) for k in sorted(stats)]
    if name == "latency_by_partner":
        stats = latency_stats(records, "partner", include_zero_bid_auctions)
        return [_stats_row(k, stats[k]) for k in sorted(stats)]
    if name == "latency_by_partner_count":
        stats = latency_stats(records, "partner_count", include_zero_bid_auctions)
        return [_stats_row(k, stats[k]) for k in sorted(stats, key=_numeric_key)]
    if name == "latency_by_slot_count":
        stats = latency_stats(records, "slot_count", include_zero_bid_auctions)
        return [_stats_row(k, stats[k]) for k in sorted(stats, key=_numeric_key)]
    if name == "latency_by_rank_bin":
        stats = latency_stats(records, "rank_bin", include_zero_bid_auctions)
        return [_stats_row(k, stats[k]) for k in sorted(stats, key=lambda k: int(k.split("-")[0]))]
    if name == "late_bid_fractions":
        late = late_bid_stats(records)
        rows = []
        if late.per_auction:
            rows.append(_stats_row("all_auctions", late.per_auction))
        if late.per_auction_with_late:
            rows.append(_stats_row("auctions_with_late_bids", late.per_auction_with_late))
        return rows
    if name == "late_by_partner":
        late = late_bid_stats(records)
        rows = []
        for pid in sorted(late.per_partner):
            total, n_late, fraction = late.per_partner[pid]
            indicator = [Decimal(1)] * n_late + [Decimal(0)] * (total - n_late)
            rows.append(_stats_row(pid, StatsSummary.of(indicator)))
        return rows
    if name == "prices_by_slot_size":
        stats = price_stats(records, "slot_size")
        return [_stats_row(k, stats[k]) for k in sorted(stats)]
    if name == "prices_by_facet":
        stats = price_stats(records, "facet")
        return [_stats_row(k, stats[k]) for k in sorted(stats)]
    if name == "prices_by_popularity_bin":
        stats = price_stats(records, "partner_popularity_bin")
        return [_stats_row(k, stats[k]) for k in sorted(stats, key=lambda k: int(k.split("-")[0]))]
    if name == "facet_breakdown":
        sites_per_facet: dict[str, set[str]] = {}
        for rec in records:
            if rec.is_hb and rec.facet:
                sites_per_facet.setdefault(rec.facet, set()).add(rec.site_id)
        breakdown = facet_breakdown(records)
        return [
            _flat_row(facet, len(sites_per_facet[facet]), share)
            for facet, share in breakdown.items()
        ]
    if name == "partner_popularity":
        report = partner_popularity_and_combinations(records)
        ranked = sorted(report.presence.items(), key=lambda kv: (-kv[1][0], kv[0]))
        return [_flat_row(pid, sites, fraction) for pid, (sites, fraction) in ranked]
    if name == "partner_combinations":
        report = partner_popularity_and_combinations(records)
        return [_flat_row(combo, n, fraction) for combo, n, fraction in report.combinations]
    raise ValueError(f"unknown report {name!r}; valid names: {', '.join(REPORT_NAMES)}")


def write_report_csv(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_report_json(path, reports: dict[str, list[dict]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"reports": reports}, fh, indent=2, sort_keys=True)
        fh.write("\n")
