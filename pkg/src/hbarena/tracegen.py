"""Renders ground-truth outcomes as the browser-observable record stream a
real in-page detector would see, and parses that stream back.

A trace is JSON Lines, one record per line, with a fixed key order
(ts_ms, kind, event_name, url, direction, params, auction_id, slot_id) and
timestamps as canonical 3-digit decimal strings, so serialization is
byte-stable and parse(serialize(trace)) is an identity.

Per-facet fingerprints:
  client/hybrid  wrapper DOM events plus per-bid request/response records
  server-side    no wrapper DOM events; one outbound request, per-slot
                 responses carrying hb_* parameters, render events only
  waterfall      sequential request/response pairs per tier, no DOM events
                 and no hb_* parameters (notification-URL style)

At equal timestamps the wrapper's auctionEnd is emitted before its ad-server
request.  Late responses keep their true arrival timestamps, after
auctionEnd; that is what makes late-bid analysis possible from traces alone.
Identifiers that would leak ground truth (facet labels, partner ids as
fields) are never serialized: partner identity is only recoverable from URLs
and parameters, as in a real capture.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Mapping

from .auction import AuctionOutcome, CHANNEL_CLIENT, SlotOutcome, WaterfallOutcome
from .domain import DemandPartnerSpec, Facet, WebsiteScenario, decimal_str, quantize_ms

DOM_EVENT_NAMES = (
    "auctionInit",
    "requestBids",
    "bidRequested",
    "bidResponse",
    "auctionEnd",
    "bidWon",
    "slotRenderEnded",
    "adRenderFailed",
)

KIND_DOM = "dom_event"
KIND_REQUEST = "web_request"
KIND_RESPONSE = "web_response"

_ALLOWED_KEYS = ("ts_ms", "kind", "event_name", "url", "direction", "params", "auction_id", "slot_id")
_HOST_RE = re.compile(r"^https?://([^/]+)", re.IGNORECASE)


class TraceParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class TraceEvent:
    ts_ms: Decimal
    kind: str
    event_name: str | None = None
    url: str | None = None
    direction: str | None = None
    params: dict[str, str] = field(default_factory=dict)
    auction_id: str | None = None
    slot_id: str | None = None

    @property
    def host(self) -> str | None:
        if not self.url:
            return None
        m = _HOST_RE.match(self.url)
        return m.group(1).lower() if m else None


@dataclass(frozen=True)
class Trace:
    site_id: str
    round_index: int
    events: tuple[TraceEvent, ...]


def trace_filename(site_id: str, round_index: int) -> str:
    return f"{site_id}__r{round_index}.trace.jsonl"


def truth_filename(site_id: str, round_index: int) -> str:
    return f"{site_id}__r{round_index}.truth.jsonl"


def _ts(value: Decimal) -> str:
    return format(quantize_ms(value), "f")


def _site_host(site_id: str) -> str:
    # Client-side publishers run their own ad server on a first-party host
    # that no partner directory will resolve.
    return "adserver." + re.sub(r"[^a-z0-9-]", "-", site_id.lower()) + ".example"


def _partner_host(spec: DemandPartnerSpec) -> str:
    return spec.domains[0]


def _dom(ts, name, params=None, auction_id=None, slot_id=None) -> TraceEvent:
    return TraceEvent(
        ts_ms=quantize_ms(ts),
        kind=KIND_DOM,
        event_name=name,
        params=dict(params or {}),
        auction_id=auction_id,
        slot_id=slot_id,
    )


def _web(ts, kind, url, direction, params=None, auction_id=None, slot_id=None) -> TraceEvent:
    return TraceEvent(
        ts_ms=quantize_ms(ts),
        kind=kind,
        url=url,
        direction=direction,
        params=dict(params or {}),
        auction_id=auction_id,
        slot_id=slot_id,
    )


def _winner_channel(slot: SlotOutcome) -> str | None:
    if slot.winner is None:
        return None
    pid, _ = slot.winner
    for bid in slot.bids:
        if bid.partner_id == pid and not bid.late:
            return bid.channel
    return None


def _render_events(slot: SlotOutcome, ts, aid) -> list[TraceEvent]:
    if not slot.filled:
        return []
    name = "adRenderFailed" if slot.render_failed else "slotRenderEnded"
    return [_dom(ts, name, {"hb_size": slot.size}, auction_id=aid, slot_id=slot.slot_id)]


def _emit_wrapper_round(
    outcome: AuctionOutcome,
    scenario: WebsiteScenario,
    partners: Mapping[str, DemandPartnerSpec],
) -> list[TraceEvent]:
    aid = f"{outcome.site_id}:r{outcome.round_index}"
    if scenario.ad_server_partner_id:
        ad_host = _partner_host(partners[scenario.ad_server_partner_id])
    else:
        ad_host = _site_host(outcome.site_id)
    send = outcome.wrapper_send_time_ms
    response_at = outcome.ad_server_response_time_ms

    events: list[TraceEvent] = []
    events.append(_dom(0, "auctionInit", auction_id=aid))
    events.append(_dom(0, "requestBids", auction_id=aid))
    for pid in scenario.partners:
        url = f"https://{_partner_host(partners[pid])}/hb/bid?auction={aid}&bidder={pid}"
        events.append(_dom(0, "bidRequested", {"bidder": pid}, auction_id=aid))
        events.append(_web(0, KIND_REQUEST, url, "outbound", {"bidder": pid}, auction_id=aid))

    # One response record per (partner, slot) bid keeps the flat parameter
    # map collision-free; all of one partner's bids share its arrival time.
    for slot in outcome.slots:
        for bid in slot.bids:
            if bid.channel != CHANNEL_CLIENT:
                continue
            url = f"https://{_partner_host(partners[bid.partner_id])}/hb/bid?auction={aid}&bidder={bid.partner_id}"
            params = {
                "bidder": bid.partner_id,
                "hb_price": decimal_str(bid.cpm),
                "hb_size": slot.size,
            }
            events.append(
                _web(bid.arrived_at_ms, KIND_RESPONSE, url, "inbound", params,
                     auction_id=aid, slot_id=slot.slot_id)
            )
            events.append(
                _dom(bid.arrived_at_ms, "bidResponse", params, auction_id=aid, slot_id=slot.slot_id)
            )

    events.append(_dom(send, "auctionEnd", auction_id=aid))
    ad_url = f"https://{ad_host}/hb/auction?auction={aid}"
    events.append(_web(send, KIND_REQUEST, ad_url, "outbound", {"hb_auction": aid}, auction_id=aid))
    for slot in outcome.slots:
        params = {"hb_auction": aid}
        if slot.winner is not None:
            pid, cpm = slot.winner
            params.update({"hb_partner": pid, "hb_price": decimal_str(cpm), "hb_size": slot.size})
        events.append(
            _web(response_at, KIND_RESPONSE, ad_url, "inbound", params,
                 auction_id=aid, slot_id=slot.slot_id)
        )
    for slot in outcome.slots:
        if slot.winner is not None and _winner_channel(slot) == CHANNEL_CLIENT:
            pid, cpm = slot.winner
            events.append(
                _dom(response_at, "bidWon",
                     {"bidder": pid, "hb_price": decimal_str(cpm), "hb_size": slot.size},
                     auction_id=aid, slot_id=slot.slot_id)
            )
        events.extend(_render_events(slot, response_at, aid))
    return events


def _emit_server_side(
    outcome: AuctionOutcome,
    scenario: WebsiteScenario,
    partners: Mapping[str, DemandPartnerSpec],
) -> list[TraceEvent]:
    aid = f"{outcome.site_id}:r{outcome.round_index}"
    ad_host = _partner_host(partners[scenario.ad_server_partner_id])
    ad_url = f"https://{ad_host}/hb/auction?auction={aid}"
    response_at = outcome.ad_server_response_time_ms

    events = [_web(0, KIND_REQUEST, ad_url, "outbound", {"hb_auction": aid}, auction_id=aid)]
    for slot in outcome.slots:
        params = {"hb_auction": aid}
        if slot.winner is not None:
            pid, cpm = slot.winner
            params.update({"hb_partner": pid, "hb_price": decimal_str(cpm), "hb_size": slot.size})
        events.append(
            _web(response_at, KIND_RESPONSE, ad_url, "inbound", params,
                 auction_id=aid, slot_id=slot.slot_id)
        )
    for slot in outcome.slots:
        events.extend(_render_events(slot, response_at, aid))
    return events


def _emit_waterfall(
    outcome: WaterfallOutcome,
    scenario: WebsiteScenario,
    partners: Mapping[str, DemandPartnerSpec],
) -> list[TraceEvent]:
    events: list[TraceEvent] = []
    t = Decimal(0)
    for i, trial in enumerate(outcome.tiers_tried):
        host = _partner_host(partners[trial.partner_id])
        url = f"https://{host}/wf/ad?tier={i}"
        events.append(_web(t, KIND_REQUEST, url, "outbound"))
        t += trial.latency_ms
        won = outcome.winner is not None and i == len(outcome.tiers_tried) - 1
        if won:
            params = {"price": decimal_str(outcome.winner[1])}
        else:
            params = {"nobid": "1"}
        events.append(_web(t, KIND_RESPONSE, url, "inbound", params))
    return events


def emit_trace(
    outcome: AuctionOutcome | WaterfallOutcome | None,
    scenario: WebsiteScenario,
    partners: Mapping[str, DemandPartnerSpec],
    round_index: int = 0,
) -> Trace:
    """Render one round's outcome as an ordered trace.

    Sites without ads produce an empty trace (round_index is only needed
    then; otherwise the outcome carries it).  Ground truth (facet label,
    winners, late flags) lives in the sidecar, never in the trace itself.
    """
    if outcome is None:
        return Trace(scenario.site_id, round_index, ())
    if isinstance(outcome, WaterfallOutcome):
        events = _emit_waterfall(outcome, scenario, partners)
    elif outcome.facet is Facet.SERVER_SIDE:
        events = _emit_server_side(outcome, scenario, partners)
    else:
        events = _emit_wrapper_round(outcome, scenario, partners)
    ordered = tuple(sorted(events, key=lambda e: e.ts_ms))  # stable: ties keep emission order
    return Trace(outcome.site_id, outcome.round_index, ordered)


def serialize_event(event: TraceEvent) -> str:
    obj: dict = {"ts_ms": _ts(event.ts_ms), "kind": event.kind}
    if event.event_name is not None:
        obj["event_name"] = event.event_name
    if event.url is not None:
        obj["url"] = event.url
    if event.direction is not None:
        obj["direction"] = event.direction
    if event.params:
        obj["params"] = event.params
    if event.auction_id is not None:
        obj["auction_id"] = event.auction_id
    if event.slot_id is not None:
        obj["slot_id"] = event.slot_id
    return json.dumps(obj, separators=(",", ":"))


def serialize_trace(trace: Trace) -> str:
    return "".join(serialize_event(e) + "\n" for e in trace.events)


def parse_event(obj: dict, line_no: int) -> TraceEvent:
    for key in obj:
        if key not in _ALLOWED_KEYS:
            raise TraceParseError(line_no, f"unknown key {key!r}")
    try:
        ts = Decimal(obj["ts_ms"])
    except (KeyError, InvalidOperation, TypeError) as exc:
        raise TraceParseError(line_no, f"bad ts_ms: {exc}") from exc
    kind = obj.get("kind")
    if kind not in (KIND_DOM, KIND_REQUEST, KIND_RESPONSE):
        raise TraceParseError(line_no, f"bad kind {kind!r}")
    name = obj.get("event_name")
    if kind == KIND_DOM:
        if name not in DOM_EVENT_NAMES:
            raise TraceParseError(line_no, f"unknown dom event {name!r}")
    elif name is not None:
        raise TraceParseError(line_no, "event_name only valid on dom_event records")
    direction = obj.get("direction")
    if kind != KIND_DOM and direction not in ("outbound", "inbound"):
        raise TraceParseError(line_no, f"bad direction {direction!r}")
    params = obj.get("params", {})
    if not isinstance(params, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in params.items()
    ):
        raise TraceParseError(line_no, "params must be a flat string map")
    return TraceEvent(
        ts_ms=quantize_ms(ts),
        kind=kind,
        event_name=name,
        url=obj.get("url"),
        direction=direction,
        params=params,
        auction_id=obj.get("auction_id"),
        slot_id=obj.get("slot_id"),
    )


def parse_trace_text(text: str, site_id: str, round_index: int) -> Trace:
    events = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceParseError(line_no, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise TraceParseError(line_no, "record must be a JSON object")
        events.append(parse_event(obj, line_no))
    return Trace(site_id, round_index, tuple(events))


_TRACE_NAME_RE = re.compile(r"^(?P<site>.+)__r(?P<round>\d+)\.trace\.jsonl$")


def parse_trace_file(path) -> Trace:
    """Load one trace; site and round are recovered from the file name."""
    import os

    name = os.path.basename(str(path))
    m = _TRACE_NAME_RE.match(name)
    site_id = m.group("site") if m else name
    round_index = int(m.group("round")) if m else 0
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace_text(fh.read(), site_id, round_index)


def truth_record(
    outcome: AuctionOutcome | WaterfallOutcome | None, scenario: WebsiteScenario, round_index: int = 0
) -> dict:
    """Sidecar row used only for scoring; the detector never reads it."""
    if outcome is None:
        return {
            "site_id": scenario.site_id,
            "round_index": round_index,
            "facet": scenario.facet.value,
            "winner": {},
            "late_bid_count": 0,
            "total_latency_ms": "0.000",
        }
    if isinstance(outcome, WaterfallOutcome):
        winner = {
            outcome.slot_id: (
                {"partner": outcome.winner[0], "cpm": decimal_str(outcome.winner[1])}
                if outcome.winner
                else None
            )
        }
        return {
            "site_id": outcome.site_id,
            "round_index": outcome.round_index,
            "facet": Facet.WATERFALL_ONLY.value,
            "winner": winner,
            "late_bid_count": 0,
            "total_latency_ms": _ts(outcome.total_latency_ms),
        }
    winner = {
        slot.slot_id: (
            {"partner": slot.winner[0], "cpm": decimal_str(slot.winner[1])} if slot.winner else None
        )
        for slot in outcome.slots
    }
    return {
        "site_id": outcome.site_id,
        "round_index": outcome.round_index,
        "facet": outcome.facet.value,
        "winner": winner,
        "late_bid_count": outcome.late_bid_count,
        "total_latency_ms": _ts(outcome.total_latency_ms),
    }
