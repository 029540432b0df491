"""Header-bidding detection over browser traces.

Two complementary signals decide HB presence: wrapper DOM events (which only
HB libraries fire) and web records that both match a known demand partner
and carry HB parameters (bidder, hb_partner, hb_price, ...).  Records with
hb_* parameters on unknown hosts still count, attributed to
"unknown:<host>", so unlisted partners are not missed.  Plain waterfall
traffic (no DOM events, no HB parameters) never triggers.

Facet classification:
  server_side   no wrapper DOM events, but responses carry hb_* parameters
  hybrid        wrapper DOM events present, and the ad-server response either
                names a bidder never seen client-side or comes from a known
                demand-partner host (an entity running its own auction)
  client_side   wrapper DOM events present, ad server is first-party and
                names no new bidders

Documented ambiguous corner: a client-side publisher that points its wrapper
at an ad server hosted on a known demand-partner domain is indistinguishable
from hybrid and will be classified as such.

The detector consumes only the trace itself, never the truth sidecar.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, InvalidOperation

from .domain import Facet, PartnerDirectory, decimal_str, lookup_partner, quantize_ms
from .tracegen import KIND_DOM, KIND_REQUEST, KIND_RESPONSE, Trace, TraceEvent

HB_PARAM_KEYWORDS = ("bidder", "hb_partner", "hb_price", "hb_size")
HB_PARAM_PREFIX = "hb_"

# DOM events emitted by the wrapper's bid flow; render notifications alone
# also fire on server-side setups.
WRAPPER_DOM_EVENTS = frozenset(
    {"auctionInit", "requestBids", "bidRequested", "bidResponse", "auctionEnd", "bidWon"}
)


class DetectorContractError(RuntimeError):
    """classify_facet was called on a trace without HB activity."""


@dataclass(frozen=True)
class DetectedBid:
    partner: str
    cpm: Decimal
    slot_id: str | None
    size: str | None
    latency_ms: Decimal | None
    late: bool
    channel: str


@dataclass(frozen=True)
class SlotAuction:
    slot_id: str
    size: str | None
    bids: tuple[DetectedBid, ...]
    winner_partner: str | None
    winner_cpm: Decimal | None


@dataclass(frozen=True)
class DetectionResult:
    site_id: str
    round_index: int
    is_hb: bool
    facet: Facet | None
    partners: tuple[str, ...]
    auctions: tuple[SlotAuction, ...]
    late_bid_count: int
    hb_latency_ms: Decimal | None
    warnings: int


def _has_hb_params(event: TraceEvent, keywords) -> bool:
    for key in event.params:
        if key in keywords or key.startswith(HB_PARAM_PREFIX):
            return True
    return False


def detect_hb(trace: Trace, directory: PartnerDirectory, keywords=HB_PARAM_KEYWORDS) -> bool:
    """True iff the trace shows header-bidding activity."""
    for event in trace.events:
        if event.kind == KIND_DOM:
            return True
        if _has_hb_params(event, keywords):
            host = event.host
            if host is None:
                continue
            # Known partner or not, HB-parameter traffic is HB activity;
            # attribution differs, detection does not.
            return True
    return False


def _wrapper_doms(trace: Trace) -> list[TraceEvent]:
    return [
        e for e in trace.events if e.kind == KIND_DOM and e.event_name in WRAPPER_DOM_EVENTS
    ]


def _client_bidders(trace: Trace, directory: PartnerDirectory) -> set[str]:
    bidders: set[str] = set()
    for event in trace.events:
        if event.kind == KIND_DOM and event.event_name in ("bidRequested", "bidResponse"):
            if "bidder" in event.params:
                bidders.add(event.params["bidder"])
        elif event.kind in (KIND_REQUEST, KIND_RESPONSE) and "bidder" in event.params:
            host = event.host
            resolved = lookup_partner(host, directory) if host else None
            bidders.add(resolved if resolved else event.params["bidder"])
    return bidders


def _ad_server_exchange(trace: Trace):
    """The wrapper-to-ad-server call: the outbound request with no bidder
    param; returns (request, [responses from the same host at/after it])."""
    request = None
    for event in trace.events:
        if event.kind == KIND_REQUEST and event.direction == "outbound" and "bidder" not in event.params:
            request = event
            break
    if request is None:
        return None, []
    responses = [
        e
        for e in trace.events
        if e.kind == KIND_RESPONSE
        and e.host == request.host
        and e.ts_ms >= request.ts_ms
        and "bidder" not in e.params
    ]
    return request, responses


def classify_facet(trace: Trace, directory: PartnerDirectory) -> Facet:
    """Assign one of the three HB facets to a trace known to contain HB."""
    if not detect_hb(trace, directory):
        raise DetectorContractError(f"trace {trace.site_id} r{trace.round_index} shows no HB activity")
    if not _wrapper_doms(trace):
        return Facet.SERVER_SIDE
    client_bidders = _client_bidders(trace, directory)
    request, responses = _ad_server_exchange(trace)
    for response in responses:
        named = response.params.get("hb_partner")
        if named and named not in client_bidders:
            return Facet.HYBRID
    if request is not None and request.host and lookup_partner(request.host, directory):
        return Facet.HYBRID
    return Facet.CLIENT_SIDE


def extract_auction_metadata(
    trace: Trace, directory: PartnerDirectory, keywords=HB_PARAM_KEYWORDS
) -> DetectionResult:
    """Pull partners, per-slot bids, winners, late counts, and the HB latency
    (first outbound bid request to ad-server response) out of one trace."""
    is_hb = detect_hb(trace, directory, keywords)
    if not is_hb:
        return DetectionResult(
            site_id=trace.site_id,
            round_index=trace.round_index,
            is_hb=False,
            facet=None,
            partners=(),
            auctions=(),
            late_bid_count=0,
            hb_latency_ms=None,
            warnings=0,
        )
    facet = classify_facet(trace, directory)
    warnings = 0

    auction_end_ts = None
    for event in trace.events:
        if event.kind == KIND_DOM and event.event_name == "auctionEnd":
            auction_end_ts = event.ts_ms
            break

    request_ts: dict[str, Decimal] = {}
    first_outbound: Decimal | None = None
    for event in trace.events:
        if event.kind == KIND_REQUEST and event.direction == "outbound":
            if first_outbound is None or event.ts_ms < first_outbound:
                first_outbound = event.ts_ms
            bidder = event.params.get("bidder")
            if bidder is not None and bidder not in request_ts:
                request_ts[bidder] = event.ts_ms

    partners: set[str] = set()
    slot_bids: dict[str, list[DetectedBid]] = {}
    slot_sizes: dict[str, str] = {}
    slot_winner: dict[str, tuple[str, Decimal]] = {}
    late_count = 0

    def note_slot(slot_id, size):
        if slot_id is not None:
            slot_bids.setdefault(slot_id, [])
            if size and slot_id not in slot_sizes:
                slot_sizes[slot_id] = size

    for event in trace.events:
        if event.kind == KIND_DOM and event.event_name in ("bidRequested", "bidResponse"):
            bidder = event.params.get("bidder")
            if bidder:
                partners.add(bidder)
        elif event.kind in (KIND_REQUEST, KIND_RESPONSE) and "bidder" in event.params:
            host = event.host
            if host:
                resolved = lookup_partner(host, directory)
                partners.add(resolved if resolved else f"unknown:{host}")

    for event in trace.events:
        if event.kind != KIND_DOM or event.event_name != "bidResponse":
            continue
        bidder = event.params.get("bidder", "")
        price = event.params.get("hb_price")
        try:
            cpm = Decimal(price)
        except (InvalidOperation, TypeError):
            warnings += 1
            continue
        size = event.params.get("hb_size")
        note_slot(event.slot_id, size)
        late = auction_end_ts is not None and event.ts_ms > auction_end_ts
        if late:
            late_count += 1
        latency = event.ts_ms - request_ts.get(bidder, Decimal(0))
        bid = DetectedBid(
            partner=bidder or "unknown:",
            cpm=cpm,
            slot_id=event.slot_id,
            size=size,
            latency_ms=quantize_ms(latency),
            late=late,
            channel="client",
        )
        slot_bids.setdefault(event.slot_id or "", []).append(bid)

    for event in trace.events:
        if event.kind == KIND_DOM and event.event_name == "bidWon":
            price = event.params.get("hb_price")
            try:
                cpm = Decimal(price)
            except (InvalidOperation, TypeError):
                warnings += 1
                continue
            note_slot(event.slot_id, event.params.get("hb_size"))
            slot_winner[event.slot_id or ""] = (event.params.get("bidder", ""), cpm)
        elif event.kind == KIND_DOM and event.event_name in ("slotRenderEnded", "adRenderFailed"):
            note_slot(event.slot_id, event.params.get("hb_size"))

    request, responses = _ad_server_exchange(trace)
    hb_latency = None
    client_bidders = _client_bidders(trace, directory)
    if request is not None and responses:
        hb_latency = quantize_ms(responses[0].ts_ms - (first_outbound or Decimal(0)))
        if request.host:
            resolved = lookup_partner(request.host, directory)
            if resolved:
                partners.add(resolved)
            elif facet is Facet.SERVER_SIDE:
                partners.add(f"unknown:{request.host}")
        for response in responses:
            named = response.params.get("hb_partner")
            if not named:
                note_slot(response.slot_id, None)
                continue
            price = response.params.get("hb_price")
            try:
                cpm = Decimal(price)
            except (InvalidOperation, TypeError):
                warnings += 1
                continue
            size = response.params.get("hb_size")
            note_slot(response.slot_id, size)
            if response.slot_id not in slot_winner:
                slot_winner[response.slot_id or ""] = (named, cpm)
            if named not in client_bidders:
                # New information only: a server-side price the client flow
                # never showed.  Client winners echoed back are not re-added.
                slot_bids.setdefault(response.slot_id or "", []).append(
                    DetectedBid(
                        partner=named,
                        cpm=cpm,
                        slot_id=response.slot_id,
                        size=size,
                        latency_ms=None,
                        late=False,
                        channel="ad_server",
                    )
                )

    auctions = []
    for slot_id in sorted(slot_bids):
        winner = slot_winner.get(slot_id)
        auctions.append(
            SlotAuction(
                slot_id=slot_id,
                size=slot_sizes.get(slot_id),
                bids=tuple(slot_bids[slot_id]),
                winner_partner=winner[0] if winner else None,
                winner_cpm=winner[1] if winner else None,
            )
        )
    return DetectionResult(
        site_id=trace.site_id,
        round_index=trace.round_index,
        is_hb=True,
        facet=facet,
        partners=tuple(sorted(partners)),
        auctions=tuple(auctions),
        late_bid_count=late_count,
        hb_latency_ms=hb_latency,
        warnings=warnings,
    )


def result_row(result: DetectionResult) -> dict:
    """JSON-ready row for the results file."""
    return {
        "site_id": result.site_id,
        "round_index": result.round_index,
        "is_hb": result.is_hb,
        "facet": result.facet.value if result.facet else None,
        "partners": list(result.partners),
        "auctions": [
            {
                "slot_id": a.slot_id,
                "size": a.size,
                "bids": [
                    {
                        "partner": b.partner,
                        "cpm": decimal_str(b.cpm),
                        "latency_ms": format(b.latency_ms, "f") if b.latency_ms is not None else None,
                        "late": b.late,
                        "channel": b.channel,
                    }
                    for b in a.bids
                ],
                "winner_partner": a.winner_partner,
                "winner_cpm": decimal_str(a.winner_cpm) if a.winner_cpm is not None else None,
            }
            for a in result.auctions
        ],
        "late_bid_count": result.late_bid_count,
        "hb_latency_ms": format(result.hb_latency_ms, "f") if result.hb_latency_ms is not None else None,
        "warnings": result.warnings,
    }
