"""Protocol state machines: client-side, server-side, and hybrid header
bidding plus the sequential waterfall baseline.

Each run is a pure function of (scenario, resolved partner specs, seed,
round index) and produces a ground-truth outcome.  A bid is late exactly
when it arrives strictly after the wrapper hands the collected bids to the
ad server; a bid arriving at the handoff instant still counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from typing import Mapping

from .domain import (
    ConfigurationError,
    DemandPartnerSpec,
    Facet,
    WebsiteScenario,
    WrapperPolicy,
    quantize_ms,
)
from .netsim import (
    RngStream,
    initial_schedule,
    run_sim,
    sample_bid,
    sample_latency,
    sample_partner_bids,
)

CHANNEL_CLIENT = "client"
CHANNEL_AD_SERVER = "ad_server"


@dataclass(frozen=True)
class Bid:
    partner_id: str
    slot_id: str
    cpm: Decimal
    requested_at_ms: Decimal
    arrived_at_ms: Decimal
    late: bool
    channel: str


@dataclass(frozen=True)
class SlotOutcome:
    slot_id: str
    size: str
    floor_price: Decimal
    bids: tuple[Bid, ...]
    winner: tuple[str, Decimal] | None
    filled: bool
    fallback_used: bool
    render_failed: bool = False


@dataclass(frozen=True)
class AuctionOutcome:
    site_id: str
    round_index: int
    facet: Facet
    slots: tuple[SlotOutcome, ...]
    wrapper_send_time_ms: Decimal
    ad_server_response_time_ms: Decimal
    total_latency_ms: Decimal
    winner_notified: bool

    @property
    def late_bid_count(self) -> int:
        return sum(1 for slot in self.slots for bid in slot.bids if bid.late)


@dataclass(frozen=True)
class TierTrial:
    partner_id: str
    bid: Decimal | None
    latency_ms: Decimal


@dataclass(frozen=True)
class WaterfallOutcome:
    site_id: str
    round_index: int
    slot_id: str
    tiers_tried: tuple[TierTrial, ...]
    winner: tuple[str, Decimal] | None
    total_latency_ms: Decimal
    fallback_used: bool

    facet: Facet = Facet.WATERFALL_ONLY


def select_winner(bids, floor: Decimal) -> tuple[str, Decimal] | None:
    """Highest on-time bid meeting the floor for one slot.

    Ties go to the earliest arrival, then the lexicographically smallest
    partner id, so replays are stable.
    """
    qualifying = [b for b in bids if not b.late and b.cpm >= floor]
    if not qualifying:
        return None
    best = min(qualifying, key=lambda b: (-b.cpm, b.arrived_at_ms, b.partner_id))
    return best.partner_id, best.cpm


def compute_send_time(policy: WrapperPolicy, timeout_ms: int, bid_arrivals) -> Decimal:
    """When the wrapper forwards collected bids to the ad server.

    Arrivals are absolute times from round start.  Both waiting policies cap
    at the timeout; an empty arrival list means there is nothing to wait for.
    A misconfigured `immediate` wrapper fires at once, turning every
    response into a late bid.
    """
    if policy is WrapperPolicy.IMMEDIATE:
        return Decimal(0)
    arrivals = [quantize_ms(a) for a in bid_arrivals]
    if not arrivals:
        return Decimal(0)
    timeout = quantize_ms(timeout_ms)
    latest = max(arrivals)
    return latest if latest < timeout else timeout


def _resolve(partners: Mapping[str, DemandPartnerSpec], pid: str, site_id: str) -> DemandPartnerSpec:
    spec = partners.get(pid)
    if spec is None:
        raise ConfigurationError(f"site {site_id!r}: partner {pid!r} is not defined")
    return spec


def _require_facet(scenario: WebsiteScenario, facet: Facet) -> None:
    if scenario.facet is not facet:
        raise ConfigurationError(
            f"site {scenario.site_id!r}: expected facet {facet.value}, got {scenario.facet.value}"
        )


def _client_responses(scenario, partners, master_seed, round_index):
    """Sample (arrival, per-slot cpms) for each responding roster partner."""
    responses: dict[str, tuple[Decimal, list[Decimal]]] = {}
    n_slots = len(scenario.slots)
    for pid in scenario.partners:
        spec = _resolve(partners, pid, scenario.site_id)
        bid_stream = RngStream(master_seed, scenario.site_id, round_index, f"bid:{pid}")
        cpms = sample_partner_bids(spec.bid_model, bid_stream, spec.response_probability, n_slots)
        if cpms is None:
            continue
        lat_stream = RngStream(master_seed, scenario.site_id, round_index, f"latency:{pid}")
        responses[pid] = (sample_latency(spec.latency_model, lat_stream), cpms)
    return responses


def _effective_send_time(scenario, responses) -> Decimal:
    # A partner that never answers keeps a waiting wrapper on the hook until
    # the timeout; the immediate policy does not wait for anyone.
    if scenario.wrapper_policy is WrapperPolicy.IMMEDIATE:
        return Decimal(0)
    if len(responses) < len(scenario.partners):
        return quantize_ms(scenario.timeout_ms)
    return compute_send_time(
        scenario.wrapper_policy, scenario.timeout_ms, [arr for arr, _ in responses.values()]
    )


def _render_failures(scenario, filled_slot_ids, master_seed, round_index) -> set[str]:
    if scenario.render_fail_probability <= 0:
        return set()
    failed = set()
    for slot_id in filled_slot_ids:
        stream = RngStream(master_seed, scenario.site_id, round_index, f"render:{slot_id}")
        if stream.uniform() < float(scenario.render_fail_probability):
            failed.add(slot_id)
    return failed


def _slot_outcomes(scenario, bids_by_slot, render_failed) -> tuple[SlotOutcome, ...]:
    out = []
    for slot in scenario.slots:
        bids = tuple(bids_by_slot.get(slot.slot_id, ()))
        winner = select_winner(bids, slot.floor_price)
        filled = winner is not None
        out.append(
            SlotOutcome(
                slot_id=slot.slot_id,
                size=slot.size,
                floor_price=slot.floor_price,
                bids=bids,
                winner=winner,
                filled=filled,
                fallback_used=not filled,
                render_failed=slot.slot_id in render_failed,
            )
        )
    return tuple(out)


def _run_round_engine(responses, send_time, adserver_latency, any_filled):
    """Drive the round through the event engine; returns the response time."""
    state = {"response_at": None}

    def handler(payload, now):
        tag = payload[0]
        if tag == "round_start":
            spawned = [(arrival, ("arrival", pid)) for pid, (arrival, _) in responses.items()]
            spawned.append((send_time, ("wrapper_send",)))
            return spawned
        if tag == "wrapper_send":
            return [(now + adserver_latency, ("adserver_response",))]
        if tag == "adserver_response":
            state["response_at"] = now
            return [(now, ("winner_notify",))] if any_filled else []
        return []

    run_sim(initial_schedule([(Decimal(0), ("round_start",))]), handler)
    return state["response_at"]


def run_client_side(
    scenario: WebsiteScenario,
    partners: Mapping[str, DemandPartnerSpec],
    master_seed: int,
    round_index: int = 0,
) -> AuctionOutcome:
    """Browser-hosted auction: parallel bid requests at t=0, wrapper handoff,
    then the publisher's ad server picks per-slot winners from on-time bids."""
    _require_facet(scenario, Facet.CLIENT_SIDE)
    return _run_wrapper_round(scenario, partners, master_seed, round_index, server_entity=None)


def run_hybrid(
    scenario: WebsiteScenario,
    partners: Mapping[str, DemandPartnerSpec],
    master_seed: int,
    round_index: int = 0,
) -> AuctionOutcome:
    """Client phase as in client-side; the ad-server entity then merges its
    own bid (its internal auction's result) with the on-time client bids."""
    _require_facet(scenario, Facet.HYBRID)
    if not scenario.ad_server_partner_id:
        raise ConfigurationError(f"site {scenario.site_id!r}: hybrid requires ad_server_partner_id")
    entity = _resolve(partners, scenario.ad_server_partner_id, scenario.site_id)
    return _run_wrapper_round(scenario, partners, master_seed, round_index, server_entity=entity)


def _run_wrapper_round(scenario, partners, master_seed, round_index, server_entity):
    responses = _client_responses(scenario, partners, master_seed, round_index)
    send_time = _effective_send_time(scenario, responses)
    adserver_latency = sample_latency(
        scenario.ad_server_latency,
        RngStream(master_seed, scenario.site_id, round_index, "adserver_latency"),
    )

    bids_by_slot: dict[str, list[Bid]] = {slot.slot_id: [] for slot in scenario.slots}
    for pid, (arrival, cpms) in responses.items():
        for slot, cpm in zip(scenario.slots, cpms):
            bids_by_slot[slot.slot_id].append(
                Bid(
                    partner_id=pid,
                    slot_id=slot.slot_id,
                    cpm=cpm,
                    requested_at_ms=Decimal(0),
                    arrived_at_ms=arrival,
                    late=arrival > send_time,
                    channel=CHANNEL_CLIENT,
                )
            )
    if server_entity is not None:
        stream = RngStream(
            master_seed, scenario.site_id, round_index, f"server_bid:{server_entity.partner_id}"
        )
        cpms = sample_partner_bids(
            server_entity.bid_model, stream, server_entity.response_probability, len(scenario.slots)
        )
        if cpms is not None:
            for slot, cpm in zip(scenario.slots, cpms):
                # Server-side bids materialize at the ad server; they are
                # pinned to the handoff instant and can never be late.
                bids_by_slot[slot.slot_id].append(
                    Bid(
                        partner_id=server_entity.partner_id,
                        slot_id=slot.slot_id,
                        cpm=cpm,
                        requested_at_ms=send_time,
                        arrived_at_ms=send_time,
                        late=False,
                        channel=CHANNEL_AD_SERVER,
                    )
                )

    provisional = _slot_outcomes(scenario, bids_by_slot, render_failed=set())
    filled_ids = [s.slot_id for s in provisional if s.filled]
    render_failed = _render_failures(scenario, filled_ids, master_seed, round_index)
    slots = _slot_outcomes(scenario, bids_by_slot, render_failed)

    response_at = _run_round_engine(responses, send_time, adserver_latency, bool(filled_ids))
    rendered_any = any(s.filled and not s.render_failed for s in slots)
    return AuctionOutcome(
        site_id=scenario.site_id,
        round_index=round_index,
        facet=scenario.facet,
        slots=slots,
        wrapper_send_time_ms=send_time,
        ad_server_response_time_ms=response_at,
        total_latency_ms=response_at,
        winner_notified=rendered_any,
    )


def run_server_side(
    scenario: WebsiteScenario,
    partners: Mapping[str, DemandPartnerSpec],
    master_seed: int,
    round_index: int = 0,
) -> AuctionOutcome:
    """Single round trip to the ad-server entity, which auctions the
    scenario's partner roster internally and returns only winner metadata."""
    _require_facet(scenario, Facet.SERVER_SIDE)
    if not scenario.ad_server_partner_id:
        raise ConfigurationError(
            f"site {scenario.site_id!r}: server_side requires ad_server_partner_id"
        )
    _resolve(partners, scenario.ad_server_partner_id, scenario.site_id)

    adserver_latency = sample_latency(
        scenario.ad_server_latency,
        RngStream(master_seed, scenario.site_id, round_index, "adserver_latency"),
    )
    bids_by_slot: dict[str, list[Bid]] = {slot.slot_id: [] for slot in scenario.slots}
    for pid in scenario.partners:
        spec = _resolve(partners, pid, scenario.site_id)
        stream = RngStream(master_seed, scenario.site_id, round_index, f"server_bid:{pid}")
        cpms = sample_partner_bids(spec.bid_model, stream, spec.response_probability, len(scenario.slots))
        if cpms is None:
            continue
        for slot, cpm in zip(scenario.slots, cpms):
            bids_by_slot[slot.slot_id].append(
                Bid(
                    partner_id=pid,
                    slot_id=slot.slot_id,
                    cpm=cpm,
                    requested_at_ms=Decimal(0),
                    arrived_at_ms=Decimal(0),
                    late=False,
                    channel=CHANNEL_AD_SERVER,
                )
            )

    provisional = _slot_outcomes(scenario, bids_by_slot, render_failed=set())
    filled_ids = [s.slot_id for s in provisional if s.filled]
    render_failed = _render_failures(scenario, filled_ids, master_seed, round_index)
    slots = _slot_outcomes(scenario, bids_by_slot, render_failed)

    response_at = _run_round_engine({}, Decimal(0), adserver_latency, bool(filled_ids))
    rendered_any = any(s.filled and not s.render_failed for s in slots)
    return AuctionOutcome(
        site_id=scenario.site_id,
        round_index=round_index,
        facet=Facet.SERVER_SIDE,
        slots=slots,
        wrapper_send_time_ms=Decimal(0),
        ad_server_response_time_ms=response_at,
        total_latency_ms=response_at,
        winner_notified=rendered_any,
    )


def run_waterfall(
    scenario: WebsiteScenario,
    partners: Mapping[str, DemandPartnerSpec],
    master_seed: int,
    round_index: int = 0,
) -> WaterfallOutcome:
    """Sequential tier trial for the site's primary slot: each tier costs its
    full response time, and the first floor-meeting bid stops the cascade."""
    _require_facet(scenario, Facet.WATERFALL_ONLY)
    if not scenario.partners:
        raise ConfigurationError(f"site {scenario.site_id!r}: waterfall needs at least one tier")
    if not scenario.slots:
        raise ConfigurationError(f"site {scenario.site_id!r}: waterfall needs an ad slot")
    slot = scenario.slots[0]
    tier_specs = [_resolve(partners, pid, scenario.site_id) for pid in scenario.partners]

    state = {"tried": [], "winner": None, "total": Decimal(0)}

    def handler(payload, now):
        tag = payload[0]
        if tag == "tier":
            i = payload[1]
            spec = tier_specs[i]
            lat = sample_latency(
                spec.latency_model,
                RngStream(master_seed, scenario.site_id, round_index, f"latency:{spec.partner_id}"),
            )
            cpm = sample_bid(
                spec.bid_model,
                RngStream(master_seed, scenario.site_id, round_index, f"bid:{spec.partner_id}"),
                spec.response_probability,
            )
            return [(now + lat, ("tier_done", i, cpm, lat))]
        if tag == "tier_done":
            _, i, cpm, lat = payload
            state["tried"].append(TierTrial(tier_specs[i].partner_id, cpm, lat))
            state["total"] = now
            if cpm is not None and cpm >= slot.floor_price:
                state["winner"] = (tier_specs[i].partner_id, cpm)
                return []
            if i + 1 < len(tier_specs):
                return [(now, ("tier", i + 1))]
            return []
        return []

    run_sim(initial_schedule([(Decimal(0), ("tier", 0))]), handler)
    return WaterfallOutcome(
        site_id=scenario.site_id,
        round_index=round_index,
        slot_id=slot.slot_id,
        tiers_tried=tuple(state["tried"]),
        winner=state["winner"],
        total_latency_ms=state["total"],
        fallback_used=state["winner"] is None,
    )


def run_scenario(
    scenario: WebsiteScenario,
    partners: Mapping[str, DemandPartnerSpec],
    master_seed: int,
    round_index: int = 0,
) -> AuctionOutcome | WaterfallOutcome | None:
    """Dispatch on facet; no_ads sites produce no auction at all."""
    if scenario.facet is Facet.CLIENT_SIDE:
        return run_client_side(scenario, partners, master_seed, round_index)
    if scenario.facet is Facet.SERVER_SIDE:
        return run_server_side(scenario, partners, master_seed, round_index)
    if scenario.facet is Facet.HYBRID:
        return run_hybrid(scenario, partners, master_seed, round_index)
    if scenario.facet is Facet.WATERFALL_ONLY:
        return run_waterfall(scenario, partners, master_seed, round_index)
    return None
