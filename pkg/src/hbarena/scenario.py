"""Scenario file loading and the config-driven corpus generator.

A scenario file is JSON with a partner roster plus either an explicit site
list, a generator block, or both.  The generator assigns facets by exact
largest-remainder quotas (a 48/34.7/17.3 weight split of 5000 sites yields
exactly 2400/1735/865) and then shuffles the assignment order with a seeded
stream, so a corpus is a pure function of (file, master seed).

Generator block fields, all optional unless noted:
  num_sites (required), site_prefix, rank_start, facet_weights,
  partner_pool, roster_order ("shuffle" or "pool"), partner_count_weights,
  slot_count_weights, slot_sizes, floor_price, wrapper_policy_weights,
  timeout_ms, ad_server_partner, ad_server_latency, waterfall_tiers,
  server_backend_count, render_fail_probability
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation

from .domain import (
    AdSlotSpec,
    BidModel,
    ConfigurationError,
    DemandPartnerSpec,
    Facet,
    LatencyModel,
    PartnerDirectory,
    ValidationReport,
    WebsiteScenario,
    WrapperPolicy,
    validate_scenario,
)
from .netsim import RngStream

_GENERATOR_DEFAULTS = {
    "site_prefix": "site",
    "rank_start": 1,
    "facet_weights": {"server_side": Decimal(48), "hybrid": Decimal("34.7"), "client_side": Decimal("17.3")},
    "roster_order": "shuffle",
    "partner_count_weights": {"1": Decimal(52), "2": Decimal(18), "3": Decimal(12), "5": Decimal(10), "10": Decimal(8)},
    "slot_count_weights": {"1": Decimal(25), "2": Decimal(25), "3": Decimal(20), "4": Decimal(15), "5": Decimal(10), "6": Decimal(5)},
    "slot_sizes": {"300x250": Decimal(45), "728x90": Decimal(25), "300x600": Decimal(15), "160x600": Decimal(10), "320x50": Decimal(5)},
    "floor_price": Decimal("0.01"),
    "wrapper_policy_weights": {"wait_timeout": Decimal(1)},
    "timeout_ms": 3000,
    "waterfall_tiers": 2,
    "server_backend_count": 3,
    "render_fail_probability": Decimal(0),
}


@dataclass(frozen=True)
class ScenarioFile:
    master_seed: int | None
    rounds_per_site: int
    output_dir: str | None
    partners: dict[str, DemandPartnerSpec]
    sites: tuple[WebsiteScenario, ...]
    generator: dict | None

    def directory(self) -> PartnerDirectory:
        entries = {}
        for spec in self.partners.values():
            for domain in spec.domains:
                entries[domain] = spec.partner_id
        return PartnerDirectory.from_mapping(entries)


def _parse_partner(obj: dict) -> DemandPartnerSpec:
    try:
        return DemandPartnerSpec(
            partner_id=obj["partner_id"],
            domains=tuple(obj["domains"]),
            latency_model=LatencyModel.from_json(obj["latency_model"], f"partner {obj.get('partner_id')!r} latency_model"),
            bid_model=BidModel.from_json(obj["bid_model"], f"partner {obj.get('partner_id')!r} bid_model"),
            response_probability=Decimal(str(obj.get("response_probability", 1))),
        )
    except KeyError as exc:
        raise ConfigurationError(f"partner entry missing field {exc}") from exc
    except InvalidOperation as exc:
        raise ConfigurationError(f"partner {obj.get('partner_id')!r}: bad decimal value: {exc}") from exc


def _parse_slot(obj: dict, site_id: str) -> AdSlotSpec:
    try:
        return AdSlotSpec(
            slot_id=obj["slot_id"],
            width=int(obj["width"]),
            height=int(obj["height"]),
            floor_price=Decimal(str(obj["floor_price"])),
        )
    except KeyError as exc:
        raise ConfigurationError(f"site {site_id!r}: slot missing field {exc}") from exc
    except (InvalidOperation, TypeError, ValueError) as exc:
        raise ConfigurationError(f"site {site_id!r}: bad slot value: {exc}") from exc


def _parse_site(obj: dict) -> WebsiteScenario:
    site_id = obj.get("site_id", "<missing>")
    try:
        facet = Facet(obj["facet"])
        policy = WrapperPolicy(obj.get("wrapper_policy", "wait_timeout"))
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"site {site_id!r}: bad facet or wrapper_policy: {exc}") from exc
    try:
        return WebsiteScenario(
            site_id=obj["site_id"],
            rank=int(obj.get("rank", 1)),
            facet=facet,
            slots=tuple(_parse_slot(s, site_id) for s in obj.get("slots", [])),
            partners=tuple(obj.get("partners", [])),
            wrapper_policy=policy,
            ad_server_latency=LatencyModel.from_json(
                obj["ad_server_latency"], f"site {site_id!r} ad_server_latency"
            ),
            timeout_ms=int(obj.get("timeout_ms", 3000)),
            ad_server_partner_id=obj.get("ad_server_partner_id"),
            render_fail_probability=Decimal(str(obj.get("render_fail_probability", 0))),
        )
    except KeyError as exc:
        raise ConfigurationError(f"site {site_id!r}: missing field {exc}") from exc
    except (InvalidOperation, TypeError, ValueError) as exc:
        raise ConfigurationError(f"site {site_id!r}: bad value: {exc}") from exc


def load_scenario_file(path) -> ScenarioFile:
    """Parse and structurally check a scenario file; raises ConfigurationError."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh, parse_float=Decimal)
    except OSError as exc:
        raise ConfigurationError(f"cannot read scenario file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: scenario file must be a JSON object")

    partners: dict[str, DemandPartnerSpec] = {}
    for entry in data.get("partners", []):
        spec = _parse_partner(entry)
        if spec.partner_id in partners:
            raise ConfigurationError(f"duplicate partner {spec.partner_id!r}")
        partners[spec.partner_id] = spec

    sites = tuple(_parse_site(entry) for entry in data.get("sites", []))
    generator = data.get("generator")
    if generator is not None and not isinstance(generator, dict):
        raise ConfigurationError("generator block must be a JSON object")
    if not sites and generator is None:
        raise ConfigurationError("scenario file needs a sites list or a generator block")

    master_seed = data.get("master_seed")
    if master_seed is not None:
        master_seed = int(master_seed)
    rounds = int(data.get("rounds_per_site", 1))
    return ScenarioFile(
        master_seed=master_seed,
        rounds_per_site=rounds,
        output_dir=data.get("output_dir"),
        partners=partners,
        sites=sites,
        generator=generator,
    )


def _weights(obj, where: str) -> list[tuple[str, Decimal]]:
    if not isinstance(obj, dict) or not obj:
        raise ConfigurationError(f"{where}: expected a non-empty weight map")
    out = []
    for key in sorted(obj):
        weight = Decimal(str(obj[key]))
        if weight < 0:
            raise ConfigurationError(f"{where}: negative weight for {key!r}")
        if weight > 0:
            out.append((key, weight))
    if not out:
        raise ConfigurationError(f"{where}: all weights are zero")
    return out


def _quota_counts(weights: list[tuple[str, Decimal]], n: int) -> dict[str, int]:
    """Largest-remainder allocation of n items over weighted keys."""
    total = sum(w for _, w in weights)
    shares = [(key, Decimal(n) * w / total) for key, w in weights]
    counts = {key: int(share) for key, share in shares}
    remainder = n - sum(counts.values())
    by_fraction = sorted(shares, key=lambda kv: (kv[1] - int(kv[1]), kv[0]), reverse=True)
    for key, _ in by_fraction[:remainder]:
        counts[key] += 1
    return counts


def _weighted_choice(stream: RngStream, weights: list[tuple[str, Decimal]]) -> str:
    total = float(sum(w for _, w in weights))
    threshold = stream.uniform() * total
    acc = 0.0
    for key, weight in weights:
        acc += float(weight)
        if threshold < acc:
            return key
    return weights[-1][0]


def _shuffle(stream: RngStream, items: list) -> list:
    out = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = stream.choice_index(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def expand_sites(sf: ScenarioFile, master_seed: int) -> tuple[WebsiteScenario, ...]:
    """Explicit sites plus generator-produced sites for the given seed."""
    sites = list(sf.sites)
    if sf.generator is not None:
        sites.extend(_generate_sites(sf, sf.generator, master_seed))
    return tuple(sites)


def _generate_sites(sf: ScenarioFile, gen: dict, master_seed: int) -> list[WebsiteScenario]:
    cfg = dict(_GENERATOR_DEFAULTS)
    cfg.update(gen)
    try:
        num_sites = int(cfg["num_sites"])
    except KeyError as exc:
        raise ConfigurationError("generator block needs num_sites") from exc
    if num_sites <= 0:
        raise ConfigurationError("generator num_sites must be positive")

    facet_weights = _weights(cfg["facet_weights"], "generator facet_weights")
    for facet, _ in facet_weights:
        if facet not in Facet._value2member_map_:
            raise ConfigurationError(f"generator facet_weights: unknown facet {facet!r}")
    policy_weights = _weights(cfg["wrapper_policy_weights"], "generator wrapper_policy_weights")
    for policy, _ in policy_weights:
        if policy not in WrapperPolicy._value2member_map_:
            raise ConfigurationError(f"generator wrapper_policy_weights: unknown policy {policy!r}")
    slot_count_weights = _weights(cfg["slot_count_weights"], "generator slot_count_weights")
    size_weights = _weights(cfg["slot_sizes"], "generator slot_sizes")
    partner_count_weights = _weights(cfg["partner_count_weights"], "generator partner_count_weights")

    ad_server = cfg.get("ad_server_partner")
    needs_entity = any(f in ("server_side", "hybrid") for f, _ in facet_weights)
    if needs_entity and not ad_server:
        raise ConfigurationError("generator needs ad_server_partner for server_side/hybrid sites")
    if ad_server and ad_server not in sf.partners:
        raise ConfigurationError(f"generator ad_server_partner {ad_server!r} is not a defined partner")

    pool = list(cfg.get("partner_pool") or [pid for pid in sf.partners if pid != ad_server])
    for pid in pool:
        if pid not in sf.partners:
            raise ConfigurationError(f"generator partner_pool references undefined partner {pid!r}")
    if not pool and any(f != "no_ads" for f, _ in facet_weights):
        raise ConfigurationError("generator partner pool is empty")

    ad_server_latency = cfg.get("ad_server_latency")
    if isinstance(ad_server_latency, dict):
        ad_server_latency = LatencyModel.from_json(ad_server_latency, "generator ad_server_latency")
    elif ad_server_latency is None:
        ad_server_latency = LatencyModel.fixed(Decimal(50))

    floor = Decimal(str(cfg["floor_price"]))
    timeout_ms = int(cfg["timeout_ms"])
    waterfall_tiers = int(cfg["waterfall_tiers"])
    backend_count = int(cfg["server_backend_count"])
    roster_order = cfg["roster_order"]
    if roster_order not in ("shuffle", "pool"):
        raise ConfigurationError("generator roster_order must be 'shuffle' or 'pool'")
    render_fail = Decimal(str(cfg["render_fail_probability"]))
    prefix = cfg["site_prefix"]
    rank_start = int(cfg["rank_start"])

    counts = _quota_counts(facet_weights, num_sites)
    facet_list: list[str] = []
    for facet, _ in facet_weights:
        facet_list.extend([facet] * counts[facet])
    facet_list = _shuffle(RngStream(master_seed, "__generator__", 0, "facet_shuffle"), facet_list)

    sites = []
    for idx, facet_name in enumerate(facet_list):
        facet = Facet(facet_name)
        site_id = f"{prefix}{idx:05d}"
        rank = rank_start + idx

        def stream(purpose):
            return RngStream(master_seed, site_id, 0, f"gen:{purpose}")

        if facet is Facet.NO_ADS:
            sites.append(
                WebsiteScenario(
                    site_id=site_id, rank=rank, facet=facet, slots=(), partners=(),
                    wrapper_policy=WrapperPolicy.WAIT_TIMEOUT,
                    ad_server_latency=ad_server_latency, timeout_ms=timeout_ms,
                )
            )
            continue

        n_slots = int(_weighted_choice(stream("slot_count"), slot_count_weights))
        slots = []
        size_stream = stream("slot_sizes")
        for s in range(n_slots):
            width, height = _weighted_choice(size_stream, size_weights).split("x")
            slots.append(
                AdSlotSpec(slot_id=f"slot{s}", width=int(width), height=int(height), floor_price=floor)
            )

        if roster_order == "shuffle":
            ordered_pool = _shuffle(stream("roster"), pool)
        else:
            ordered_pool = list(pool)

        if facet is Facet.WATERFALL_ONLY:
            roster = tuple(ordered_pool[: max(1, min(waterfall_tiers, len(ordered_pool)))])
            entity = None
            policy = WrapperPolicy.WAIT_TIMEOUT
        elif facet is Facet.SERVER_SIDE:
            roster = tuple(ordered_pool[: max(1, min(backend_count, len(ordered_pool)))])
            entity = ad_server
            policy = WrapperPolicy.WAIT_TIMEOUT
        else:
            k = int(_weighted_choice(stream("partner_count"), partner_count_weights))
            roster = tuple(ordered_pool[: max(1, min(k, len(ordered_pool)))])
            entity = ad_server if facet is Facet.HYBRID else None
            policy = WrapperPolicy(_weighted_choice(stream("wrapper_policy"), policy_weights))

        sites.append(
            WebsiteScenario(
                site_id=site_id,
                rank=rank,
                facet=facet,
                slots=tuple(slots),
                partners=roster,
                wrapper_policy=policy,
                ad_server_latency=ad_server_latency,
                timeout_ms=timeout_ms,
                ad_server_partner_id=entity,
                render_fail_probability=render_fail,
            )
        )
    return sites


def validate_scenario_file(
    sf: ScenarioFile, sites: tuple[WebsiteScenario, ...]
) -> ValidationReport:
    """Whole-file validation: partner specs, cross-references, per-site checks."""
    violations: list[str] = []
    warnings: list[str] = []
    if sf.rounds_per_site < 1:
        violations.append("rounds_per_site must be >= 1")
    for spec in sf.partners.values():
        violations.extend(spec.violations())
    seen = set()
    for site in sites:
        if site.site_id in seen:
            violations.append(f"duplicate site_id {site.site_id!r}")
        seen.add(site.site_id)
        report = validate_scenario(site)
        violations.extend(report.violations)
        warnings.extend(report.warnings)
        for pid in site.partners:
            if pid not in sf.partners:
                violations.append(f"site {site.site_id!r}: unknown partner {pid!r}")
        if site.ad_server_partner_id and site.ad_server_partner_id not in sf.partners:
            violations.append(
                f"site {site.site_id!r}: unknown ad_server_partner_id {site.ad_server_partner_id!r}"
            )
        if site.facet is Facet.HYBRID and site.ad_server_partner_id in site.partners:
            violations.append(
                f"site {site.site_id!r}: hybrid ad server entity must not also be a client bidder"
            )
    return ValidationReport(tuple(violations), tuple(warnings))
