"""Core vocabulary shared by the simulator, trace generator, and detector.

All prices are decimal CPM in USD and all times are decimal milliseconds.
Values are quantized at fixed boundaries (milliseconds to 3 fractional
digits, CPM to 6, both round-half-even) so every derived artifact is
byte-stable for a given seed.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation, ROUND_HALF_EVEN
from enum import Enum
from importlib import resources

MS_QUANTUM = Decimal("0.001")
CPM_QUANTUM = Decimal("0.000001")

_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.:-]*$")

# Requesting bids for more slots than a page can plausibly display is a
# red flag worth surfacing, not an error.
SLOT_COUNT_WARNING_THRESHOLD = 20


class ConfigurationError(ValueError):
    """A scenario or model is not usable as configured."""


def quantize_ms(value) -> Decimal:
    """Canonical milliseconds: 3 fractional digits, round-half-even."""
    if not isinstance(value, Decimal):
        value = Decimal(repr(value)) if isinstance(value, float) else Decimal(value)
    return value.quantize(MS_QUANTUM, rounding=ROUND_HALF_EVEN)


def quantize_cpm(value) -> Decimal:
    """Canonical CPM: 6 fractional digits, round-half-even."""
    if not isinstance(value, Decimal):
        value = Decimal(repr(value)) if isinstance(value, float) else Decimal(value)
    return value.quantize(CPM_QUANTUM, rounding=ROUND_HALF_EVEN)


def decimal_str(value: Decimal) -> str:
    """Fixed-point rendering with trailing zeros stripped ("0.5", "350.125")."""
    text = format(value, "f")
    if "." in text:
        text = text.rstrip("0").rstrip(".")
    return text or "0"


class Facet(str, Enum):
    CLIENT_SIDE = "client_side"
    SERVER_SIDE = "server_side"
    HYBRID = "hybrid"
    WATERFALL_ONLY = "waterfall_only"
    NO_ADS = "no_ads"


HB_FACETS = (Facet.CLIENT_SIDE, Facet.SERVER_SIDE, Facet.HYBRID)


class WrapperPolicy(str, Enum):
    WAIT_ALL = "wait_all"
    WAIT_TIMEOUT = "wait_timeout"
    IMMEDIATE = "immediate"


@dataclass(frozen=True)
class LatencyModel:
    """Sampling model for one endpoint's response time in milliseconds.

    kind is one of fixed / lognormal / empirical; lognormal parameters are
    the (mu, sigma) of the underlying normal in log-milliseconds.
    """

    kind: str
    value_ms: Decimal | None = None
    mu: float | None = None
    sigma: float | None = None
    samples_ms: tuple[Decimal, ...] = ()

    @classmethod
    def fixed(cls, value_ms) -> "LatencyModel":
        return cls(kind="fixed", value_ms=quantize_ms(value_ms))

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "LatencyModel":
        return cls(kind="lognormal", mu=float(mu), sigma=float(sigma))

    @classmethod
    def empirical(cls, samples) -> "LatencyModel":
        return cls(kind="empirical", samples_ms=tuple(quantize_ms(s) for s in samples))

    def violations(self, where: str) -> list[str]:
        out = []
        if self.kind == "fixed":
            if self.value_ms is None or self.value_ms <= 0:
                out.append(f"{where}: fixed latency must be strictly positive")
        elif self.kind == "lognormal":
            if self.mu is None or self.sigma is None or self.sigma < 0:
                out.append(f"{where}: lognormal latency needs mu and sigma >= 0")
        elif self.kind == "empirical":
            if not self.samples_ms:
                out.append(f"{where}: empirical latency needs at least one sample")
            elif any(s <= 0 for s in self.samples_ms):
                out.append(f"{where}: empirical latency samples must be strictly positive")
        else:
            out.append(f"{where}: unknown latency model kind {self.kind!r}")
        return out

    def to_json(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "value_ms": decimal_str(self.value_ms)}
        if self.kind == "lognormal":
            return {"kind": "lognormal", "mu": self.mu, "sigma": self.sigma}
        return {"kind": "empirical", "samples_ms": [decimal_str(s) for s in self.samples_ms]}

    @classmethod
    def from_json(cls, obj: dict, where: str = "latency_model") -> "LatencyModel":
        kind = obj.get("kind")
        try:
            if kind == "fixed":
                return cls.fixed(Decimal(str(obj["value_ms"])))
            if kind == "lognormal":
                return cls.lognormal(float(obj["mu"]), float(obj["sigma"]))
            if kind == "empirical":
                return cls.empirical(Decimal(str(s)) for s in obj["samples_ms"])
        except (KeyError, InvalidOperation, TypeError, ValueError) as exc:
            raise ConfigurationError(f"{where}: bad parameters for kind {kind!r}: {exc}") from exc
        raise ConfigurationError(f"{where}: unknown kind {kind!r}")


@dataclass(frozen=True)
class BidModel:
    """Sampling model for one partner's bid price in CPM USD."""

    kind: str
    value_cpm: Decimal | None = None
    mu: float | None = None
    sigma: float | None = None
    samples_cpm: tuple[Decimal, ...] = ()

    @classmethod
    def fixed(cls, value_cpm) -> "BidModel":
        return cls(kind="fixed", value_cpm=quantize_cpm(value_cpm))

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "BidModel":
        return cls(kind="lognormal", mu=float(mu), sigma=float(sigma))

    @classmethod
    def empirical(cls, samples) -> "BidModel":
        return cls(kind="empirical", samples_cpm=tuple(quantize_cpm(s) for s in samples))

    def violations(self, where: str) -> list[str]:
        out = []
        if self.kind == "fixed":
            if self.value_cpm is None or self.value_cpm < 0:
                out.append(f"{where}: fixed bid must be non-negative")
        elif self.kind == "lognormal":
            if self.mu is None or self.sigma is None or self.sigma < 0:
                out.append(f"{where}: lognormal bid needs mu and sigma >= 0")
        elif self.kind == "empirical":
            if not self.samples_cpm:
                out.append(f"{where}: empirical bid needs at least one sample")
            elif any(s < 0 for s in self.samples_cpm):
                out.append(f"{where}: empirical bid samples must be non-negative")
        else:
            out.append(f"{where}: unknown bid model kind {self.kind!r}")
        return out

    def to_json(self) -> dict:
        if self.kind == "fixed":
            return {"kind": "fixed", "value_cpm": decimal_str(self.value_cpm)}
        if self.kind == "lognormal":
            return {"kind": "lognormal", "mu": self.mu, "sigma": self.sigma}
        return {"kind": "empirical", "samples_cpm": [decimal_str(s) for s in self.samples_cpm]}

    @classmethod
    def from_json(cls, obj: dict, where: str = "bid_model") -> "BidModel":
        kind = obj.get("kind")
        try:
            if kind == "fixed":
                return cls.fixed(Decimal(str(obj["value_cpm"])))
            if kind == "lognormal":
                return cls.lognormal(float(obj["mu"]), float(obj["sigma"]))
            if kind == "empirical":
                return cls.empirical(Decimal(str(s)) for s in obj["samples_cpm"])
        except (KeyError, InvalidOperation, TypeError, ValueError) as exc:
            raise ConfigurationError(f"{where}: bad parameters for kind {kind!r}: {exc}") from exc
        raise ConfigurationError(f"{where}: unknown kind {kind!r}")


@dataclass(frozen=True)
class AdSlotSpec:
    slot_id: str
    width: int
    height: int
    floor_price: Decimal

    @property
    def size(self) -> str:
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class DemandPartnerSpec:
    """A bidder: where its traffic comes from and how it bids.

    response_probability is the chance the partner answers a bid request at
    all; partners that know nothing about a user often decline outright.
    """

    partner_id: str
    domains: tuple[str, ...]
    latency_model: LatencyModel
    bid_model: BidModel
    response_probability: Decimal = Decimal(1)

    def violations(self) -> list[str]:
        where = f"partner {self.partner_id!r}"
        out = []
        if not _ID_RE.match(self.partner_id or ""):
            out.append(f"{where}: partner_id must match {_ID_RE.pattern}")
        if not self.domains:
            out.append(f"{where}: domains must be non-empty")
        if not (0 <= self.response_probability <= 1):
            out.append(f"{where}: response_probability must be in [0, 1]")
        out.extend(self.latency_model.violations(f"{where} latency_model"))
        out.extend(self.bid_model.violations(f"{where} bid_model"))
        return out


@dataclass(frozen=True)
class WebsiteScenario:
    """One publisher's configuration for a simulated round.

    For waterfall_only sites the partner order is the tier priority.  The
    ad_server_partner_id names the entity acting as ad server for the
    server_side and hybrid facets; client_side publishers run their own ad
    server, reached at a synthetic first-party host.
    """

    site_id: str
    rank: int
    facet: Facet
    slots: tuple[AdSlotSpec, ...]
    partners: tuple[str, ...]
    wrapper_policy: WrapperPolicy
    ad_server_latency: LatencyModel
    timeout_ms: int = 3000
    ad_server_partner_id: str | None = None
    render_fail_probability: Decimal = Decimal(0)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_scenario(scenario: WebsiteScenario) -> ValidationReport:
    """Check every scenario invariant; reports, never raises.

    Oversized slot rosters (> 20) are flagged as a warning only: real sites
    do auction that many, it just merits a second look.
    """
    v: list[str] = []
    w: list[str] = []
    sid = scenario.site_id
    if not _ID_RE.match(sid or ""):
        v.append(f"site {sid!r}: site_id must match {_ID_RE.pattern}")
    if scenario.rank < 1:
        v.append(f"site {sid!r}: rank must be >= 1")
    if scenario.timeout_ms <= 0:
        v.append(f"site {sid!r}: timeout_ms must be positive")
    if not (0 <= scenario.render_fail_probability <= 1):
        v.append(f"site {sid!r}: render_fail_probability must be in [0, 1]")

    if not scenario.slots and scenario.facet is not Facet.NO_ADS:
        v.append(f"site {sid!r}: slots empty")
    seen_slots = set()
    for slot in scenario.slots:
        where = f"site {sid!r} slot {slot.slot_id!r}"
        if not _ID_RE.match(slot.slot_id or ""):
            v.append(f"{where}: slot_id must match {_ID_RE.pattern}")
        if slot.slot_id in seen_slots:
            v.append(f"{where}: duplicate slot_id")
        seen_slots.add(slot.slot_id)
        if slot.width <= 0 or slot.height <= 0:
            v.append(f"{where}: width and height must be positive")
        if slot.floor_price < 0:
            v.append(f"{where}: floor_price must be non-negative")
    if len(scenario.slots) > SLOT_COUNT_WARNING_THRESHOLD:
        w.append(
            f"site {sid!r}: {len(scenario.slots)} ad slots auctioned; "
            f"more than {SLOT_COUNT_WARNING_THRESHOLD} is unusual and may indicate "
            "a misconfigured wrapper or inventory inflation"
        )

    if scenario.facet in (Facet.CLIENT_SIDE, Facet.HYBRID) and not scenario.partners:
        v.append(f"site {sid!r}: facet {scenario.facet.value} requires a non-empty partner list")
    if scenario.facet is Facet.WATERFALL_ONLY and not scenario.partners:
        v.append(f"site {sid!r}: waterfall_only requires at least one tier partner")
    if scenario.facet in (Facet.SERVER_SIDE, Facet.HYBRID) and not scenario.ad_server_partner_id:
        v.append(f"site {sid!r}: facet {scenario.facet.value} requires ad_server_partner_id")
    seen_partners = set()
    for pid in scenario.partners:
        if pid in seen_partners:
            v.append(f"site {sid!r}: duplicate partner {pid!r} in roster")
        seen_partners.add(pid)
    v.extend(scenario.ad_server_latency.violations(f"site {sid!r} ad_server_latency"))
    return ValidationReport(tuple(v), tuple(w))


@dataclass(frozen=True)
class PartnerDirectory:
    """Hostname-suffix to partner-id map used for request attribution.

    Matching is on whole host labels: sub.adnxs.com matches the adnxs.com
    entry, notadnxs.com does not.  Treated as immutable after construction.
    """

    entries: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "PartnerDirectory":
        entries = {}
        for suffix, pid in mapping.items():
            entries[suffix.lower().strip().strip(".")] = pid
        return cls(entries)

    @classmethod
    def from_file(cls, path) -> "PartnerDirectory":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in data.items()
        ):
            raise ConfigurationError(f"{path}: directory must be a JSON object of suffix -> partner_id")
        return cls.from_mapping(data)

    def to_json(self) -> dict[str, str]:
        return dict(sorted(self.entries.items()))

    def lookup(self, host: str) -> str | None:
        return lookup_partner(host, self)


def lookup_partner(host: str, directory: PartnerDirectory) -> str | None:
    """Longest label-boundary suffix match; None when no entry matches."""
    labels = host.lower().rstrip(".").split(".")
    for start in range(len(labels)):
        suffix = ".".join(labels[start:])
        pid = directory.entries.get(suffix)
        if pid is not None:
            return pid
    return None


def builtin_directory() -> PartnerDirectory:
    """Seed directory covering the major demand partners; user-extensible."""
    ref = resources.files("hbarena").joinpath("data/partners.json")
    with ref.open("r", encoding="utf-8") as fh:
        return PartnerDirectory.from_mapping(json.load(fh))
