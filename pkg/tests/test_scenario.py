"""Scenario file parsing and the quota-based corpus generator."""

import json
from decimal import Decimal

import pytest

from hbarena.domain import ConfigurationError, Facet
from hbarena.scenario import expand_sites, load_scenario_file, validate_scenario_file

PARTNERS = [
    {
        "partner_id": pid,
        "domains": [f"{pid}.example.net"],
        "latency_model": {"kind": "fixed", "value_ms": "100"},
        "bid_model": {"kind": "fixed", "value_cpm": "0.5"},
    }
    for pid in ("alpha", "beta", "gamma", "delta")
]


def write_scenario(tmp_path, payload, name="scen.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return path


def generator_payload(**overrides):
    generator = {
        "num_sites": 100,
        "facet_weights": {"server_side": 48, "hybrid": 34.7, "client_side": 17.3},
        "ad_server_partner": "delta",
    }
    generator.update(overrides)
    return {"master_seed": 5, "partners": PARTNERS, "generator": generator}


def test_explicit_site_parsing(tmp_path):
    payload = {
        "master_seed": 1,
        "partners": PARTNERS,
        "sites": [
            {
                "site_id": "s1",
                "rank": 3,
                "facet": "client_side",
                "slots": [{"slot_id": "slot0", "width": 300, "height": 250, "floor_price": "0.1"}],
                "partners": ["alpha"],
                "ad_server_latency": {"kind": "fixed", "value_ms": "80"},
            }
        ],
    }
    sf = load_scenario_file(write_scenario(tmp_path, payload))
    sites = expand_sites(sf, 1)
    assert sites[0].facet is Facet.CLIENT_SIDE
    assert sites[0].slots[0].floor_price == Decimal("0.1")
    assert validate_scenario_file(sf, sites).ok


def test_missing_sites_and_generator_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        load_scenario_file(write_scenario(tmp_path, {"partners": PARTNERS}))


def test_bad_json_rejected(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{nope")
    with pytest.raises(ConfigurationError):
        load_scenario_file(path)


def test_generator_quota_counts_are_exact(tmp_path):
    payload = generator_payload(num_sites=5000)
    sf = load_scenario_file(write_scenario(tmp_path, payload))
    sites = expand_sites(sf, 5)
    counts = {}
    for site in sites:
        counts[site.facet.value] = counts.get(site.facet.value, 0) + 1
    assert counts == {"server_side": 2400, "hybrid": 1735, "client_side": 865}
    assert validate_scenario_file(sf, sites).ok


def test_generator_is_deterministic_per_seed(tmp_path):
    sf = load_scenario_file(write_scenario(tmp_path, generator_payload()))
    assert expand_sites(sf, 5) == expand_sites(sf, 5)
    assert expand_sites(sf, 5) != expand_sites(sf, 6)


def test_generator_ranks_are_sequential(tmp_path):
    sf = load_scenario_file(write_scenario(tmp_path, generator_payload(rank_start=100)))
    sites = expand_sites(sf, 5)
    assert [s.rank for s in sites] == list(range(100, 200))


def test_roster_order_pool_takes_prefix(tmp_path):
    payload = generator_payload(
        facet_weights={"client_side": 1},
        roster_order="pool",
        partner_pool=["alpha", "beta", "gamma"],
        partner_count_weights={"2": 1},
    )
    sf = load_scenario_file(write_scenario(tmp_path, payload))
    sites = expand_sites(sf, 5)
    assert all(s.partners == ("alpha", "beta") for s in sites)


def test_hybrid_sites_exclude_entity_from_roster(tmp_path):
    sf = load_scenario_file(write_scenario(tmp_path, generator_payload()))
    sites = expand_sites(sf, 5)
    for site in sites:
        if site.facet is Facet.HYBRID:
            assert site.ad_server_partner_id == "delta"
            assert "delta" not in site.partners


def test_generator_requires_entity_for_server_facets(tmp_path):
    payload = generator_payload()
    del payload["generator"]["ad_server_partner"]
    sf = load_scenario_file(write_scenario(tmp_path, payload))
    with pytest.raises(ConfigurationError):
        expand_sites(sf, 5)


def test_unknown_partner_reference_is_violation(tmp_path):
    payload = {
        "master_seed": 1,
        "partners": PARTNERS,
        "sites": [
            {
                "site_id": "s1",
                "facet": "client_side",
                "slots": [{"slot_id": "slot0", "width": 300, "height": 250, "floor_price": "0"}],
                "partners": ["ghost"],
                "ad_server_latency": {"kind": "fixed", "value_ms": "80"},
            }
        ],
    }
    sf = load_scenario_file(write_scenario(tmp_path, payload))
    sites = expand_sites(sf, 1)
    report = validate_scenario_file(sf, sites)
    assert any("unknown partner 'ghost'" in v for v in report.violations)


def test_directory_covers_all_partner_domains(tmp_path):
    sf = load_scenario_file(write_scenario(tmp_path, generator_payload()))
    directory = sf.directory()
    assert directory.lookup("alpha.example.net") == "alpha"
    assert directory.lookup("cdn.delta.example.net") == "delta"
