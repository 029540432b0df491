"""Command-line pipeline: simulate a scenario corpus, detect over the traces,
and aggregate reports, fully reproducible from one master seed.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error,
3 detection completed but some traces failed to parse.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from decimal import Decimal

from . import __version__
from .analytics import REPORT_NAMES, build_report, load_records, write_report_csv, write_report_json
from .auction import AuctionOutcome, WaterfallOutcome, run_scenario
from .detector import DetectorContractError, extract_auction_metadata, result_row
from .domain import ConfigurationError, Facet, PartnerDirectory, builtin_directory, decimal_str
from .scenario import ScenarioFile, expand_sites, load_scenario_file, validate_scenario_file
from .tracegen import (
    TraceParseError,
    emit_trace,
    parse_trace_file,
    serialize_trace,
    trace_filename,
    truth_filename,
    truth_record,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_PARSE_ERRORS = 3

ENV_SEED = "HBARENA_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are exit code 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _ts(value: Decimal) -> str:
    return format(value, "f")


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return "sha256:" + digest.hexdigest()


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _participating_partners(scenario) -> list[str]:
    if scenario.facet is Facet.SERVER_SIDE:
        return [scenario.ad_server_partner_id]
    if scenario.facet is Facet.HYBRID:
        return list(scenario.partners) + [scenario.ad_server_partner_id]
    return list(scenario.partners)


def outcome_row(outcome, scenario, round_index) -> dict:
    """Ground-truth log row; carries the scenario context analytics needs."""
    base = {
        "site_id": scenario.site_id,
        "rank": scenario.rank,
        "round_index": round_index,
        "facet": scenario.facet.value,
        "wrapper_policy": scenario.wrapper_policy.value,
        "timeout_ms": scenario.timeout_ms,
        "partner_ids": _participating_partners(scenario),
        "slot_count": len(scenario.slots),
    }
    if outcome is None:
        base.update({"partner_ids": [], "total_latency_ms": None})
        return base
    if isinstance(outcome, WaterfallOutcome):
        base.update(
            {
                "tiers_tried": [
                    {
                        "partner": t.partner_id,
                        "bid": decimal_str(t.bid) if t.bid is not None else None,
                        "latency_ms": _ts(t.latency_ms),
                    }
                    for t in outcome.tiers_tried
                ],
                "winner": (
                    {"partner": outcome.winner[0], "cpm": decimal_str(outcome.winner[1])}
                    if outcome.winner
                    else None
                ),
                "total_latency_ms": _ts(outcome.total_latency_ms),
                "fallback_used": outcome.fallback_used,
            }
        )
        return base
    assert isinstance(outcome, AuctionOutcome)
    base.update(
        {
            "wrapper_send_time_ms": _ts(outcome.wrapper_send_time_ms),
            "ad_server_response_time_ms": _ts(outcome.ad_server_response_time_ms),
            "total_latency_ms": _ts(outcome.total_latency_ms),
            "winner_notified": outcome.winner_notified,
            "late_bid_count": outcome.late_bid_count,
            "slots": [
                {
                    "slot_id": slot.slot_id,
                    "size": slot.size,
                    "floor_price": decimal_str(slot.floor_price),
                    "filled": slot.filled,
                    "fallback_used": slot.fallback_used,
                    "render_failed": slot.render_failed,
                    "winner": (
                        {"partner": slot.winner[0], "cpm": decimal_str(slot.winner[1])}
                        if slot.winner
                        else None
                    ),
                    "bids": [
                        {
                            "partner": bid.partner_id,
                            "cpm": decimal_str(bid.cpm),
                            "requested_at_ms": _ts(bid.requested_at_ms),
                            "arrived_at_ms": _ts(bid.arrived_at_ms),
                            "late": bid.late,
                            "channel": bid.channel,
                        }
                        for bid in slot.bids
                    ],
                }
                for slot in outcome.slots
            ],
        }
    )
    return base


def _simulate_site(task) -> tuple[str, list[str], list[str]]:
    """Run all rounds for one site and write its trace/truth files.

    Returns (site_id, written file names, outcome row JSON lines).
    """
    scenario, partners, master_seed, rounds, out_dir = task
    written: list[str] = []
    rows: list[str] = []
    for round_index in range(rounds):
        outcome = run_scenario(scenario, partners, master_seed, round_index)
        trace = emit_trace(outcome, scenario, partners, round_index)
        t_name = trace_filename(scenario.site_id, round_index)
        _write_text(os.path.join(out_dir, t_name), serialize_trace(trace))
        s_name = truth_filename(scenario.site_id, round_index)
        record = truth_record(outcome, scenario, round_index)
        _write_text(os.path.join(out_dir, s_name), json.dumps(record, separators=(",", ":")) + "\n")
        written.extend([t_name, s_name])
        rows.append(json.dumps(outcome_row(outcome, scenario, round_index), separators=(",", ":")))
    return scenario.site_id, written, rows


def _resolve_seed(args_seed, file_seed) -> int:
    if args_seed is not None:
        seed = args_seed
    elif file_seed is not None:
        seed = file_seed
    elif os.environ.get(ENV_SEED):
        try:
            seed = int(os.environ[ENV_SEED])
        except ValueError as exc:
            raise ConfigurationError(f"{ENV_SEED} must be an integer") from exc
    else:
        raise ConfigurationError(
            f"no seed given: set master_seed in the scenario file, pass --seed, or export {ENV_SEED}"
        )
    if not (0 <= seed < 2**64):
        raise ConfigurationError("seed must fit in an unsigned 64-bit integer")
    return seed


def cmd_simulate(args) -> int:
    sf = load_scenario_file(args.scenario)
    master_seed = _resolve_seed(args.seed, sf.master_seed)
    sites = expand_sites(sf, master_seed)
    report = validate_scenario_file(sf, sites)
    for warning in report.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if report.violations:
        for violation in report.violations:
            print(f"invalid scenario: {violation}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = args.out or sf.output_dir or "out"
    os.makedirs(out_dir, exist_ok=True)

    tasks = [(site, sf.partners, master_seed, sf.rounds_per_site, out_dir) for site in sites]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_simulate_site, tasks, chunksize=64))
    else:
        results = [_simulate_site(task) for task in tasks]
    results.sort(key=lambda r: r[0])

    all_files: list[str] = []
    outcome_lines: list[str] = []
    for _, written, rows in results:
        all_files.extend(written)
        outcome_lines.extend(rows)
    _write_text(os.path.join(out_dir, "outcomes.jsonl"), "".join(line + "\n" for line in outcome_lines))
    all_files.append("outcomes.jsonl")

    directory = sf.directory()
    _write_text(
        os.path.join(out_dir, "directory.json"),
        json.dumps(directory.to_json(), indent=2, sort_keys=True) + "\n",
    )
    all_files.append("directory.json")

    facet_counts: dict[str, int] = {}
    for site in sites:
        facet_counts[site.facet.value] = facet_counts.get(site.facet.value, 0) + 1
    manifest = {
        "tool": "hbarena",
        "version": __version__,
        "master_seed": master_seed,
        "scenario_digest": _sha256_file(args.scenario),
        "site_count": len(sites),
        "rounds_per_site": sf.rounds_per_site,
        "facet_counts": dict(sorted(facet_counts.items())),
        "site_meta": {
            site.site_id: {"rank": site.rank, "facet": site.facet.value} for site in sites
        },
        "files": {name: _sha256_file(os.path.join(out_dir, name)) for name in sorted(all_files)},
    }
    _write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(
        f"simulated {len(sites)} sites x {sf.rounds_per_site} rounds "
        f"(seed {master_seed}) into {out_dir}"
    )
    return EXIT_OK


def _load_directory(args) -> PartnerDirectory:
    if args.directory:
        if not os.path.exists(args.directory):
            raise ConfigurationError(f"directory file not found: {args.directory}")
        return PartnerDirectory.from_file(args.directory)
    fallback = os.path.join(args.trace_dir, "directory.json")
    if os.path.exists(fallback):
        return PartnerDirectory.from_file(fallback)
    return builtin_directory()


def _score(results: list[dict], trace_dir: str) -> None:
    truth: dict[tuple[str, int], dict] = {}
    for name in sorted(os.listdir(trace_dir)):
        if not name.endswith(".truth.jsonl"):
            continue
        with open(os.path.join(trace_dir, name), "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    truth[(row["site_id"], row["round_index"])] = row
    tp = fp = fn = tn = 0
    facet_hits = facet_total = 0
    for row in results:
        if "error" in row:
            continue
        key = (row["site_id"], row["round_index"])
        truth_row = truth.get(key)
        if truth_row is None:
            continue
        actual_hb = truth_row["facet"] in ("client_side", "server_side", "hybrid")
        detected_hb = bool(row["is_hb"])
        if detected_hb and actual_hb:
            tp += 1
            facet_total += 1
            facet_hits += int(row["facet"] == truth_row["facet"])
        elif detected_hb and not actual_hb:
            fp += 1
        elif actual_hb:
            fn += 1
        else:
            tn += 1

    def ratio(num, den):
        if den == 0:
            return "n/a"
        return decimal_str((Decimal(num) / Decimal(den)).quantize(Decimal("0.000001")))

    print(f"scored {tp + fp + fn + tn} traces against sidecar truth")
    print(f"precision={ratio(tp, tp + fp)} recall={ratio(tp, tp + fn)} "
          f"facet_accuracy={ratio(facet_hits, facet_total)}")


def cmd_detect(args) -> int:
    if not os.path.isdir(args.trace_dir):
        raise ConfigurationError(f"trace directory not found: {args.trace_dir}")
    directory = _load_directory(args)
    trace_names = sorted(n for n in os.listdir(args.trace_dir) if n.endswith(".trace.jsonl"))
    rows: list[dict] = []
    parse_errors = 0
    for name in trace_names:
        path = os.path.join(args.trace_dir, name)
        try:
            trace = parse_trace_file(path)
            result = extract_auction_metadata(trace, directory)
            rows.append(result_row(result))
        except (TraceParseError, DetectorContractError) as exc:
            parse_errors += 1
            rows.append({"site_id": name, "round_index": None, "error": str(exc)})
    out_path = args.out or os.path.join(args.trace_dir, "results.jsonl")
    _write_text(out_path, "".join(json.dumps(row, separators=(",", ":")) + "\n" for row in rows))
    print(f"detected over {len(trace_names)} traces -> {out_path}"
          + (f" ({parse_errors} parse errors)" if parse_errors else ""))
    if args.score:
        _score(rows, args.trace_dir)
    return EXIT_PARSE_ERRORS if parse_errors else EXIT_OK


def _rank_by_site(manifest_path) -> dict[str, int] | None:
    if not manifest_path:
        return None
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return {site: meta["rank"] for site, meta in manifest.get("site_meta", {}).items()}


def cmd_report(args) -> int:
    if not os.path.exists(args.input):
        raise ConfigurationError(f"input file not found: {args.input}")
    names = REPORT_NAMES if args.report == "all" else (args.report,)
    for name in names:
        if name not in REPORT_NAMES:
            print(
                f"unknown report {name!r}; valid names: all, {', '.join(REPORT_NAMES)}",
                file=sys.stderr,
            )
            return EXIT_CONFIG
    records = load_records(args.input, _rank_by_site(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    reports = {}
    for name in names:
        rows = build_report(name, records, args.include_zero_bid_auctions)
        reports[name] = rows
        write_report_csv(os.path.join(args.out, f"{name}.csv"), rows)
    write_report_json(os.path.join(args.out, "report.json"), reports)
    print(f"wrote {len(names)} report(s) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hbarena", description=__doc__)
    parser.add_argument("--version", action="version", version=f"hbarena {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a scenario corpus and emit traces")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON file")
    p_sim.add_argument("--seed", type=int, default=None, help="master seed override (u64)")
    p_sim.add_argument("--out", default=None, help="output directory")
    p_sim.add_argument("--jobs", type=int, default=1, help="concurrent site simulations")
    p_sim.set_defaults(func=cmd_simulate)

    p_det = sub.add_parser("detect", help="classify traces for header-bidding activity")
    p_det.add_argument("trace_dir", help="directory of *.trace.jsonl files")
    p_det.add_argument("--directory", default=None, help="partner directory JSON file")
    p_det.add_argument("--out", default=None, help="results JSONL path")
    p_det.add_argument("--score", action="store_true", help="score against truth sidecars")
    p_det.set_defaults(func=cmd_detect)

    p_rep = sub.add_parser("report", help="aggregate results or ground truth into reports")
    p_rep.add_argument("input", help="results.jsonl or outcomes.jsonl")
    p_rep.add_argument("--report", default="all", help="report name or 'all'")
    p_rep.add_argument("--out", default="reports", help="output directory")
    p_rep.add_argument("--manifest", default=None, help="run manifest (adds site ranks)")
    p_rep.add_argument(
        "--include-zero-bid-auctions",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="keep auctions that drew no bids in latency reports",
    )
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
