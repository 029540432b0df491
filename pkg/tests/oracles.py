"""Independent straight-line oracles used to pin expected values in tests.

Everything here is deliberately naive (explicit loops, brute-force scans) and
written against the protocol rules directly, not against the library code, so
the tests compare two unrelated derivations of the same quantity.
"""

from decimal import Decimal


def brute_force_winner(bids, floor):
    """Scan of (partner_id, cpm, arrived_at_ms, late) tuples for one slot.

    Highest on-time cpm meeting the floor; ties broken by earliest arrival,
    then lexicographically smallest partner id.
    """
    best = None
    for partner_id, cpm, arrived, late in bids:
        if late or cpm < floor:
            continue
        if best is None:
            best = (partner_id, cpm, arrived)
            continue
        b_pid, b_cpm, b_arr = best
        if cpm > b_cpm:
            best = (partner_id, cpm, arrived)
        elif cpm == b_cpm:
            if arrived < b_arr or (arrived == b_arr and partner_id < b_pid):
                best = (partner_id, cpm, arrived)
    if best is None:
        return None
    return best[0], best[1]


def send_time(policy, timeout_ms, arrivals):
    """Wrapper handoff time, recomputed without the engine."""
    timeout = Decimal(timeout_ms)
    if policy == "immediate":
        return Decimal(0)
    if not arrivals:
        return Decimal(0)
    latest = max(arrivals)
    return latest if latest < timeout else timeout


def client_side_totals(partner_latencies, ad_server_latency, policy, timeout_ms):
    """Hand trace of one client-side round with every partner responding.

    Returns (send_time, ad_server_response_time, total_latency, late_flags)
    where late_flags[i] corresponds to partner_latencies[i].
    """
    send = send_time(policy, timeout_ms, list(partner_latencies))
    response = send + ad_server_latency
    late = [arr > send for arr in partner_latencies]
    return send, response, response, late


def waterfall_totals(tiers, floor):
    """tiers: list of (partner_id, bid_or_None, latency).  Sequential trial."""
    tried = []
    winner = None
    total = Decimal(0)
    for partner_id, bid, latency in tiers:
        tried.append((partner_id, bid, latency))
        total += latency
        if bid is not None and bid >= floor:
            winner = (partner_id, bid)
            break
    return tried, winner, total


def count_client_trace_events(n_partners, n_arrived_bids, n_slots, n_filled_slots,
                              client_winner_slots):
    """Enumerate the records a client-side or hybrid trace must contain.

    n_arrived_bids counts (partner, slot) responses that reached the browser,
    late or not; client_winner_slots counts filled slots won by a client bid
    (only those get a bidWon record).
    """
    total = 0
    total += 1          # auctionInit
    total += 1          # requestBids
    total += n_partners  # bidRequested dom events
    total += n_partners  # outbound bid web_requests
    total += n_arrived_bids  # inbound bid web_responses
    total += n_arrived_bids  # bidResponse dom events
    total += 1          # auctionEnd
    total += 1          # ad-server web_request
    total += n_slots    # ad-server web_responses, one per slot
    total += client_winner_slots  # bidWon
    total += n_filled_slots       # slotRenderEnded (or adRenderFailed)
    return total


def percentile_linear(values, q_pct):
    """Linear interpolation between closest ranks over Decimal data."""
    data = sorted(values)
    n = len(data)
    if n == 1:
        return data[0]
    pos = q_pct * (n - 1)
    i, rem = divmod(pos, 100)
    i = int(i)
    if rem == 0:
        return data[i]
    return data[i] + (data[i + 1] - data[i]) * Decimal(rem) / Decimal(100)
