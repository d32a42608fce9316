"""Brute-force re-derivations used to cross-check the clinical label code.

Everything here favours directness over speed: each rule is evaluated from
scratch at every query time by scanning the full event list and spelling
out its window explicitly.  No code is shared with the package modules.
"""

from __future__ import annotations


def oracle_urine_rates(urine, weight):
    w = weight if weight is not None and weight > 0 else 75.0
    out = []
    for i in range(len(urine)):
        t, volume = urine[i]
        hours = 1.0
        if i > 0:
            gap = t - urine[i - 1][0]
            if 0 < gap <= 24:
                hours = gap
        out.append((t, volume / hours / w))
    return out


def oracle_kdigo_stage(crea, urine, weight, t):
    best = 0

    past = [(u, v) for u, v in crea if u <= t]
    if past:
        current = past[-1][1]
        week = [v for u, v in past if u > t - 7 * 24]
        if week and min(week) > 0:
            ratio = current / min(week)
            if ratio >= 3.0:
                best = 3
            elif ratio >= 2.0:
                best = 2
            elif ratio >= 1.5:
                best = 1
        two_days = [v for u, v in past if u > t - 2 * 24]
        if two_days:
            if current >= 4.0 and min(two_days) < 4.0:
                best = 3
            if current - min(two_days) >= 0.3:
                best = max(best, 1)

    rates = oracle_urine_rates(urine, weight)
    rules = [
        (24, 0.3, False, 3),  # rate < 0.3 for >= 24h
        (12, 0.0, True, 3),  # anuria for >= 12h
        (12, 0.5, False, 2),
        (6, 0.5, False, 1),
    ]
    for duration, limit, at_most, stage in rules:
        inside = [(u, r) for u, r in rates if t - duration < u <= t]
        if not inside:
            continue
        if at_most:
            held = all(r <= limit for _, r in inside)
        else:
            held = all(r < limit for _, r in inside)
        if not held:
            continue
        prev = t - duration
        covered = True
        for u, _ in inside:
            if u - prev >= 12:
                covered = False
            prev = u
        if t - prev >= 12:
            covered = False
        if covered:
            best = max(best, stage)
    return best


def oracle_aki_onset(crea, urine, weight, end_time):
    hour = 0
    while hour <= end_time:
        if oracle_kdigo_stage(crea, urine, weight, hour) >= 1:
            return float(hour)
        hour += 1
    return None


def oracle_antibiotic_episodes(abx, death_time, discharge_time):
    stay_end = death_time if death_time is not None else discharge_time
    episodes = [(t, stay_end) for t, v in abx if v == 2.0]
    doses = sorted(t for t, v in abx if v != 2.0)
    for i, start in enumerate(doses):
        if i > 0 and start - doses[i - 1] <= 24:
            continue  # not the head of a chain
        last = start
        for nxt in doses[i + 1 :]:
            if nxt - last > 24:
                break
            last = nxt
        until_death = death_time is not None and death_time - last <= 24
        if last - start >= 72 or until_death:
            episodes.append((start, last))
    return sorted(episodes)


def oracle_suspicion_times(abx, cultures, death_time, discharge_time, mode):
    starts = [s for s, _ in oracle_antibiotic_episodes(abx, death_time, discharge_time)]
    if mode == "abx_only":
        return sorted(set(starts))
    times = set()
    for a in starts:
        for c in cultures:
            if 0 <= c - a <= 24:
                times.add(a)
            if 0 <= a - c <= 72:
                times.add(min(a, c))
    return sorted(times)


def oracle_sofa_dysfunction(sofa):
    out = []
    for t, score in sofa:
        low = None
        for u, value in sofa:
            if t - 24 < u <= t and (low is None or value < low):
                low = value
        if score - low >= 2:
            out.append(t)
    return out


def oracle_sepsis_onset(sofa, abx, cultures, death_time, discharge_time, mode):
    suspicions = oracle_suspicion_times(abx, cultures, death_time, discharge_time, mode)
    candidates = []
    for d in oracle_sofa_dysfunction(sofa):
        for s in suspicions:
            if s - 48 <= d <= s + 24:
                candidates.append(d)
    return min(candidates) if candidates else None


def oracle_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def oracle_isotonic_group_values(scores, labels):
    """Exhaustive minimum-SSE monotone fit; returns one value per
    distinct score, in increasing score order.  Feasible only for a
    handful of distinct scores (2^(g-1) partitions)."""
    from itertools import product as _product

    groups = {}
    for s, y in zip(scores, labels):
        groups.setdefault(s, []).append(y)
    keys = sorted(groups)
    stats = [(len(groups[k]), sum(groups[k]), sum(y * y for y in groups[k])) for k in keys]
    g = len(keys)
    best_sse, best_fit = None, None
    for cuts in _product((0, 1), repeat=g - 1):
        bounds = [0] + [i + 1 for i, c in enumerate(cuts) if c] + [g]
        fit, sse, ok = [], 0.0, True
        prev = None
        for lo, hi in zip(bounds, bounds[1:]):
            w = sum(stats[i][0] for i in range(lo, hi))
            s1 = sum(stats[i][1] for i in range(lo, hi))
            s2 = sum(stats[i][2] for i in range(lo, hi))
            v = s1 / w
            if prev is not None and v < prev:
                ok = False
                break
            prev = v
            sse += s2 - 2 * v * s1 + w * v * v
            fit.extend([v] * (hi - lo))
        if ok and (best_sse is None or sse < best_sse - 1e-12):
            best_sse, best_fit = sse, fit
    return keys, best_fit


def oracle_wilcoxon(a, b):
    from itertools import product as _product

    diffs = [x - y for x, y in zip(a, b) if x != y]
    n = len(diffs)
    if n == 0:
        return 1.0
    magnitudes = sorted(abs(d) for d in diffs)
    ranks = []
    for d in diffs:
        m = abs(d)
        tied = [i + 1 for i, v in enumerate(magnitudes) if v == m]
        ranks.append(sum(tied) / len(tied))
    w_obs = sum(r for d, r in zip(diffs, ranks) if d > 0)
    centre = sum(ranks) / 2
    dev = abs(w_obs - centre)
    hits = 0
    for pattern in _product((0, 1), repeat=n):
        w = sum(r for bit, r in zip(pattern, ranks) if bit)
        if abs(w - centre) >= dev - 1e-12:
            hits += 1
    return hits / 2**n
