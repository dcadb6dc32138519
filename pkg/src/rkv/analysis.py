"""Post-hoc metrics over simulation reports."""

import numpy as np

from .simulator import SimulationReport


def retained_sets(report: SimulationReport):
    """Retained positions after the last compression event.

    Returns ``(upto, sets)`` where ``upto`` is the number of tokens generated
    when the snapshot was taken and ``sets[layer][head]`` is a Python set.
    Runs without events (FullKV) use the final cache contents.
    """
    if report.per_event:
        ev = report.per_event[-1]
        return ev.step + 1, [[set(h) for h in layer] for layer in ev.retained_positions]
    return report.trace_steps, [[set(h) for h in layer] for layer in report.final_positions]


def retention_mask(report: SimulationReport):
    """Boolean mask over all trace positions: held by any (layer, head) at the snapshot."""
    upto, sets = retained_sets(report)
    mask = np.zeros(report.trace_steps, dtype=bool)
    for layer in sets:
        for s in layer:
            mask[list(s)] = True
    return mask


def head_count_vector(report: SimulationReport):
    """Per-position number of (layer, KV head) pairs preferring the token.

    Taken from the last compression event; FullKV counts every head for
    every position.
    """
    counts = np.zeros(report.trace_steps, dtype=np.int64)
    if not report.per_event:
        n_heads = report.geometry["n_layers"] * report.geometry["n_kv_heads"]
        counts[:] = n_heads
        return counts
    ev = report.per_event[-1]
    for positions, votes in zip(ev.vote_positions, ev.head_votes):
        counts[positions] += votes
    return counts


def jaccard(a, b):
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def selection_overlap(rep_a: SimulationReport, rep_b: SimulationReport):
    """Mean Jaccard overlap of the retained sets, over layers and heads."""
    _, sa = retained_sets(rep_a)
    _, sb = retained_sets(rep_b)
    vals = [jaccard(x, y) for la, lb in zip(sa, sb) for x, y in zip(la, lb)]
    return float(np.mean(vals))


def positional_spread(report: SimulationReport):
    """Range and standard deviation of retained positions, averaged over heads."""
    _, sets = retained_sets(report)
    ranges, stds = [], []
    for layer in sets:
        for s in layer:
            p = np.fromiter(s, dtype=np.int64)
            ranges.append(int(p.max() - p.min()) if len(p) else 0)
            stds.append(float(p.std()) if len(p) else 0.0)
    return {"range": float(np.mean(ranges)), "std": float(np.mean(stds))}


def selection_quality(report: SimulationReport, labels, beta):
    """Planted-ground-truth proxies at the last compression event.

    ``spike_retained``: share of planted spikes still cached.
    ``duplicates_evicted``: share of cluster members older than the ``beta``
    newest of their cluster that are gone.  Both averaged over heads.
    """
    upto, sets = retained_sets(report)
    spikes = labels.spike_positions(upto)
    dups = labels.old_duplicates(beta, upto)
    sp, du, kept_dups = [], [], []
    for layer in sets:
        for s in layer:
            if spikes:
                sp.append(sum(p in s for p in spikes) / len(spikes))
            k = sum(p in s for p in dups)
            kept_dups.append(k)
            if dups:
                du.append(1.0 - k / len(dups))
    return {
        "spike_retained": float(np.mean(sp)) if sp else float("nan"),
        "duplicates_evicted": float(np.mean(du)) if du else float("nan"),
        "duplicates_kept": float(np.mean(kept_dups)),
        "n_spikes": len(spikes),
        "n_old_duplicates": len(dups),
    }


def check_cache_bounds(report: SimulationReport, cfg):
    """Raise AssertionError on any budget or observation-window violation."""
    for rec in report.per_step:
        if rec.buffer_len > cfg.buffer:
            raise AssertionError(f"step {rec.step}: buffer {rec.buffer_len} > {cfg.buffer}")
        for r in rec.retained_len:
            if r > cfg.budget_total:
                raise AssertionError(
                    f"step {rec.step}: retained {r} > budget total {cfg.budget_total}")
    a = cfg.obs_window
    for ev in report.per_event:
        recent = list(range(ev.step + 1 - a, ev.step + 1))
        for layer in ev.retained_positions:
            for pos in layer:
                if len(pos) > cfg.budget_total:
                    raise AssertionError(f"event {ev.event}: {len(pos)} tokens retained")
                if pos[-a:] != recent:
                    raise AssertionError(
                        f"event {ev.event}: last {a} positions {pos[-a:]} != {recent}")
                if any(x >= y for x, y in zip(pos, pos[1:])):
                    raise AssertionError(f"event {ev.event}: positions not increasing")
