"""Command-line entry point: ``rkv {synth,run,sweep,compare,memcalc}``.

Relative output paths land in ``$RKV_OUTPUT_DIR`` when it is set.
"""

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, efficiency, plotting, simulator
from .cache import CacheConfig, ConfigError, ModelGeometry
from .kernels import l2_normalize_rows
from .policy import PolicyKind
from .trace import SynthConfig, TraceFormatError, generate, load, save, spikes_every

ENV_OUTPUT_DIR = "RKV_OUTPUT_DIR"


class CLIError(Exception):
    pass


# --------------------------------------------------------------------------
# argument types

def _prob(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside [0, 1]")
    return v


def _nonneg_float(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{v} is negative")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{v} must be >= 1")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{v} must be >= 0")
    return v


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from None


def _lambda_list(text):
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("lambda list is empty")
    bad = [v for v in vals if not 0.0 <= v <= 1.0]
    if bad:
        raise argparse.ArgumentTypeError(f"lambda values outside [0, 1]: {bad}")
    return vals


def _policy(text):
    try:
        return PolicyKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _out_path(path):
    p = Path(path)
    base = os.environ.get(ENV_OUTPUT_DIR)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _add_geometry_flags(p, head_dim=64):
    p.add_argument("--layers", type=_pos_int, default=2)
    p.add_argument("--kv-heads", type=_pos_int, default=2)
    p.add_argument("--group-size", type=_pos_int, default=1)
    p.add_argument("--head-dim", type=_pos_int, default=head_dim)
    p.add_argument("--bytes-per-value", type=_pos_int, default=2)


def _geometry(args):
    return ModelGeometry(args.layers, args.kv_heads, args.group_size, args.head_dim,
                         args.bytes_per_value)


def _add_cache_flags(p):
    p.add_argument("--budget", type=_pos_int, default=1024)
    p.add_argument("--buffer", type=_pos_int, default=128)
    p.add_argument("--alpha", type=_pos_int, default=8, help="observation window")
    p.add_argument("--lambda", dest="lam", type=_prob, default=0.1)
    p.add_argument("--sim-threshold", type=float, default=0.9)
    p.add_argument("--beta", type=_nonneg_int, default=8, help="recent similar tokens spared")
    p.add_argument("--pool-window", type=_pos_int, default=4, help="pooling half-window W")
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--budget-includes-obs", type=_bool, default=True)
    p.add_argument("--gqa-pool", choices=("max", "mean"), default="max")
    p.add_argument("--snapkv-calibrated", type=_bool, default=True)
    p.add_argument("--per-head-selection", type=_bool, default=False)
    p.add_argument("--workers", type=_pos_int, default=1,
                   help="threads for per-layer compression")


def _cache_config(args, **override):
    kw = dict(budget=args.budget, buffer=args.buffer, obs_window=args.alpha, lam=args.lam,
              sim_threshold=args.sim_threshold, recency_keep=args.beta,
              pool_half_window=args.pool_window, eps=args.eps,
              budget_includes_obs=args.budget_includes_obs, gqa_pool=args.gqa_pool,
              snapkv_calibrated=args.snapkv_calibrated,
              per_head_selection=args.per_head_selection)
    kw.update(override)
    return CacheConfig(**kw)


def _load_trace(path):
    if not Path(path).exists():
        raise CLIError(f"trace file not found: {path}")
    return load(path)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def mean_pairwise_similarity(trace):
    """Mean off-diagonal key cosine similarity, averaged over layers and heads."""
    vals = []
    n = len(trace)
    if n < 2:
        return 0.0
    for li in range(trace.geometry.n_layers):
        for h in range(trace.geometry.n_kv_heads):
            kn = l2_normalize_rows(trace.keys[:, li, h]).astype(np.float64)
            s = kn.sum(axis=0)
            diag = float(np.sum(kn * kn))
            vals.append((float(s @ s) - diag) / (n * (n - 1)))
    return float(np.mean(vals))


# --------------------------------------------------------------------------
# commands

def cmd_synth(args):
    spikes = list(args.spike_positions or [])
    if args.spike_every:
        spikes += spikes_every(args.spike_every, args.steps)
    cfg = SynthConfig(
        seed=args.seed, steps=args.steps, geometry=_geometry(args),
        n_clusters=args.clusters, cluster_repeat_prob=args.repeat_prob,
        cluster_noise_sigma=args.noise_sigma,
        attention_spike_positions=sorted(set(spikes)),
    )
    trace = generate(cfg)
    out = _out_path(args.output)
    nbytes = save(trace, out)
    stats = {
        "path": str(out),
        "bytes": nbytes,
        "sha256": trace.digest(),
        "steps": len(trace),
        "ngram_avg_frequency": {str(k): v for k, v in
                                simulator.ngram_redundancy_stats(trace, args.max_n).items()},
        "mean_pairwise_similarity": mean_pairwise_similarity(trace),
    }
    print(json.dumps(stats, indent=2))
    return 0


def cmd_run(args):
    trace = _load_trace(args.trace)
    cfg = _cache_config(args)
    report = simulator.run(trace, args.policy, cfg, workers=args.workers)
    out = _out_path(args.output)
    report.save(out)
    if args.plot:
        plotting.plot_occupancy(report, out.with_suffix(".png"))
    print(f"{report.policy}: {report.n_events} compression events, "
          f"peak {report.peak_cache_tokens} tokens / {report.peak_cache_bytes} bytes "
          f"-> {out}")
    return 0


def _sweep_rows(trace, cfg, lambdas, jobs):
    labels = trace.labels()
    base = simulator.run(trace, PolicyKind.ATTENTION_ONLY, cfg)

    def one(lam):
        rep = simulator.run(trace, PolicyKind.RKV, cfg.replace(lam=lam))
        q = analysis.selection_quality(rep, labels, cfg.recency_keep)
        return {
            "lambda": lam,
            "spike_retained": q["spike_retained"],
            "duplicates_evicted": q["duplicates_evicted"],
            "overlap_attention_only": analysis.selection_overlap(rep, base),
            "n_events": rep.n_events,
            "peak_cache_tokens": rep.peak_cache_tokens,
        }

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(one, lambdas))
    return [one(lam) for lam in lambdas]


def cmd_sweep(args):
    trace = _load_trace(args.trace)
    cfg = _cache_config(args)
    try:
        rows = _sweep_rows(trace, cfg, args.lambdas, args.jobs)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    out_dir = _out_path(args.out_dir) if args.out_dir else _out_path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / args.prefix
    doc = {"schema_version": simulator.SCHEMA_VERSION, "trace_digest": trace.digest(),
           "config": cfg.to_dict(), "rows": rows}
    Path(f"{stem}.json").write_text(json.dumps(doc, indent=2))
    keys = ["lambda", "spike_retained", "duplicates_evicted", "overlap_attention_only",
            "n_events", "peak_cache_tokens"]
    _write_csv(f"{stem}.csv", keys, [[r[k] for k in keys] for r in rows])
    if args.plot:
        plotting.plot_sweep(rows, f"{stem}.png")
    print(f"{'lambda':>8} {'spikes':>8} {'dups_ev':>8} {'overlap':>8}")
    for r in rows:
        print(f"{r['lambda']:>8g} {r['spike_retained']:>8.3f} "
              f"{r['duplicates_evicted']:>8.3f} {r['overlap_attention_only']:>8.3f}")
    return 0


def compare_reports(reports, labels):
    digests = {r.trace_digest for r in reports}
    if len(digests) != 1:
        raise CLIError("reports were produced from different traces "
                       f"({len(digests)} distinct trace digests); refusing to compare")
    masks = [analysis.retention_mask(r) for r in reports]
    counts = [analysis.head_count_vector(r) for r in reports]
    overlap = [[analysis.selection_overlap(a, b) for b in reports] for a in reports]
    summary = {
        "schema_version": simulator.SCHEMA_VERSION,
        "trace_digest": reports[0].trace_digest,
        "labels": labels,
        "overlap": overlap,
        "peak_cache_tokens": {lab: r.peak_cache_tokens for lab, r in zip(labels, reports)},
        "peak_cache_bytes": {lab: r.peak_cache_bytes for lab, r in zip(labels, reports)},
        "retained_fraction": {lab: float(m.mean()) for lab, m in zip(labels, masks)},
        "positional_spread": {lab: analysis.positional_spread(r)
                              for lab, r in zip(labels, reports)},
    }
    return summary, masks, counts


def cmd_compare(args):
    if len(args.reports) < 2:
        raise CLIError("compare needs at least two reports")
    reports = [simulator.SimulationReport.load(p) for p in args.reports]
    labels = []
    for r in reports:
        lab = r.policy
        while lab in labels:
            lab += "'"
        labels.append(lab)
    summary, masks, counts = compare_reports(reports, labels)
    out_dir = _out_path(args.out_dir) if args.out_dir else _out_path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / args.prefix
    Path(f"{stem}.json").write_text(json.dumps(summary, indent=2))
    header = ["position"] + [f"mask_{lab}" for lab in labels] + [f"heads_{lab}" for lab in labels]
    rows = []
    for p in range(reports[0].trace_steps):
        rows.append([p] + [int(m[p]) for m in masks] + [int(c[p]) for c in counts])
    _write_csv(f"{stem}.csv", header, rows)
    if args.plot:
        g = reports[0].geometry
        plotting.plot_head_counts(labels, np.stack(counts), f"{stem}.png",
                                  max_heads=g["n_layers"] * g["n_kv_heads"])
    for i, lab in enumerate(labels):
        others = ", ".join(f"{labels[j]}={summary['overlap'][i][j]:.3f}"
                           for j in range(len(labels)) if j != i)
        print(f"{lab}: peak {summary['peak_cache_tokens'][lab]} tokens; overlap {others}")
    return 0


def cmd_memcalc(args):
    geometry = _geometry(args)
    if args.table1:
        rows = efficiency.table1_rows()
        print(f"{'gen_len':>8} {'setting':>12} {'budget':>7} {'saving':>8}")
        for r in rows:
            pct = efficiency.format_pct(r["saving_pct"] / 100.0)
            print(f"{r['gen_len']:>8} {r['setting']:>12} {r['budget']:>7} {pct:>7}%")
        if args.csv:
            keys = ["gen_len", "setting", "budget", "saving_pct"]
            _write_csv(_out_path(args.csv), keys,
                       [[r["gen_len"], r["setting"], r["budget"],
                         efficiency.format_pct(r["saving_pct"] / 100.0)] for r in rows])
        return 0
    if args.gen_len is None or args.budget is None:
        raise CLIError("memcalc needs --gen-len and --budget (or --table1)")
    if args.budget > args.gen_len:
        raise CLIError(f"budget {args.budget} exceeds generation length {args.gen_len}")
    if args.budget == 0:
        print("warning: zero budget is degenerate (nothing is cached)", file=sys.stderr)
    weights = int(args.weights_gb * 1e9)
    mb = efficiency.memory_breakdown(geometry, args.gen_len, args.budget, args.buffer,
                                     args.alpha, args.batch, weights)
    print(f"memory saving: {efficiency.format_pct(mb.saving_fraction)}%")
    for k, v in mb.to_dict().items():
        if k != "saving_fraction":
            print(f"  {k:<15} {v:>16,d} B")
    if args.device_gb:
        per_req = mb.m_budget + mb.m_buffer + mb.m_query_window
        full_req = efficiency.kv_memory(1, args.gen_len, geometry)
        dev = int(args.device_gb * 1e9)
        # batch headroom from memory alone; not a throughput measurement
        print(f"  estimated max batch (memory only): compressed "
              f"{efficiency.max_batch_estimate(dev, weights, per_req // args.batch)}, "
              f"full {efficiency.max_batch_estimate(dev, weights, full_req)}")
    return 0


# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="rkv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic decode trace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=_pos_int, default=512)
    p.add_argument("--clusters", type=_pos_int, default=4)
    p.add_argument("--repeat-prob", type=_prob, default=0.6)
    p.add_argument("--noise-sigma", type=_nonneg_float, default=0.05)
    p.add_argument("--spike-every", type=_nonneg_int, default=0,
                   help="plant one attention spike per this many steps")
    p.add_argument("--spike-positions", type=_int_list, default=None)
    p.add_argument("--max-n", type=_pos_int, default=2, help="largest n-gram order reported")
    _add_geometry_flags(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="simulate one policy over a trace")
    p.add_argument("trace")
    p.add_argument("--policy", type=_policy, default=PolicyKind.RKV)
    _add_cache_flags(p)
    p.add_argument("--plot", action="store_true", help="also write an occupancy figure")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="R-KV over several lambda values")
    p.add_argument("trace")
    p.add_argument("--lambdas", type=_lambda_list, default=[0.0, 0.01, 0.1, 1.0])
    _add_cache_flags(p)
    p.add_argument("--jobs", type=_pos_int, default=1)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--prefix", default="sweep")
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="align the selections of several run reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--prefix", default="compare")
    p.add_argument("--no-plot", dest="plot", action="store_false")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("memcalc", help="analytical memory saving")
    p.add_argument("--gen-len", type=_nonneg_int)
    p.add_argument("--budget", type=_nonneg_int)
    p.add_argument("--buffer", type=_nonneg_int, default=128)
    p.add_argument("--alpha", type=_nonneg_int, default=8)
    p.add_argument("--batch", type=_pos_int, default=1)
    p.add_argument("--weights-gb", type=_nonneg_float, default=0.0)
    p.add_argument("--device-gb", type=_nonneg_float, default=0.0)
    p.add_argument("--table1", action="store_true", help="print the efficiency-table rows")
    p.add_argument("--csv", default=None, help="with --table1, also write CSV here")
    g = efficiency.LLAMA3_8B
    p.add_argument("--layers", type=_pos_int, default=g.n_layers)
    p.add_argument("--kv-heads", type=_pos_int, default=g.n_kv_heads)
    p.add_argument("--group-size", type=_pos_int, default=g.group_size)
    p.add_argument("--head-dim", type=_pos_int, default=g.head_dim)
    p.add_argument("--bytes-per-value", type=_pos_int, default=g.bytes_per_value)
    p.set_defaults(func=cmd_memcalc)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ConfigError, TraceFormatError, ValueError, OSError) as exc:
        print(f"rkv {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
