"""Command-line entry point: run experiments, print cost tables, self-test.

Subcommands:
  run              execute an experiment, writing metrics and checkpoints
  cost             closed-form and measured cost table across masking rates
  selftest         gradient/sampler/cost verification, nonzero exit on failure
  partition-stats  per-client class histogram of the configured partition
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import _kernels, config as config_mod, cost, data, vit
from .errors import MaskfedError
from .orchestrator import BaselineExperiment, Experiment
from .rng import stream
from .selftest import run_selftest

RATIO_GRID = (0.0, 0.25, 0.5, 0.75, 0.95)


def _load_dataset(cfg: config_mod.ExperimentConfig, purpose: str) -> data.Dataset:
    ds = cfg.dataset
    if ds.kind == "file":
        return data.load_dataset_bin(ds.path)
    per = ds.train_per_class if purpose == "train" else ds.test_per_class
    rng = stream(cfg.fl.seed, f"toy-{purpose}")
    return data.make_toy_dataset(ds.classes, per, ds.image_size, ds.image_size,
                                 ds.noise, rng, channels=ds.channels,
                                 p=ds.patch_size)


def cmd_run(cfg: config_mod.ExperimentConfig, out_dir: str, threads: int,
            baseline: str) -> int:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        print(f"error: output directory {out} exists and is not empty; "
              f"refusing to overwrite", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_mod.render_config(cfg), encoding="utf-8")

    vcfg = cfg.vit_config()
    fl = cfg.fl_config()
    train_ds = _load_dataset(cfg, "train")
    test_ds = _load_dataset(cfg, "test")

    if baseline == "none":
        exp = Experiment(vcfg, fl, train_ds, test_ds, threads=threads)
    else:
        exp = BaselineExperiment(baseline, vcfg, fl, train_ds, test_ds,
                                 threads=threads)

    metrics_path = out / "metrics.jsonl"
    with metrics_path.open("w", encoding="utf-8") as fh:
        def emit(row):
            fh.write(row.to_json_line() + "\n")
            acc = "" if row.test_acc is None else f" acc={row.test_acc:.4f}"
            print(f"round {row.round_idx:3d} loss={row.mean_client_loss:.4f}{acc}")

        metrics, timings = exp.run(metrics_cb=emit)

    with (out / "timings.jsonl").open("w", encoding="utf-8") as fh:
        for i, t in enumerate(timings):
            fh.write(json.dumps({"round": i, "wallclock_s": t}) + "\n")

    ckpt_dir = out / "checkpoints"
    if baseline == "none":
        exp.save_checkpoints(ckpt_dir)

    summary = {
        "baseline": baseline,
        "final_test_acc": metrics[-1].test_acc,
        "total_bytes_up": sum(m.bytes_up for m in metrics),
        "total_bytes_down": sum(m.bytes_down for m in metrics),
        "total_client_macs": sum(m.client_macs for m in metrics),
        "rounds": len(metrics),
        "kernel_backend": _kernels.backend_name(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(f"done: final acc {summary['final_test_acc']}, "
          f"up {summary['total_bytes_up']} B, down {summary['total_bytes_down']} B")
    return 0


def cmd_cost(cfg: config_mod.ExperimentConfig) -> int:
    vcfg = cfg.vit_config()
    ci = cost.CostInput(n_t=vcfg.n_t, n_global=vcfg.n_global, n=vcfg.n, d=vcfg.d,
                        r_m=cfg.train.r_m, bandwidth_mbps=cfg.cost.bandwidth_mbps)
    table = cost.cost_ratio_table(ci, RATIO_GRID)
    measured0 = cost.measured_macs(vcfg, 0.0, "train")

    header = (f"{'r_m':>5} {'forward':>16} {'backward':>16} {'total':>16} "
              f"{'GFLOPs':>10} {'ratio':>8} {'measured':>16} {'m_ratio':>8} {'dev%':>7}")
    print(header)
    csv_lines = ["r_m,forward_units,backward_units,total_units,gflops,ratio,"
                 "measured_macs,measured_ratio,deviation_pct"]
    for r_m, ratio in table:
        c = cost.CostInput(n_t=ci.n_t, n_global=ci.n_global, n=ci.n, d=ci.d, r_m=r_m,
                           mac_to_flop=ci.mac_to_flop, bandwidth_mbps=ci.bandwidth_mbps)
        fwd, bwd, tot = cost.forward_cost(c), cost.backward_cost(c), cost.total_cost(c)
        gflops = tot * ci.mac_to_flop / 1e9
        measured = cost.measured_macs(vcfg, r_m, "train")
        m_ratio = measured / measured0
        dev = (m_ratio / ratio - 1.0) * 100 if ratio else 0.0
        print(f"{r_m:5.2f} {fwd:16.0f} {bwd:16.0f} {tot:16.0f} "
              f"{gflops:10.3f} {ratio:8.4f} {measured:16d} {m_ratio:8.4f} {dev:7.2f}")
        csv_lines.append(f"{r_m},{fwd:.0f},{bwd:.0f},{tot:.0f},{gflops:.6f},"
                         f"{ratio:.6f},{measured},{m_ratio:.6f},{dev:.3f}")

    params = cost.trainable_param_count(vcfg)
    breakdown = cost.param_breakdown(vcfg)
    print(f"\nclient-trainable params (local blocks + head): {params:,}"
          f"  [full phi+theta incl. embeddings: {breakdown['client_trainable_full']:,}]")

    # modeled round time for the configured geometry at the configured link
    kept = vit.kept_count(vcfg.n, cfg.train.r_m)
    bpf_record = 4 + 4 * kept + 4 * (kept + 1) * vcfg.d
    print(f"one BPF record at r_m={cfg.train.r_m}: {bpf_record} bytes; "
          f"modeled time for 1 MB up+down at {ci.bandwidth_mbps} Mbps: "
          f"{cost.comm_report(2 ** 20, 0, ci.bandwidth_mbps):.4f} s")
    print("\n" + "\n".join(csv_lines))
    return 0


def cmd_partition_stats(cfg: config_mod.ExperimentConfig, out_path: str | None) -> int:
    train_ds = _load_dataset(cfg, "train")
    rng = stream(cfg.fl.seed, "partition")
    spec = data.dirichlet_partition(train_ds.y, cfg.fl.k, cfg.fl.beta, rng,
                                    seed=cfg.fl.seed)
    hist = data.partition_histogram(spec, train_ds.y, cfg.dataset.classes)
    csv = data.histogram_csv(hist)
    if out_path:
        Path(out_path).write_text(csv, encoding="utf-8")
        print(f"wrote {out_path}")
    else:
        print(csv, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskfed", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment")
    run_p.add_argument("--config", required=True, help="path to a config file")
    run_p.add_argument("--out", required=True, help="output directory (must be empty)")
    run_p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="client-update thread pool size")
    run_p.add_argument("--baseline", choices=("none", "fed_full", "fed_head"),
                       default=None, help="override run.baseline from the config")

    cost_p = sub.add_parser("cost", help="print the cost table")
    cost_p.add_argument("--config", required=True)

    sub.add_parser("selftest", help="run built-in verification")

    part_p = sub.add_parser("partition-stats", help="per-client class histogram CSV")
    part_p.add_argument("--config", required=True)
    part_p.add_argument("--out", default=None, help="write CSV here instead of stdout")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "selftest":
            return run_selftest()
        cfg = config_mod.parse_config(args.config)
        if args.command == "run":
            baseline = args.baseline if args.baseline is not None else cfg.run.baseline
            return cmd_run(cfg, args.out, args.threads, baseline)
        if args.command == "cost":
            return cmd_cost(cfg)
        if args.command == "partition-stats":
            return cmd_partition_stats(cfg, args.out)
    except MaskfedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
