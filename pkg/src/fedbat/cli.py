"""Command-line front end.

Subcommands::

    fedbat run CONFIG [--set section.key=value ...] [--output-dir DIR]
    fedbat codec-bench [--sizes D1,D2,... | --hidden H1,H2 --input-dim D --classes C]
    fedbat partition [--scheme iid|dirichlet|label-shard ...] [--out stats.csv]
    fedbat theory [--clients N --dim D --heterogeneity H ...] [--out-dir DIR]

Exit codes: 0 success, 1 runtime failure (or a failed theory check), 2 invalid
configuration or arguments. ``FEDBAT_OUTPUT_DIR`` overrides the configured
output directory for ``run``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import codecs, datasets, theory
from .config import ConfigValidationError, dump_config, load_config
from .fed_engine import run_experiment
from .metrics import metrics_csv
from .nn import MLP

OUTPUT_DIR_ENV = "FEDBAT_OUTPUT_DIR"


def _err(msg: str) -> None:
    print(f"fedbat: {msg}", file=sys.stderr)


def _parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigValidationError(item, "override must look like section.key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, _parse_overrides(args.set))
    except ConfigValidationError as exc:
        _err(f"invalid config: {exc}")
        return 2
    out = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    msg_dir = out / "messages"

    def dump(msg):
        codecs.save_message(msg_dir / f"r{msg.round:05d}_c{msg.client_id:05d}.fbat", msg)

    on_message = None
    if cfg.experiment.dump_messages:
        msg_dir.mkdir(exist_ok=True)
        on_message = dump

    try:
        result = run_experiment(cfg, on_message=on_message)
    except Exception as exc:  # surfaced with round/client context by the engine
        _err(f"run failed: {exc}")
        return 1
    (out / "metrics.csv").write_text(metrics_csv(result.records, wall_time=cfg.experiment.record_wall_time))
    if result.records:
        last = result.records[-1]
        print(f"{cfg.experiment.algorithm}: {len(result.records)} rounds, "
              f"test_acc={last.test_accuracy:.4f}, uplink={last.cum_uplink_bytes} bytes -> {out}")
    else:
        print(f"{cfg.experiment.algorithm}: 0 rounds -> {out}")
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_codec_bench(args) -> int:
    if args.sizes:
        sizes = args.sizes
    else:
        sizes = MLP([args.input_dim, *args.hidden, args.classes]).layer_sizes
    rows = codecs.bench(sizes)
    breakdown = codecs.layer_breakdown(sizes)
    if args.json:
        print(json.dumps({"layer_sizes": sizes, "codecs": rows, "layers": breakdown}, indent=2))
        return 0
    print(f"model: {len(sizes)} layers, {sum(sizes)} parameters")
    print(f"{'codec':<16}{'bytes':>12}{'ratio':>10}")
    for r in rows:
        print(f"{r['codec']:<16}{r['bytes']:>12}{r['ratio']:>10.2f}")
    print()
    print(f"{'layer':<8}{'params':>10}{'raw':>12}{'binary':>10}")
    for r in breakdown:
        print(f"{r['layer']!s:<8}{r['params']:>10}{r['raw_bytes']:>12}{r['binary_bytes']:>10}")
    tot_raw = sum(r["raw_bytes"] for r in breakdown)
    tot_bin = sum(r["binary_bytes"] for r in breakdown)
    print(f"{'total':<8}{sum(sizes):>10}{tot_raw:>12}{tot_bin:>10}")
    return 0


def cmd_partition(args) -> int:
    try:
        if args.images:
            if not args.labels:
                _err("--images needs --labels")
                return 2
            data = datasets.load_idx(args.images, args.labels)
        else:
            data = datasets.synth_blobs(args.n, args.dim, args.classes, args.spread, args.seed)
        spec = datasets.PartitionSpec(args.scheme, args.clients, args.seed, args.beta, args.labels_per_client)
        shards = datasets.partition(data, spec)
    except ValueError as exc:
        _err(str(exc))
        return 2
    except OSError as exc:
        _err(str(exc))
        return 1
    text = datasets.partition_stats(shards, data).to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_theory(args) -> int:
    try:
        problem = theory.make_problem(args.clients, args.dim, args.heterogeneity, args.problem_seed)
    except ValueError as exc:
        _err(f"invalid problem: {exc}")
        return 2
    participation = None if args.participation == "full" else int(args.participation)
    if participation is not None and not 1 <= participation <= args.clients:
        _err("--participation must be 'full' or an integer in [1, clients]")
        return 2
    batch = None if args.batch_size == 0 else args.batch_size
    try:
        run = theory.run_theorem_mode(problem, args.tau, args.rounds, seeds=args.seeds,
                                      participation=participation, control=args.control,
                                      seed=args.seed, lr_scale=args.lr_scale, batch_size=batch,
                                      window=args.window)
    except theory.DivergenceError as exc:
        print(json.dumps({"passed": False, "diverged": True, "round": exc.round, "gap": exc.gap}))
        _err(f"diverged: {exc}")
        return 1
    band = (args.band_low, args.band_high)
    summary = run.summary(band)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gaps.csv").write_text(run.to_csv())
        (out / "summary.json").write_text(theory.summary_json(run, band))
    print(json.dumps(summary, sort_keys=True))
    verdict = "PASS" if summary["passed"] else "FAIL"
    print(f"{verdict}: slope {run.fit.slope:.3f} +/- {run.fit.halfwidth:.3f} "
          f"over rounds {run.fit.rounds[0]}-{run.fit.rounds[1]}, band [{band[0]}, {band[1]}]")
    return 0 if summary["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbat", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a federated experiment from a config file")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("codec-bench", help="uplink bytes per codec for a model")
    p.add_argument("--sizes", type=_int_list, help="explicit per-layer parameter counts")
    p.add_argument("--hidden", type=_int_list, default=[128, 64])
    p.add_argument("--input-dim", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_codec_bench)

    p = sub.add_parser("partition", help="partition a dataset and report per-client label statistics")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scheme", choices=["iid", "dirichlet", "label-shard"], default="iid")
    p.add_argument("--clients", type=int, default=30)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--labels-per-client", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("theory", help="measure the convergence rate of theorem-mode FedBAT")
    p.add_argument("--clients", type=int, default=8)
    p.add_argument("--dim", type=int, default=20)
    p.add_argument("--heterogeneity", type=float, default=1.0)
    p.add_argument("--problem-seed", type=int, default=0)
    p.add_argument("--tau", type=int, default=5)
    p.add_argument("--rounds", type=int, default=1000)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=2, help="rows per stochastic gradient; 0 for exact gradients")
    p.add_argument("--participation", default="full", help="'full' or clients sampled per round")
    p.add_argument("--control", action="store_true", help="disable binarization (FedAvg control)")
    p.add_argument("--lr-scale", type=float, default=1.0)
    p.add_argument("--window", type=float, default=0.9)
    p.add_argument("--band-low", type=float, default=-1.3)
    p.add_argument("--band-high", type=float, default=-0.7)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_theory)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
