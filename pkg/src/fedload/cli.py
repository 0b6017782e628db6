"""Command-line interface.

Subcommands: gen-data, preprocess, cluster, train-central, simulate,
accountant, report. Runs are driven by a YAML config file; any config key
can be overridden on the command line with --set dotted.key=value. The
FEDLOAD_OUTPUT_ROOT environment variable anchors relative output paths.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from .accounting import (
    DEFAULT_ORDERS,
    MechanismEvent,
    PrivacyLedger,
    compose_and_convert,
    per_order_breakdown,
)
from .clustering import correlation_matrix, select_federation
from .data import (
    SyntheticSpec,
    clean,
    generate_synthetic,
    ingest_csv,
    resample_hourly,
    write_csv,
)
from .report import emit_report
from .scenarios import config_from_dict, result_from_json_dict, run_scenario


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise SystemExit(f"config {path} must be a mapping")
    return data


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise SystemExit(f"--set expects dotted.key=value, got {item!r}")
        key, raw_value = item.split("=", 1)
        value = yaml.safe_load(raw_value)
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise SystemExit(f"cannot override {key!r}: {part!r} is not a mapping")
        node[parts[-1]] = value
    return config


def _output_dir(raw: str) -> Path:
    root = os.environ.get("FEDLOAD_OUTPUT_ROOT", "")
    path = Path(raw)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        n_clients=args.n_clients,
        days=args.days,
        daily_amplitude=args.daily_amplitude,
        weekly_amplitude=args.weekly_amplitude,
        noise_std=args.noise_std,
        shared_weight=args.shared_weight,
        seed=args.seed,
        acorn_groups=tuple(args.acorn_groups.split(",")),
    )
    series = generate_synthetic(spec)
    if args.prefix:
        from dataclasses import replace

        series = [replace(s, client_id=f"{args.prefix}{s.client_id}") for s in series]
    out = _output_dir(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, series, step_hours=1.0, append=args.append)
    print(f"wrote {len(series)} clients x {spec.days * 24} hourly readings to {out}")
    return 0


def _cmd_preprocess(args) -> int:
    series = ingest_csv(args.csv)
    treated = []
    for s in series:
        if args.half_hourly:
            s = resample_hourly(s)
        treated.append(clean(s))
    out = _output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "treated_hourly.csv"
    write_csv(csv_path, treated)
    summary = {
        s.client_id: {
            "acorn_group": s.acorn_group,
            "hours": len(s),
            "min_kwh": float(s.values.min()),
            "max_kwh": float(s.values.max()),
        }
        for s in treated
    }
    with open(out / "treatment_summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    print(f"treated {len(treated)} clients -> {csv_path}")
    return 0


def _cmd_cluster(args) -> int:
    from .data import prepare_client

    series = ingest_csv(args.csv)
    datasets = {
        s.client_id: prepare_client(s, lookback=args.lookback, half_hourly=args.half_hourly)
        for s in series
    }
    ids = sorted(datasets)
    groups = {cid: datasets[cid].acorn_group for cid in ids}
    corr = correlation_matrix(ids, [datasets[c].train_series for c in ids])
    out = _output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "correlation_matrix.csv", "w") as fh:
        fh.write("," + ",".join(corr.client_ids) + "\n")
        for i, cid in enumerate(corr.client_ids):
            fh.write(cid + "," + ",".join(f"{v:.6f}" for v in corr.matrix[i]) + "\n")
    group_filter = args.groups.split(",") if args.groups else None
    selection = select_federation(corr, args.size, group_filter=group_filter, groups=groups)
    with open(out / "federation_selection.json", "w") as fh:
        json.dump(selection.to_json_dict(), fh, indent=1, sort_keys=True)
    print(json.dumps(selection.to_json_dict()))
    return 0


def _run_configured_scenario(args, force_scenario: str | None = None) -> int:
    raw = _load_config(args.config)
    raw = _apply_overrides(raw, args.set)
    if force_scenario is not None:
        raw["scenario"] = force_scenario
    elif args.scenario is not None:
        raw["scenario"] = args.scenario
    cfg = config_from_dict(raw)
    result = run_scenario(cfg)
    out = _output_dir(cfg.output_dir)
    written = emit_report(result, out)
    for row in result.rows:
        print(
            f"scenario {result.scenario} [{row.label}]: "
            f"mse={row.metrics.mse:.6g} rmse={row.metrics.rmse:.6g} "
            f"mae={row.metrics.mae:.6g} mape={row.metrics.mape:.4g}%"
            + (f" epsilon={row.epsilon:.4g}" if row.epsilon is not None else "")
        )
    print(f"report written to {out} ({len(written)} files)")
    return 0


def _cmd_simulate(args) -> int:
    return _run_configured_scenario(args)


def _cmd_train_central(args) -> int:
    return _run_configured_scenario(args, force_scenario="0")


def _cmd_accountant(args) -> int:
    events = tuple(MechanismEvent(i, args.q, args.z) for i in range(args.rounds))
    ledger = PrivacyLedger(events=events, orders=DEFAULT_ORDERS)
    eps, alpha = compose_and_convert(ledger, args.delta)
    print(f"epsilon={eps:.6g} delta={args.delta:g} best_alpha={alpha:g}")
    rows = per_order_breakdown(ledger, args.delta)
    target = open(args.out, "w") if args.out else sys.stdout
    try:
        target.write("alpha,total_rdp,epsilon\n")
        for a, rdp, e in rows:
            target.write(f"{a:g},{rdp:.8g},{e:.8g}\n")
    finally:
        if args.out:
            target.close()
    return 0


def _cmd_report(args) -> int:
    with open(args.result) as fh:
        result = result_from_json_dict(json.load(fh))
    written = emit_report(result, _output_dir(args.out))
    print(f"re-emitted {len(written)} files to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedload",
        description="Privacy-preserving federated load forecasting simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic consumption CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--n-clients", type=int, default=10)
    p.add_argument("--days", type=int, default=28)
    p.add_argument("--daily-amplitude", type=float, default=1.0)
    p.add_argument("--weekly-amplitude", type=float, default=0.3)
    p.add_argument("--noise-std", type=float, default=0.05)
    p.add_argument("--shared-weight", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--acorn-groups", default="H,L", help="comma-separated labels cycled over clients")
    p.add_argument("--prefix", default="", help="client id prefix, for appending distinct pools")
    p.add_argument("--append", action="store_true")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("preprocess", help="run the data treatment chain on a CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--half-hourly", action="store_true", help="input cadence is half-hourly")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("cluster", help="correlation matrix and federation selection")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--groups", default=None, help="comma-separated group labels to pre-filter")
    p.add_argument("--lookback", type=int, default=24)
    p.add_argument("--half-hourly", action="store_true")
    p.set_defaults(func=_cmd_cluster)

    for name, helptext in [
        ("simulate", "run a configured scenario"),
        ("train-central", "run the centralized benchmark (scenario 0)"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--scenario", default=None, help="override the config's scenario id")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. --set federation.sizes=[2,5]")
        p.set_defaults(func=_cmd_simulate if name == "simulate" else _cmd_train_central)

    p = sub.add_parser("accountant", help="compose subsampled-Gaussian rounds into (epsilon, delta)")
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--z", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--out", default=None, help="write the per-order CSV here instead of stdout")
    p.set_defaults(func=_cmd_accountant)

    p = sub.add_parser("report", help="re-emit report files from a saved result JSON")
    p.add_argument("--result", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
