"""Result emission: delimited tables, round logs, and rendered figures.

Each scenario result is written as a results CSV in the benchmark table's
column order, a JSON-lines round log, plot-ready curve CSVs, a JSON dump of
the full result (so reports can be re-emitted without re-running), and PNG
figures rendered next to the delimited output.
"""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .scenarios import ScenarioResult, result_to_json_dict


class ReportError(OSError):
    pass


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.8g}"
    return str(x)


_RESULT_COLUMNS = {
    "0": ["pooled_clients", "mse", "rmse", "mae", "mape", "time_per_epoch_s"],
    "A": ["federation_size", "mse", "rmse", "mae", "mape", "time_per_round_s"],
    "B": ["federation_size", "mse", "rmse", "mae", "mape", "correlation_rate"],
    "C": ["federation_size", "mse", "rmse", "mae", "mape", "time_per_round_s"],
    "D": ["mode", "clip", "noise_scale", "effective_noise", "epsilon", "delta",
          "mse", "rmse", "mae", "mape", "time_per_round_s"],
    "E": ["federation_size", "mse", "rmse", "mae", "mape", "time_per_round_s",
          "train_mse", "train_rmse", "train_mae", "train_mape", "agg_seconds_per_round"],
}


def _row_values(scenario: str, row) -> list:
    m = row.metrics
    base = {
        "pooled_clients": row.federation_size,
        "federation_size": row.federation_size,
        "mse": m.mse, "rmse": m.rmse, "mae": m.mae, "mape": m.mape,
        "time_per_round_s": row.time_per_round_s,
        "time_per_epoch_s": row.time_per_round_s,
        "correlation_rate": row.correlation_rate,
        "mode": row.mode, "clip": row.clip, "noise_scale": row.noise_scale,
        "effective_noise": row.effective_noise, "epsilon": row.epsilon, "delta": row.delta,
        "agg_seconds_per_round": row.aggregation_seconds,
    }
    if row.train_metrics is not None:
        base.update(
            train_mse=row.train_metrics.mse, train_rmse=row.train_metrics.rmse,
            train_mae=row.train_metrics.mae, train_mape=row.train_metrics.mape,
        )
    return [base.get(col) for col in _RESULT_COLUMNS[scenario]]


def _write_csv(path: Path, header: list[str], rows: list[list]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in rows:
            writer.writerow([_fmt(v) for v in r])


def _write_curves_csv(path: Path, curves: dict[str, list[tuple[int, float]]]):
    """Wide plot-ready table: one round column, one value column per label."""
    labels = list(curves)
    rounds = sorted({r for pts in curves.values() for r, _ in pts})
    lookup = {lab: dict(pts) for lab, pts in curves.items()}
    rows = [[r] + [lookup[lab].get(r) for lab in labels] for r in rounds]
    _write_csv(path, ["round"] + labels, rows)


def _plot_curves(path: Path, curves: dict[str, list[tuple[int, float]]], ylabel: str, title: str):
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    for label, pts in curves.items():
        if not pts:
            continue
        xs, ys = zip(*pts)
        ax.plot(xs, ys, label=label, linewidth=1.2)
    ax.set_xlabel("communication round")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(curves) <= 12:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_summary(path: Path, result: ScenarioResult):
    labels = [row.label for row in result.rows]
    mapes = [row.metrics.mape for row in result.rows]
    fig, ax = plt.subplots(figsize=(7.5, 4.0))
    ax.bar(range(len(labels)), mapes, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("validation MAPE [%]")
    ax.set_title(f"Scenario {result.scenario}: final validation MAPE")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(result: ScenarioResult, output_dir, formats: tuple[str, ...] = ("csv", "jsonl", "figures", "json")) -> list[Path]:
    """Write all report artifacts for one scenario result; returns the paths."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create output directory {out}: {exc}") from exc
    if not out.is_dir():
        raise ReportError(f"{out} is not a directory")
    s = result.scenario
    prefix = out / f"scenario_{s}"
    written: list[Path] = []

    if "csv" in formats:
        path = Path(f"{prefix}_results.csv")
        _write_csv(path, _RESULT_COLUMNS[s], [_row_values(s, row) for row in result.rows])
        written.append(path)
        curves = {row.label: row.mape_curve for row in result.rows if row.mape_curve}
        if curves:
            path = Path(f"{prefix}_mape_curve.csv")
            _write_curves_csv(path, curves)
            written.append(path)
        clip_curves = {row.label: row.clip_curve for row in result.rows if row.clip_curve}
        if clip_curves:
            path = Path(f"{prefix}_clip_trajectory.csv")
            _write_curves_csv(path, clip_curves)
            written.append(path)

    if "jsonl" in formats and result.round_logs:
        path = Path(f"{prefix}_rounds.jsonl")
        with open(path, "w") as fh:
            for label in result.round_logs:
                for entry in result.round_logs[label]:
                    fh.write(json.dumps({"label": label, **entry}, sort_keys=True) + "\n")
        written.append(path)
        if result.secagg_transcripts:
            path = Path(f"{prefix}_secagg.jsonl")
            with open(path, "w") as fh:
                for label, transcripts in result.secagg_transcripts.items():
                    for entry in transcripts:
                        fh.write(json.dumps({"label": label, **entry}, sort_keys=True) + "\n")
            written.append(path)

    if "json" in formats:
        path = Path(f"{prefix}_result.json")
        with open(path, "w") as fh:
            json.dump(result_to_json_dict(result), fh, indent=1, sort_keys=True)
        written.append(path)
        path = Path(f"{prefix}_config.json")
        with open(path, "w") as fh:
            json.dump({"fingerprint": result.config_fingerprint, "seed": result.seed}, fh, sort_keys=True)
        written.append(path)

    if "figures" in formats:
        curves = {row.label: row.mape_curve for row in result.rows if row.mape_curve}
        if curves:
            path = Path(f"{prefix}_mape.png")
            _plot_curves(path, curves, "validation MAPE [%]",
                         f"Scenario {s}: validation MAPE per round")
            written.append(path)
        clip_curves = {row.label: row.clip_curve for row in result.rows if row.clip_curve}
        if clip_curves:
            path = Path(f"{prefix}_clip.png")
            _plot_curves(path, clip_curves, "clip norm",
                         "Adaptive clipping norm per round")
            written.append(path)
        path = Path(f"{prefix}_summary.png")
        _plot_summary(path, result)
        written.append(path)
    return written
