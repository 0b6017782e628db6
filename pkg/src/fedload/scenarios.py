"""Scenario runner: assembles the modules into six benchmark scenarios.

Scenario 0 trains one central model on pooled client data; A is plain
FedAvg; B selects correlated federations first; C swaps in the heavier
convolutional architecture; D sweeps differential-privacy clipping and
noise levels; E runs FedAvg through secure aggregation.

Every scenario is driven by one config mapping (usually loaded from YAML),
is fully deterministic given the master seed, and returns a ScenarioResult
that the report module turns into CSV tables, round logs and figures.
"""

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
import numpy as np

from . import metrics as metrics_mod
from .clustering import correlation_matrix, select_federation
from .data import ClientDataset, SyntheticSpec, generate_synthetic, ingest_csv, prepare_client
from .dp import AdaptiveClip, DPConfig, FixedClip, clip_trajectory_rows
from .federation import FederationConfig, FedRunResult, evaluate_global, run_federated
from .net.models import ModelSpec, build_model
from .net.optim import TrainConfig
from .net.training import ClientTrainer, early_stopper
from .secagg import SecAggConfig
from .seeding import derive_seed

SCENARIOS = ("0", "A", "B", "C", "D", "E")

PAPER_FEDERATION_SIZES = [2, 5, 8, 11, 14, 17, 20, 23]
PAPER_NOISE_SCALES = [round(0.1 * k, 1) for k in range(1, 10)]
PAPER_FIXED_CLIPS = [round(0.1 * k, 1) for k in range(1, 8)]

_SCENARIO_ARCH = {
    "0": "encoder_decoder",
    "A": "encoder_decoder",
    "B": "encoder_decoder",
    "C": "conv_seq2seq",
    "D": "stacked_lstm",
    "E": "encoder_decoder",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated, scenario-ready settings assembled from a config mapping."""

    scenario: str
    seed: int = 0
    output_dir: str = "out"
    scale: float = 1.0
    csv_path: str | None = None
    half_hourly: bool = False
    synthetic: SyntheticSpec | None = None
    sizes: tuple[int, ...] = tuple(PAPER_FEDERATION_SIZES)
    lookback: int = 24
    horizon: int = 1
    train_fraction: float = 0.75
    model: ModelSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    rounds: int = 300
    local_epochs: int = 5
    participation_ratio: float = 1.0
    total_clients: int | None = None  # scenario D population size
    post_training_local_epochs: int = 0
    eval_every: int = 1
    early_stop_patience: int | None = None
    max_central_epochs: int = 300
    dp: dict | None = None
    secagg: SecAggConfig | None = None
    cluster_groups: tuple[str, ...] = ("H", "L")
    raw: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.csv_path is None and self.synthetic is None:
            raise ConfigError("a data source is required: csv path or synthetic spec")
        if self.scenario == "D" and self.dp is None:
            raise ConfigError("scenario D requires a dp section")
        if self.scenario == "E" and self.secagg is None:
            raise ConfigError("scenario E requires a secagg section")
        if self.scenario != "D" and not self.sizes:
            raise ConfigError("at least one federation size is required")

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True, default=str).encode()
        ).hexdigest()


def _scaled(value: int, scale: float, minimum: int = 1) -> int:
    return max(minimum, int(round(value * scale)))


def config_from_dict(raw: dict) -> ScenarioConfig:
    """Build a ScenarioConfig from a nested mapping, applying scenario defaults.

    The `scale` knob shrinks the round/epoch/population budgets uniformly so
    the paper-sized schedules stay runnable on a desk.
    """
    d = dict(raw)
    scenario = str(d.get("scenario", "A")).upper().strip()
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    scale = float(d.get("scale", 1.0))
    if not 0.0 < scale <= 1.0:
        raise ConfigError("scale must be in (0,1]")
    seed = int(d.get("seed", 0))

    data = d.get("data", {}) or {}
    synthetic = None
    if "synthetic" in data and data["synthetic"] is not None:
        synthetic = SyntheticSpec(**{**{"seed": seed}, **data["synthetic"]})
    csv_path = data.get("csv")

    model_d = dict(d.get("model", {}) or {})
    arch = model_d.pop("architecture", _SCENARIO_ARCH[scenario])
    lookback = int(d.get("lookback", 24))
    horizon = int(d.get("horizon", 1))
    model = ModelSpec(architecture=arch, input_len=lookback, output_len=horizon, **{
        k: tuple(v) if isinstance(v, list) else v for k, v in model_d.items()
    })

    train_d = dict(d.get("train", {}) or {})
    if scenario == "D":
        train_d.setdefault("batch_size", 64)
    train_d.setdefault("seed", seed)
    train = TrainConfig(**train_d)

    fed = dict(d.get("federation", {}) or {})
    rounds = int(fed.get("communication_rounds", 100 if scenario == "D" else 300))
    dp_d = dict(d.get("dp", {}) or {}) if (d.get("dp") or scenario == "D") else None
    secagg = None
    if d.get("secagg") is not None or scenario == "E":
        sa = dict(d.get("secagg", {}) or {})
        secagg = SecAggConfig(
            threshold=sa.get("threshold"),
            bits=int(sa.get("bits", 16)),
            clip_range=float(sa.get("clip_range", 1.0)),
        )

    sizes = tuple(int(s) for s in fed.get("sizes", PAPER_FEDERATION_SIZES))
    total_clients = fed.get("total_clients", 100 if scenario == "D" else None)
    if total_clients is not None:
        total_clients = _scaled(int(total_clients), scale, minimum=2)

    return ScenarioConfig(
        scenario=scenario,
        seed=seed,
        output_dir=str(d.get("output_dir", "out")),
        scale=scale,
        csv_path=csv_path,
        half_hourly=bool(data.get("half_hourly", False)),
        synthetic=synthetic,
        sizes=sizes,
        lookback=lookback,
        horizon=horizon,
        train_fraction=float(d.get("train_fraction", 0.75)),
        model=model,
        train=train,
        rounds=_scaled(rounds, scale),
        local_epochs=int(fed.get("local_epochs_per_round", 5)),
        participation_ratio=float(fed.get("participation_ratio", 0.1 if scenario == "D" else 1.0)),
        total_clients=total_clients,
        post_training_local_epochs=int(fed.get("post_training_local_epochs", 1 if scenario == "D" else 0)),
        eval_every=int(fed.get("eval_every", 1)),
        early_stop_patience=fed.get("early_stop_patience"),
        max_central_epochs=_scaled(int(d.get("max_central_epochs", 300)), scale),
        dp=dp_d,
        secagg=secagg,
        cluster_groups=tuple(d.get("clustering", {}).get("groups", ["H", "L"])) if d.get("clustering") else ("H", "L"),
        raw=raw,
    )


@dataclass
class ScenarioRow:
    """One result-table row: a federation size or one DP sweep point."""

    label: str
    metrics: metrics_mod.MetricsReport
    time_per_round_s: float
    federation_size: int | None = None
    correlation_rate: float | None = None
    mode: str | None = None  # D: clip_sweep | fixed | adaptive
    clip: float | None = None
    noise_scale: float | None = None
    effective_noise: float | None = None
    epsilon: float | None = None
    delta: float | None = None
    train_metrics: metrics_mod.MetricsReport | None = None
    aggregation_seconds: float | None = None
    mape_curve: list[tuple[int, float]] = field(default_factory=list)
    clip_curve: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class ScenarioResult:
    scenario: str
    seed: int
    config_fingerprint: str
    rows: list[ScenarioRow]
    round_logs: dict[str, list[dict]] = field(default_factory=dict)
    secagg_transcripts: dict[str, list[dict]] = field(default_factory=dict)


def load_datasets(cfg: ScenarioConfig) -> dict[str, ClientDataset]:
    """Materialize the client pool from CSV or the synthetic generator."""
    if cfg.csv_path is not None:
        series = ingest_csv(cfg.csv_path)
    else:
        series = generate_synthetic(cfg.synthetic)
    if not series:
        raise ConfigError("data source produced no clients")
    return {
        s.client_id: prepare_client(
            s, lookback=cfg.lookback, horizon=cfg.horizon,
            train_fraction=cfg.train_fraction, half_hourly=cfg.half_hourly,
        )
        for s in series
    }


def _mape_curve(run: FedRunResult) -> list[tuple[int, float]]:
    return [(r.round_index, r.metrics.mape) for r in run.reports if r.metrics is not None]


def _mean_round_time(run: FedRunResult) -> float:
    return float(np.mean([r.wall_time_seconds for r in run.reports]))


def _fed_config(cfg: ScenarioConfig, n_clients: int, seed: int, q: float | None = None) -> FederationConfig:
    return FederationConfig(
        total_clients=n_clients,
        participation_ratio=cfg.participation_ratio if q is None else q,
        communication_rounds=cfg.rounds,
        local_epochs_per_round=cfg.local_epochs,
        post_training_local_epochs=cfg.post_training_local_epochs,
        seed=seed,
        early_stop_patience=cfg.early_stop_patience,
        eval_every=cfg.eval_every,
    )


def _run_central(cfg: ScenarioConfig, datasets: dict[str, ClientDataset], seed: int):
    """Pool all clients' windows and train one model with early stopping."""
    from .data import SupervisedWindowSet

    pooled_train = SupervisedWindowSet(
        lookback=cfg.lookback,
        horizon=cfg.horizon,
        inputs=np.concatenate([datasets[c].train.inputs for c in sorted(datasets)]),
        targets=np.concatenate([datasets[c].train.targets for c in sorted(datasets)]),
    )
    model = build_model(cfg.model)
    params = model.init_params(derive_seed(seed, "init"))
    trainer = ClientTrainer(model, pooled_train, cfg.train, derive_seed(seed, "central"))
    history: list[float] = []
    curve: list[tuple[int, float]] = []
    epoch_times: list[float] = []
    logs: list[dict] = []
    best = (math.inf, params, None)
    for epoch in range(cfg.max_central_epochs):
        t0 = time.perf_counter()
        params, _ = trainer.train_epochs(params, 1)
        epoch_times.append(time.perf_counter() - t0)
        rep = evaluate_global(model, params, datasets)
        history.append(rep.mse)
        curve.append((epoch, rep.mape))
        logs.append({"round": epoch, "mse": rep.mse, "mape": rep.mape,
                     "wall_time_seconds": epoch_times[-1]})
        if rep.mse < best[0]:
            best = (rep.mse, params, rep)
        if early_stopper(history, cfg.train.early_stop_patience):
            break
    _, best_params, best_rep = best
    if best_rep is None:
        best_rep = evaluate_global(model, best_params, datasets)
    return best_rep, float(np.mean(epoch_times)), curve, logs


def _subset(datasets: dict[str, ClientDataset], ids) -> dict[str, ClientDataset]:
    return {cid: datasets[cid] for cid in ids}


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    datasets = load_datasets(cfg)
    pool_ids = sorted(datasets)
    result = ScenarioResult(
        scenario=cfg.scenario, seed=cfg.seed, config_fingerprint=cfg.fingerprint(), rows=[]
    )

    if cfg.scenario == "D":
        _run_scenario_d(cfg, datasets, result)
        return result

    if cfg.scenario == "B":
        groups = {cid: datasets[cid].acorn_group for cid in pool_ids}
        filtered = [cid for cid in pool_ids if groups[cid] in cfg.cluster_groups]
        if len(filtered) < max(cfg.sizes):
            raise ConfigError(
                f"{len(filtered)} clients in groups {cfg.cluster_groups}, "
                f"need {max(cfg.sizes)} for the largest federation"
            )
        corr = correlation_matrix(filtered, [datasets[c].train_series for c in filtered])

    for size in cfg.sizes:
        if size > len(pool_ids):
            raise ConfigError(f"federation size {size} exceeds pool of {len(pool_ids)}")
        row_seed = derive_seed(cfg.seed, "scenario", cfg.scenario, "size", size)
        label = str(size)
        correlation_rate = None
        if cfg.scenario == "B":
            selection = select_federation(corr, size, seed=row_seed)
            member_ids = list(selection.client_ids)
            correlation_rate = selection.correlation_rate
        else:
            member_ids = pool_ids[:size]
        members = _subset(datasets, member_ids)

        if cfg.scenario == "0":
            rep, epoch_time, curve, logs = _run_central(cfg, members, row_seed)
            result.rows.append(
                ScenarioRow(label=label, metrics=rep, time_per_round_s=epoch_time,
                            federation_size=size, mape_curve=curve)
            )
            result.round_logs[label] = logs
            continue

        secagg = cfg.secagg if cfg.scenario == "E" else None
        run = run_federated(
            members, cfg.model, cfg.train,
            _fed_config(cfg, size, row_seed),
            dp_config=None, secagg_config=secagg,
        )
        model = build_model(cfg.model)
        train_metrics = (
            evaluate_global(model, run.final_params, members, split="train")
            if cfg.scenario == "E" else None
        )
        result.rows.append(
            ScenarioRow(
                label=label,
                metrics=run.final_metrics,
                time_per_round_s=_mean_round_time(run),
                federation_size=size,
                correlation_rate=correlation_rate,
                train_metrics=train_metrics,
                aggregation_seconds=float(np.mean([r.aggregation_seconds for r in run.reports])),
                mape_curve=_mape_curve(run),
            )
        )
        result.round_logs[label] = [r.to_json_dict() for r in run.reports]
        if run.secagg_transcripts:
            result.secagg_transcripts[label] = run.secagg_transcripts
    return result


def _run_scenario_d(cfg: ScenarioConfig, datasets: dict[str, ClientDataset], result: ScenarioResult):
    """Fixed-clip sweep (no noise), fixed-clip noise sweep, adaptive noise sweep."""
    dp_d = cfg.dp or {}
    w = cfg.total_clients or 100
    pool_ids = sorted(datasets)
    if len(pool_ids) < w:
        raise ConfigError(f"scenario D needs {w} clients, pool has {len(pool_ids)}")
    members = _subset(datasets, pool_ids[:w])
    delta = float(dp_d.get("delta", 4e-3))
    fixed_clips = [float(s) for s in dp_d.get("fixed_clips", PAPER_FIXED_CLIPS)]
    noise_scales = [float(z) for z in dp_d.get("noise_scales", PAPER_NOISE_SCALES)]
    chosen_clip = float(dp_d.get("chosen_clip", 0.3))
    ada = dp_d.get("adaptive", {}) or {}
    participants = max(1, math.ceil(cfg.participation_ratio * w))
    sigma_b = float(ada.get("sigma_b", 0.05 * participants))
    parts = dp_d.get("sweeps", ["clip_sweep", "fixed", "adaptive"])

    def fed_run(dp_config: DPConfig, seed: int) -> FedRunResult:
        return run_federated(members, cfg.model, cfg.train, _fed_config(cfg, w, seed), dp_config=dp_config)

    if "clip_sweep" in parts:
        # The clip exploration isolates the clipping effect; no noise is added.
        for s_val in fixed_clips:
            seed = derive_seed(cfg.seed, "D", "clip_sweep", s_val)
            run = fed_run(DPConfig(noise_scale=0.0, delta=delta, clip=FixedClip(s_val)), seed)
            label = f"S={s_val}"
            result.rows.append(
                ScenarioRow(
                    label=label, metrics=run.personalized_metrics or run.final_metrics,
                    time_per_round_s=_mean_round_time(run), mode="clip_sweep",
                    clip=s_val, noise_scale=0.0, delta=delta, mape_curve=_mape_curve(run),
                )
            )
            result.round_logs[label] = [r.to_json_dict() for r in run.reports]

    if "fixed" in parts:
        for z in noise_scales:
            seed = derive_seed(cfg.seed, "D", "fixed", z)
            run = fed_run(DPConfig(noise_scale=z, delta=delta, clip=FixedClip(chosen_clip)), seed)
            label = f"z={z} fixed"
            result.rows.append(
                ScenarioRow(
                    label=label, metrics=run.personalized_metrics or run.final_metrics,
                    time_per_round_s=_mean_round_time(run), mode="fixed",
                    clip=chosen_clip, noise_scale=z, epsilon=run.epsilon, delta=delta,
                    mape_curve=_mape_curve(run),
                )
            )
            result.round_logs[label] = [r.to_json_dict() for r in run.reports]

    if "adaptive" in parts:
        from .dp import effective_noise

        clip = AdaptiveClip(
            initial_clip=float(ada.get("initial_clip", 0.1)),
            eta_c=float(ada.get("eta_c", 0.2)),
            target_quantile=float(ada.get("target_quantile", 0.5)),
            sigma_b=sigma_b,
        )
        for z in noise_scales:
            seed = derive_seed(cfg.seed, "D", "adaptive", z)
            run = fed_run(DPConfig(noise_scale=z, delta=delta, clip=clip), seed)
            label = f"z={z} adaptive"
            z_eff = effective_noise(z, sigma_b) if z > 0 else 0.0
            result.rows.append(
                ScenarioRow(
                    label=label, metrics=run.personalized_metrics or run.final_metrics,
                    time_per_round_s=_mean_round_time(run), mode="adaptive",
                    noise_scale=z, effective_noise=z_eff, epsilon=run.epsilon, delta=delta,
                    clip=run.clip_state.clip_norm if run.clip_state else None,
                    mape_curve=_mape_curve(run),
                    clip_curve=clip_trajectory_rows(run.clip_state) if run.clip_state else [],
                )
            )
            result.round_logs[label] = [r.to_json_dict() for r in run.reports]


def result_to_json_dict(result: ScenarioResult) -> dict:
    rows = []
    for r in result.rows:
        d = asdict(r)
        d["metrics"] = asdict(r.metrics)
        if r.train_metrics is not None:
            d["train_metrics"] = asdict(r.train_metrics)
        rows.append(d)
    return {
        "scenario": result.scenario,
        "seed": result.seed,
        "config_fingerprint": result.config_fingerprint,
        "rows": rows,
        "round_logs": result.round_logs,
        "secagg_transcripts": result.secagg_transcripts,
    }


def result_from_json_dict(d: dict) -> ScenarioResult:
    rows = []
    for rd in d["rows"]:
        rd = dict(rd)
        rd["metrics"] = metrics_mod.MetricsReport(**rd["metrics"])
        if rd.get("train_metrics"):
            rd["train_metrics"] = metrics_mod.MetricsReport(**rd["train_metrics"])
        rd["mape_curve"] = [tuple(p) for p in rd.get("mape_curve", [])]
        rd["clip_curve"] = [tuple(p) for p in rd.get("clip_curve", [])]
        rows.append(ScenarioRow(**rd))
    return ScenarioResult(
        scenario=d["scenario"],
        seed=d["seed"],
        config_fingerprint=d["config_fingerprint"],
        rows=rows,
        round_logs={k: list(v) for k, v in d.get("round_logs", {}).items()},
        secagg_transcripts={k: list(v) for k, v in d.get("secagg_transcripts", {}).items()},
    )
