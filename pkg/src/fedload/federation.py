"""Federated training engine: server loop, simulated clients, aggregation.

Per round, the server broadcasts global parameters, a sampled subset of
clients trains locally, and the server applies the averaged result. Update
deltas (trained minus received weights) are formed wherever clipping or
secure aggregation needs them; plain averaging uses the clients' absolute
weights, which keeps a single-client federation bit-identical to local
training. Client optimizer state and batch shuffling persist across rounds
for the same reason.

Aggregation always reduces in sorted client-id order, making results
independent of scheduling and of dict insertion order.
"""

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import dp as dp_mod
from . import metrics as metrics_mod
from .accounting import MechanismEvent, PrivacyLedger, compose_and_convert
from .data import ClientDataset
from .net.models import DivergenceError, ModelSpec, build_model
from .net.optim import AdamState, TrainConfig, adam_step
from .net.params import LayoutError, ParamVector
from .net.training import ClientTrainer, early_stopper
from .secagg import SecAggConfig, SecAggSession, dequantize, quantize, run_secagg_round
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)


class FederationError(ValueError):
    pass


class RunError(RuntimeError):
    """Every participating client failed in one round."""


@dataclass(frozen=True)
class FederationConfig:
    """Federation-level hyperparameters."""

    total_clients: int
    participation_ratio: float = 1.0
    communication_rounds: int = 10
    local_epochs_per_round: int = 5
    algorithm: str = "fedavg"
    post_training_local_epochs: int = 0
    seed: int = 0
    early_stop_patience: int | None = None
    eval_every: int = 1

    def __post_init__(self):
        if self.algorithm not in ("fedavg", "fedsgd"):
            raise FederationError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 < self.participation_ratio <= 1.0:
            raise FederationError("participation ratio must be in (0,1]")
        if self.total_clients < 1 or self.participants_per_round < 1:
            raise FederationError("need at least one participating client")
        if self.communication_rounds < 1 or self.local_epochs_per_round < 1:
            raise FederationError("rounds and local epochs must be >= 1")
        if self.post_training_local_epochs < 0:
            raise FederationError("post-training epochs must be >= 0")

    @property
    def participants_per_round(self) -> int:
        return math.ceil(self.participation_ratio * self.total_clients)


@dataclass(frozen=True)
class RoundReport:
    """Per-round log entry; wall times are excluded from determinism checks."""

    round_index: int
    metrics: metrics_mod.MetricsReport | None
    wall_time_seconds: float
    participants: tuple[str, ...]
    clip_norm: float | None = None
    epsilon: float | None = None
    aggregation_seconds: float = 0.0
    mean_train_loss: float | None = None
    failed_clients: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        d = {
            "round": self.round_index,
            "participants": list(self.participants),
            "wall_time_seconds": self.wall_time_seconds,
            "aggregation_seconds": self.aggregation_seconds,
        }
        if self.metrics is not None:
            d.update(
                mse=self.metrics.mse, rmse=self.metrics.rmse,
                mae=self.metrics.mae, mape=self.metrics.mape,
            )
        if self.mean_train_loss is not None:
            d["mean_train_loss"] = self.mean_train_loss
        if self.clip_norm is not None:
            d["clip_norm"] = self.clip_norm
        if self.epsilon is not None:
            d["epsilon"] = self.epsilon
        if self.failed_clients:
            d["failed_clients"] = list(self.failed_clients)
        return d


@dataclass
class FedRunResult:
    final_params: ParamVector
    reports: list[RoundReport]
    final_metrics: metrics_mod.MetricsReport | None = None
    personalized_metrics: metrics_mod.MetricsReport | None = None
    clip_state: dp_mod.ClipState | None = None
    ledger: PrivacyLedger | None = None
    epsilon: float | None = None
    secagg_transcripts: list = field(default_factory=list)


def sample_clients(round_index: int, config: FederationConfig, client_ids) -> tuple[str, ...]:
    """Uniform sample without replacement, deterministic per (seed, round)."""
    ids = sorted(client_ids)
    k = config.participants_per_round
    if k > len(ids):
        raise FederationError(f"cannot sample {k} of {len(ids)} clients")
    if k == len(ids):
        return tuple(ids)
    rng = rng_for(config.seed, "sample", round_index)
    picked = rng.choice(len(ids), size=k, replace=False)
    return tuple(ids[i] for i in sorted(picked))


def average_updates(updates) -> ParamVector:
    """Unweighted element-wise mean, summed in sorted client-id order."""
    if isinstance(updates, dict):
        items = [updates[k] for k in sorted(updates)]
    else:
        items = list(updates)
    if not items:
        raise FederationError("no updates to average")
    layout = items[0].layout
    total = np.zeros(layout.size)
    for u in items:
        if u.layout != layout:
            raise LayoutError("updates with mismatched layouts")
        total += u.values
    return ParamVector(total / len(items), layout)


def evaluate_global(model, params: ParamVector, datasets: dict[str, ClientDataset],
                    split: str = "validation") -> metrics_mod.MetricsReport:
    """Pool every client's windows of one split and score the global model."""
    actual, predicted = [], []
    for cid in sorted(datasets):
        ws = getattr(datasets[cid], split)
        pred = model.forward(params, ws.inputs)
        predicted.append(np.asarray(pred).ravel())
        actual.append(ws.targets.ravel())
    return metrics_mod.evaluate(np.concatenate(actual), np.concatenate(predicted))


def _personalized_metrics(model, trainers, datasets, global_params, epochs) -> metrics_mod.MetricsReport:
    """Each client fine-tunes the global model locally, then scores its own split."""
    actual, predicted = [], []
    for cid in sorted(datasets):
        local, _ = trainers[cid].train_epochs(global_params, epochs)
        ws = datasets[cid].validation
        predicted.append(np.asarray(model.forward(local, ws.inputs)).ravel())
        actual.append(ws.targets.ravel())
    return metrics_mod.evaluate(np.concatenate(actual), np.concatenate(predicted))


class _DPState:
    """Carries clipping schedule, noise scale and the privacy ledger of a run."""

    def __init__(self, dp_config: dp_mod.DPConfig, fed_config: FederationConfig):
        self.config = dp_config
        self.q = fed_config.participation_ratio
        self.w = fed_config.total_clients
        if dp_config.adaptive:
            self.clip_state = dp_mod.ClipState(dp_config.clip.initial_clip)
            if dp_config.noise_scale > 0 and dp_config.clip.sigma_b > 0:
                self.noise_multiplier = dp_mod.effective_noise(
                    dp_config.noise_scale, dp_config.clip.sigma_b
                )
            else:
                if dp_config.noise_scale > 0:
                    log.warning(
                        "sigma_b=0: quantile estimation is unnoised and unaccounted; "
                        "using the nominal noise scale"
                    )
                self.noise_multiplier = dp_config.noise_scale
        else:
            self.clip_state = None
            self.noise_multiplier = dp_config.noise_scale
        self.ledger = PrivacyLedger()

    @property
    def clip_norm(self) -> float:
        if self.clip_state is not None:
            return self.clip_state.clip_norm
        return self.config.clip.clip_norm

    def clip_all(self, deltas: dict[str, ParamVector]) -> dict[str, bool]:
        flags = {}
        for cid in sorted(deltas):
            deltas[cid], flags[cid] = dp_mod.flat_clip(deltas[cid], self.clip_norm)
        return flags

    def noise_and_account(self, averaged: ParamVector, seed: int, round_index: int) -> tuple[ParamVector, float | None]:
        if self.noise_multiplier == 0.0:
            # no mechanism ran: nothing to add, nothing to account
            return averaged, None
        sens = dp_mod.sensitivity(self.clip_norm, self.q, self.w)
        sigma = dp_mod.noise_sigma(self.noise_multiplier, sens)
        noised = dp_mod.add_server_noise(averaged, sigma, seed, round_index)
        self.ledger = self.ledger.append(
            MechanismEvent(round_index, self.q, self.noise_multiplier)
        )
        epsilon, _ = compose_and_convert(self.ledger, self.config.delta)
        return noised, epsilon

    def adapt(self, flags: dict[str, bool], seed: int):
        if self.clip_state is None:
            return
        clip = self.config.clip
        ordered = [flags[cid] for cid in sorted(flags)]
        self.clip_state = dp_mod.adaptive_clip_update(
            self.clip_state, ordered, clip.sigma_b, clip.eta_c, clip.target_quantile, seed
        )


def _secagg_average(
    deltas: dict[str, ParamVector],
    secagg: SecAggConfig,
    seed: int,
    round_index: int,
    dropouts: set[str],
    transcripts: list,
) -> ParamVector:
    ids = tuple(sorted(deltas))
    session = SecAggSession(
        participant_ids=ids,
        threshold=secagg.threshold_for(len(ids)),
        master_seed=seed,
        round_index=round_index,
        prime=secagg.prime,
    )
    qspec = secagg.quantization(len(ids))
    codes = {cid: quantize(deltas[cid], qspec) for cid in ids}
    summed = run_secagg_round(session, codes, dropouts)
    transcripts.append({"round": round_index, "events": session.transcript})
    survivors = [cid for cid in ids if cid not in dropouts]
    total = dequantize(summed, qspec, len(survivors))
    layout = deltas[ids[0]].layout
    return ParamVector(total / len(survivors), layout)


def run_federated(
    datasets: dict[str, ClientDataset],
    model_spec: ModelSpec,
    train_config: TrainConfig,
    fed_config: FederationConfig,
    dp_config: dp_mod.DPConfig | None = None,
    secagg_config: SecAggConfig | None = None,
    secagg_dropouts: dict[int, set[str]] | None = None,
) -> FedRunResult:
    """Run the full federated schedule; dispatches on `fed_config.algorithm`."""
    if not datasets:
        raise FederationError("no client datasets")
    if len(datasets) != fed_config.total_clients:
        raise FederationError(
            f"{len(datasets)} datasets but total_clients={fed_config.total_clients}"
        )
    fedsgd = fed_config.algorithm == "fedsgd"
    seed = fed_config.seed
    model = build_model(model_spec)
    params = model.init_params(derive_seed(seed, "init"))
    trainers = {
        cid: ClientTrainer(model, datasets[cid].train, train_config, derive_seed(seed, "client", cid))
        for cid in datasets
    }
    server_adam = AdamState.zeros(model.layout.size) if fedsgd else None
    dp_state = _DPState(dp_config, fed_config) if dp_config is not None else None
    result = FedRunResult(final_params=params, reports=[])
    val_history: list[float] = []

    for r in range(fed_config.communication_rounds):
        t0 = time.perf_counter()
        participants = sample_clients(r, fed_config, datasets.keys())
        # FedAvg clients return absolute weights; FedSGD clients one batch gradient.
        updates: dict[str, ParamVector] = {}
        failed: list[str] = []
        train_losses: list[float] = []
        for cid in participants:
            try:
                if fedsgd:
                    loss, grad = trainers[cid].batch_gradient(params)
                    updates[cid] = grad
                    train_losses.append(loss)
                else:
                    new_params, losses = trainers[cid].train_epochs(
                        params, fed_config.local_epochs_per_round
                    )
                    updates[cid] = new_params
                    train_losses.extend(losses)
            except DivergenceError as exc:
                log.warning("round %d: client %s diverged (%s); dropping its update", r, cid, exc)
                failed.append(cid)
        if not updates:
            raise RunError(f"round {r}: all {len(participants)} participating clients failed")

        clip_norm = epsilon = None
        flags = None
        agg_t0 = time.perf_counter()
        if secagg_config is not None:
            # Secure aggregation runs on deltas, which clipping keeps inside
            # the quantizer's range.
            deltas = updates if fedsgd else {c: updates[c] - params for c in updates}
            if dp_state is not None:
                clip_norm = dp_state.clip_norm
                flags = dp_state.clip_all(deltas)
            dropouts = set((secagg_dropouts or {}).get(r, set()))
            averaged = _secagg_average(
                deltas, secagg_config, seed, r, dropouts, result.secagg_transcripts
            )
            if dp_state is not None:
                averaged, epsilon = dp_state.noise_and_account(averaged, seed, r)
            new_global = None if fedsgd else params + averaged
        elif fedsgd:
            if dp_state is not None:
                clip_norm = dp_state.clip_norm
                flags = dp_state.clip_all(updates)
            averaged = average_updates(updates)
            if dp_state is not None:
                averaged, epsilon = dp_state.noise_and_account(averaged, seed, r)
            new_global = None
        else:
            # Clip in delta space, then average in absolute space. A client
            # whose delta survives clipping untouched contributes its exact
            # trained weights, keeping the single-client federation
            # bit-identical to local training.
            absolutes = updates
            if dp_state is not None:
                clip_norm = dp_state.clip_norm
                absolutes, flags = {}, {}
                for cid in sorted(updates):
                    clipped, was_clipped = dp_mod.flat_clip(updates[cid] - params, clip_norm)
                    flags[cid] = was_clipped
                    absolutes[cid] = params + clipped if was_clipped else updates[cid]
            averaged = average_updates(absolutes)
            if dp_state is not None:
                averaged, epsilon = dp_state.noise_and_account(averaged, seed, r)
            new_global = averaged
        agg_seconds = time.perf_counter() - agg_t0

        if dp_state is not None:
            dp_state.adapt(flags, derive_seed(seed, "clip-adapt"))
        if fedsgd:
            params, server_adam = adam_step(params, averaged, server_adam, train_config)
        else:
            params = new_global

        report_metrics = None
        if fed_config.eval_every and (r % fed_config.eval_every == 0 or r == fed_config.communication_rounds - 1):
            report_metrics = evaluate_global(model, params, datasets)
            val_history.append(report_metrics.mse)
        result.reports.append(
            RoundReport(
                round_index=r,
                metrics=report_metrics,
                wall_time_seconds=time.perf_counter() - t0,
                participants=participants,
                clip_norm=clip_norm,
                epsilon=epsilon,
                aggregation_seconds=agg_seconds,
                mean_train_loss=float(np.mean(train_losses)) if train_losses else None,
                failed_clients=tuple(failed),
            )
        )
        if fed_config.early_stop_patience is not None and early_stopper(
            val_history, fed_config.early_stop_patience
        ):
            log.info("round %d: validation stalled, stopping early", r)
            break

    result.final_params = params
    result.final_metrics = evaluate_global(model, params, datasets)
    if dp_state is not None:
        result.clip_state = dp_state.clip_state
        result.ledger = dp_state.ledger
        result.epsilon = result.reports[-1].epsilon
    if fed_config.post_training_local_epochs > 0:
        result.personalized_metrics = _personalized_metrics(
            model, trainers, datasets, params, fed_config.post_training_local_epochs
        )
    return result


def run_fedavg(datasets, model_spec, train_config, fed_config, dp_config=None,
               secagg_config=None, secagg_dropouts=None) -> FedRunResult:
    if fed_config.algorithm != "fedavg":
        raise FederationError("fed_config.algorithm must be 'fedavg'")
    return run_federated(datasets, model_spec, train_config, fed_config,
                         dp_config, secagg_config, secagg_dropouts)


def run_fedsgd(datasets, model_spec, train_config, fed_config, dp_config=None,
               secagg_config=None, secagg_dropouts=None) -> FedRunResult:
    if fed_config.algorithm != "fedsgd":
        raise FederationError("fed_config.algorithm must be 'fedsgd'")
    return run_federated(datasets, model_spec, train_config, fed_config,
                         dp_config, secagg_config, secagg_dropouts)
