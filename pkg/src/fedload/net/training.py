"""Mini-batch training loops and early stopping.

`ClientTrainer` carries all per-client mutable state (optimizer moments and
the shuffle stream) across calls, so a federated schedule of R rounds of E
epochs replays exactly the same batch/update sequence as one local run of
R*E epochs. That equivalence is the backbone of the simulator's testing.
"""

import numpy as np

from ..data import SupervisedWindowSet
from ..seeding import rng_for
from .models import _Model
from .optim import AdamState, TrainConfig, adam_step
from .params import ParamVector


def early_stopper(history, patience: int) -> bool:
    """True when the best (lowest) value lies more than `patience` entries back."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    hist = list(history)
    if not hist:
        return False
    best_idx = int(np.argmin(hist))
    return (len(hist) - 1 - best_idx) > patience


class BatchStream:
    """Seeded epoch-wise shuffled batches over one window set.

    Each epoch draws a fresh permutation from the same generator, so the
    sequence of batches is a pure function of (windows, batch_size, seed)
    no matter how consumption is chunked.
    """

    def __init__(self, windows: SupervisedWindowSet, batch_size: int, seed: int):
        if len(windows) < 1:
            raise ValueError("empty window set")
        self.inputs = windows.inputs
        self.targets = windows.targets
        self.batch_size = int(batch_size)
        self.rng = rng_for(seed, "batches")
        self._order: np.ndarray | None = None
        self._cursor = 0

    @property
    def batches_per_epoch(self) -> int:
        n = self.inputs.shape[0]
        return (n + self.batch_size - 1) // self.batch_size

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        if self._order is None or self._cursor >= self._order.size:
            self._order = self.rng.permutation(self.inputs.shape[0])
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return self.inputs[idx], self.targets[idx]


class ClientTrainer:
    """Stateful local trainer: Adam moments and shuffle stream persist."""

    def __init__(self, model: _Model, windows: SupervisedWindowSet, config: TrainConfig, seed: int):
        self.model = model
        self.config = config
        self.stream = BatchStream(windows, config.batch_size, seed)
        self.adam = AdamState.zeros(model.layout.size)

    def train_epochs(self, params: ParamVector, epochs: int) -> tuple[ParamVector, list[float]]:
        """Run `epochs` full passes; returns final params and per-epoch mean loss."""
        if epochs < 1:
            raise ValueError("epochs must be >= 1")
        losses = []
        for _ in range(epochs):
            epoch_losses = []
            for _ in range(self.stream.batches_per_epoch):
                xb, yb = self.stream.next_batch()
                loss, grad = self.model.loss_and_gradient(params, xb, yb)
                params, self.adam = adam_step(params, grad, self.adam, self.config)
                epoch_losses.append(loss)
            losses.append(float(np.mean(epoch_losses)))
        return params, losses

    def train_step(self, params: ParamVector) -> tuple[ParamVector, float]:
        """One mini-batch Adam step (the FedSGD client granularity)."""
        xb, yb = self.stream.next_batch()
        loss, grad = self.model.loss_and_gradient(params, xb, yb)
        params, self.adam = adam_step(params, grad, self.adam, self.config)
        return params, loss

    def batch_gradient(self, params: ParamVector) -> tuple[float, ParamVector]:
        """Gradient of the next mini-batch without applying an update."""
        xb, yb = self.stream.next_batch()
        return self.model.loss_and_gradient(params, xb, yb)


def train_local(
    model: _Model,
    params: ParamVector,
    windows: SupervisedWindowSet,
    config: TrainConfig,
    epochs: int,
    seed: int | None = None,
) -> tuple[ParamVector, list[float]]:
    """Train from `params` for a fixed number of epochs on one window set."""
    trainer = ClientTrainer(model, windows, config, config.seed if seed is None else seed)
    return trainer.train_epochs(params, epochs)
