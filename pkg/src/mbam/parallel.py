"""Synchronous data-parallel SGD over K learner threads.

Each learner owns a replica of the network and therefore its own contiguous
gradient region. One training step:

1. every learner back-propagates ``sum(CE over its shard) / global_batch``;
2. barrier;
3. learner ``k`` reduces chunk ``k`` of the gradient vector over all regions in
   ascending learner order and writes the sum back into every region;
4. barrier (its action also hands out the next prefetched batch);
5. every learner applies the same SGD update to its replica.

Because the summation order is fixed, replicas stay bit-identical.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import Network, sgd_step, softmax_ce_loss
from .errors import ConfigError, ConsistencyError, DivergenceError, FreezeError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    epochs_flat: int = 10
    epochs_anneal: int = 10
    anneal_factor: float = 0.5
    per_learner_batch: int = 32
    n_learners: int = 4
    seed: int = 0
    check_every_step: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("per_learner_batch", "n_learners"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.epochs_flat < 0 or self.epochs_anneal < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not 0 < self.anneal_factor < 1:
            raise ConfigError("anneal_factor must lie in (0, 1)")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")

    @property
    def epochs(self) -> int:
        return self.epochs_flat + self.epochs_anneal

    @property
    def global_batch(self) -> int:
        return self.per_learner_batch * self.n_learners


@dataclass
class EpochLog:
    epoch: int
    lr: float
    mean_loss: float
    train_frame_acc: float
    wall_seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.lr:.8g}\t{self.mean_loss:.6f}\t{self.train_frame_acc:.4f}\t{self.wall_seconds:.3f}"


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Flat ``base_lr`` for ``epochs_flat`` epochs, then multiplied by
    ``anneal_factor`` once per epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.epochs_flat:
        return cfg.base_lr
    return cfg.base_lr * cfg.anneal_factor ** (epoch - cfg.epochs_flat + 1)


def partition_batch(batch: Sequence[int], k: int) -> List[np.ndarray]:
    """Split a global batch into ``k`` equal, order-preserving shards."""
    batch = np.asarray(batch)
    if k < 1 or len(batch) % k:
        raise ShapeError(f"global batch of {len(batch)} does not split into {k} equal shards")
    return np.split(batch, k)


def epoch_batches(n_items: int, global_batch: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Seeded shuffle of ``range(n_items)`` cut into full global batches (remainder dropped)."""
    order = np.random.default_rng([seed, epoch]).permutation(n_items)
    n_full = n_items // global_batch
    return [order[i * global_batch : (i + 1) * global_batch] for i in range(n_full)]


def allreduce_sum(regions: Sequence[np.ndarray]) -> None:
    """In-place sum-allreduce; summation runs in ascending learner order."""
    _check_regions(regions)
    total = regions[0].copy()
    for r in regions[1:]:
        total += r
    for r in regions:
        r[...] = total


def _check_regions(regions):
    if not regions:
        raise ShapeError("allreduce over zero regions")
    sizes = {r.shape for r in regions}
    if len(sizes) != 1:
        raise ShapeError(f"gradient regions differ in length: {sorted(sizes)}")


def _reduce_chunk(regions, lo, hi):
    total = regions[0][lo:hi].copy()
    for r in regions[1:]:
        total += r[lo:hi]
    for r in regions:
        r[lo:hi] = total


class _Prefetcher(threading.Thread):
    """Read-ahead queue that gathers global batches off the learners' path."""

    def __init__(self, dataset, batches, depth=2):
        super().__init__(daemon=True)
        self.dataset = dataset
        self.batches = batches
        self.queue = queue.Queue(maxsize=depth)
        self._stop_event = threading.Event()

    def run(self):
        for idx in self.batches:
            item = (self.dataset.windows(idx), self.dataset.labels[idx])
            while not self._stop_event.is_set():
                try:
                    self.queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if self._stop_event.is_set():
                return

    def stop(self):
        self._stop_event.set()


class SyncTrainer:
    def __init__(self, net: Network, cfg: TrainConfig):
        if net.frozen:
            raise FreezeError("cannot train a frozen network")
        self.net = net
        self.cfg = cfg
        self.replicas = [net.copy() for _ in range(cfg.n_learners)]
        for r in self.replicas:
            r.zero_grad()
        n = net.n_params
        k = cfg.n_learners
        bounds = np.linspace(0, n, k + 1).astype(int)
        self.chunks = list(zip(bounds[:-1], bounds[1:]))

    @property
    def regions(self):
        return [r.grads for r in self.replicas]

    def run_epoch(self, dataset, epoch: int, lr: float):
        cfg = self.cfg
        k = cfg.n_learners
        gb = cfg.global_batch
        batches = epoch_batches(len(dataset), gb, cfg.seed, epoch)
        if not batches:
            raise ShapeError(f"dataset of {len(dataset)} windows is smaller than one global batch ({gb})")
        prefetch = _Prefetcher(dataset, batches)
        prefetch.start()
        state = {"step": 0, "batch": prefetch.queue.get(), "loss": 0.0, "correct": 0}
        shard_loss = [0.0] * k
        shard_correct = [0] * k
        errors = []

        def after_reduce():
            step_loss = sum(shard_loss)
            if not np.isfinite(step_loss):
                raise DivergenceError(f"non-finite loss at batch {state['step']} of epoch {epoch}", state["step"])
            state["loss"] += step_loss
            state["correct"] += sum(shard_correct)
            state["step"] += 1
            if cfg.check_every_step:
                self._check_replicas(f"epoch {epoch} step {state['step']}")
            if state["step"] < len(batches):
                state["batch"] = prefetch.queue.get()

        post_backward = threading.Barrier(k)
        post_reduce = threading.Barrier(k, action=after_reduce)

        def learner(rank):
            net = self.replicas[rank]
            lo, hi = self.chunks[rank]
            try:
                for _ in range(len(batches)):
                    x, y = state["batch"]
                    shard = slice(rank * cfg.per_learner_batch, (rank + 1) * cfg.per_learner_batch)
                    logits = net.forward(x[shard], logits=True)
                    loss, grad = softmax_ce_loss(logits, y[shard], normalizer=gb)
                    shard_loss[rank] = loss
                    shard_correct[rank] = int((logits.argmax(axis=1) == y[shard]).sum())
                    net.backward(grad, input_grad=False)
                    post_backward.wait()
                    _reduce_chunk(self.regions, lo, hi)
                    post_reduce.wait()
                    sgd_step(net, lr)
            except threading.BrokenBarrierError:
                pass
            except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
                errors.append(exc)
                post_backward.abort()
                post_reduce.abort()

        threads = [threading.Thread(target=learner, args=(r,), daemon=True) for r in range(1, k)]
        for t in threads:
            t.start()
        learner(0)
        for t in threads:
            t.join()
        prefetch.stop()
        if errors:
            raise errors[0]
        n_steps = len(batches)
        return state["loss"] / n_steps, state["correct"] / (n_steps * gb)

    def _check_replicas(self, where: str):
        ref = self.replicas[0].params
        for rank, r in enumerate(self.replicas[1:], start=1):
            if not np.array_equal(ref, r.params):
                raise ConsistencyError(f"replica {rank} diverged from replica 0 at {where}")


def train(
    net: Network,
    dataset,
    cfg: TrainConfig = TrainConfig(),
    log_path: Optional[Path] = None,
    checkpoint_path: Optional[Path] = None,
    epoch_offset: int = 0,
    lr_override=None,
):
    """Train ``net`` in place with synchronous data parallelism.

    Returns ``(net, [EpochLog, ...])``. ``lr_override`` (a callable of the
    epoch index) replaces the default schedule.
    """
    trainer = SyncTrainer(net, cfg)
    history = []
    fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_override(epoch) if lr_override else lr_schedule(epoch, cfg)
            start = time.perf_counter()
            loss, acc = trainer.run_epoch(dataset, epoch + epoch_offset, lr)
            trainer._check_replicas(f"end of epoch {epoch}")
            entry = EpochLog(epoch, lr, loss, acc, time.perf_counter() - start)
            history.append(entry)
            log.info("epoch %s", entry.line())
            if fh:
                fh.write(entry.line() + "\n")
                fh.flush()
            if checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                from .formats import save_checkpoint

                net.params[...] = trainer.replicas[0].params
                save_checkpoint(net, checkpoint_path)
    finally:
        if fh:
            fh.close()
    net.params[...] = trainer.replicas[0].params
    net.zero_grad()
    return net, history
