"""SGD-with-momentum training loop over the joint chief/auxiliary loss.

One iteration: assemble a batch, run the network forward, score the chief
classification loss (through the configured head) and the auxiliary loss
on the embedding, combine them, push the summed feature gradient back
through the network, take a momentum step on every parameter, then move
the feature centers toward their batch members. Everything is seeded, so
a (seed, config) pair fixes the whole trajectory bit for bit.
"""

from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint, TrainState, save_checkpoint
from .datasets import BatchPlan, Dataset, iterate_batches
from .errors import ConfigurationError, ParameterError
from .losses import (
    AngularMarginConfig,
    CenterTable,
    DsaConfig,
    JointLossConfig,
    LossOutput,
    MarginHead,
    SoftmaxHead,
    center_loss,
    dsa_center_update,
    dsa_loss,
    joint_loss,
    lsr_cross_entropy_batch,
)
from .network import EmbeddingModel, build_lenetpp, build_mlp
from .numerics import Rng, relative_error

THREADS_ENV = "SEQEMBED_THREADS"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    base_lr: float = 0.01
    momentum: float = 0.9
    lr_drop_iters: tuple[int, ...] = (14000,)
    lr_drop_factor: float = 10.0
    total_iters: int = 20000
    seed: int = 1
    chief: str = "softmax"            # softmax | angular_margin
    auxiliary: str = "none"           # none | center | dsa
    joint: JointLossConfig = JointLossConfig()
    dsa: DsaConfig = DsaConfig()
    margin: AngularMarginConfig = AngularMarginConfig()
    center_lr: float = 0.5
    weight_decay: float = 0.0
    sequence_fraction: Optional[float] = None
    checkpoint_every: int = 0         # 0 = final checkpoint only
    anneal_start: float = 1000.0      # margin blending schedule
    anneal_floor: float = 5.0
    anneal_rate: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ParameterError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must be in [0, 1)")
        if list(self.lr_drop_iters) != sorted(self.lr_drop_iters):
            raise ParameterError("lr_drop_iters must be ascending")
        if self.total_iters < 0 or self.batch_size < 1:
            raise ParameterError("bad iteration or batch count")
        if self.chief not in ("softmax", "angular_margin"):
            raise ParameterError(f"unknown chief loss {self.chief!r}")
        if self.auxiliary not in ("none", "center", "dsa"):
            raise ParameterError(f"unknown auxiliary loss {self.auxiliary!r}")


@dataclass
class MetricRow:
    iteration: int
    lr: float
    chief_loss: float
    aux_loss: float
    total_loss: float


@dataclass
class TrainResult:
    model: EmbeddingModel
    head: object
    centers: Optional[CenterTable]
    metrics: list[MetricRow]
    state: TrainState


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    drops = sum(1 for d in cfg.lr_drop_iters if iteration >= d)
    return cfg.base_lr / (cfg.lr_drop_factor ** drops)


def margin_anneal(cfg: TrainConfig, iteration: int) -> float:
    return max(cfg.anneal_floor,
               cfg.anneal_start / (1.0 + cfg.anneal_rate * iteration))


def sgd_momentum_step(params, grads, velocities, lr, momentum,
                      weight_decay=0.0):
    """v <- momentum * v - lr * (g + wd * p); p <- p + v, in place."""
    for arr, g, v in zip(params, grads, velocities):
        if weight_decay:
            g = g + weight_decay * arr
        v *= momentum
        v -= lr * g
        arr += v


def _collect_params(model, head):
    # params() and backward() dicts share insertion order, which keeps
    # these two flattenings aligned
    entries = [arr for _, _, arr in model.parameters()]
    entries.extend(head.params().values())
    return entries


def _flatten_grads(model_grads, head_grads):
    flat = []
    for g in model_grads:
        flat.extend(g.values())
    flat.extend(head_grads.values())
    return flat


def _make_head(cfg: TrainConfig, num_identities: int, dim: int, rng: Rng):
    if cfg.chief == "softmax":
        return SoftmaxHead(num_identities, dim, rng)
    return MarginHead(num_identities, dim, cfg.margin, rng)


def _make_centers(cfg: TrainConfig, num_classes: int, dim: int, rng: Rng):
    if cfg.auxiliary == "none":
        return None
    if cfg.auxiliary == "dsa" and cfg.dsa.mode == "angular":
        return CenterTable.random_unit(num_classes, dim, rng,
                                       center_lr=cfg.center_lr)
    return CenterTable.zeros(num_classes, dim, center_lr=cfg.center_lr)


def _forward_losses(model, head, centers, images, labels, z, cfg, C,
                    anneal, dsa_rng=None, dsa_mask=None):
    features, trace = model.forward(images)
    logits, hcache = head.forward(features, labels, z, anneal)
    chief = lsr_cross_entropy_batch(logits, labels, z, C)
    if cfg.auxiliary == "center":
        aux = center_loss(features, labels, centers)
    elif cfg.auxiliary == "dsa":
        aux = dsa_loss(features, labels, z, centers, cfg.dsa, rng=dsa_rng,
                       num_identities=C, mask=dsa_mask)
    else:
        aux = LossOutput(0.0, np.zeros_like(features))
    chief_dx, head_grads = head.backward(hcache, chief.grad)
    total = joint_loss(LossOutput(chief.loss, chief_dx), aux, cfg.joint)
    return features, trace, chief, aux, total, head_grads


def _prefetching(iterator):
    """Single-producer prefetch preserving plan order; enabled when
    SEQEMBED_THREADS allows more than one worker."""
    try:
        workers = int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        workers = 1
    if workers <= 1:
        return iterator
    q: queue.Queue = queue.Queue(maxsize=2)

    def produce():
        for item in iterator:
            q.put(item)

    threading.Thread(target=produce, daemon=True).start()

    def consume():
        while True:
            yield q.get()

    return consume()


def validate_configuration(cfg: TrainConfig, dataset: Dataset) -> None:
    if dataset.has_sequences and not cfg.joint.lsr_enabled:
        raise ConfigurationError(
            "dataset contains sequence samples but label smoothing is "
            "disabled; the chief loss would have to drop them silently")


def train(model: EmbeddingModel, dataset: Dataset, cfg: TrainConfig, *,
          head=None, centers: Optional[CenterTable] = None,
          start_state: Optional[TrainState] = None,
          checkpoint_path=None,
          on_metrics: Optional[Callable[[MetricRow], None]] = None
          ) -> TrainResult:
    """Run the training loop; returns the trained pieces plus the metric
    log. Pass `start_state` (with matching model/head/centers from a
    checkpoint) to continue a run exactly where it stopped."""
    validate_configuration(cfg, dataset)
    C = dataset.label_space.num_identities
    N = dataset.label_space.total
    dim = model.embedding_dim

    root = Rng(cfg.seed)
    if head is None:
        head = _make_head(cfg, C, dim, root.spawn(1))
    if centers is None:
        centers = _make_centers(cfg, N, dim, root.spawn(2))
    loss_rng = root.spawn(3)

    params = _collect_params(model, head)
    if start_state is None:
        state = TrainState(iteration=0, rng_state=loss_rng.getstate(),
                           velocities=[np.zeros_like(p) for p in params])
    else:
        state = start_state
        if len(state.velocities) != len(params):
            raise ConfigurationError("checkpoint velocities do not match model")
    loss_rng.setstate(state.rng_state)

    plan = BatchPlan(cfg.batch_size, cfg.sequence_fraction,
                     shuffle_seed=cfg.seed)
    stream = _prefetching(
        iterate_batches(dataset, plan, start_iteration=state.iteration))

    metrics: list[MetricRow] = []
    for t in range(state.iteration, cfg.total_iters):
        batch = next(stream)
        lr = learning_rate(cfg, t)
        anneal = margin_anneal(cfg, t) if cfg.chief == "angular_margin" else None
        features, trace, chief, aux, total, head_grads = _forward_losses(
            model, head, centers, batch.images, batch.labels, batch.sources,
            cfg, C, anneal, dsa_rng=loss_rng)
        _, model_grads = model.backward(trace, total.grad,
                                        need_input_grad=False)
        sgd_momentum_step(params, _flatten_grads(model_grads, head_grads),
                          state.velocities, lr, cfg.momentum,
                          cfg.weight_decay)
        if centers is not None:
            centers = dsa_center_update(features, batch.labels, centers)
        row = MetricRow(t, lr, chief.loss, aux.loss, total.loss)
        metrics.append(row)
        if on_metrics is not None:
            on_metrics(row)
        state.iteration = t + 1
        state.rng_state = loss_rng.getstate()
        if checkpoint_path and cfg.checkpoint_every and \
                (t + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path(t + 1),
                            Checkpoint(model, head, centers, state))
    return TrainResult(model, head, centers, metrics, state)


def write_metrics_csv(path, rows: list[MetricRow], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode) as fh:
        if not append:
            fh.write("iteration,lr,chief_loss,aux_loss,total_loss\n")
        for r in rows:
            fh.write(f"{r.iteration},{r.lr!r},{r.chief_loss!r},"
                     f"{r.aux_loss!r},{r.total_loss!r}\n")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradcheckTrial:
    description: str
    rel_err: float


@dataclass
class GradcheckReport:
    trials: list[GradcheckTrial] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((t.rel_err for t in self.trials), default=0.0)

    def summary(self) -> str:
        lines = [f"{t.rel_err:.3e}  {t.description}" for t in self.trials]
        lines.append(f"max relative error over {len(self.trials)} trials: "
                     f"{self.max_rel_err:.3e}")
        return "\n".join(lines)


def _gradcheck_scenario(trial: int, seed: int):
    rng = Rng(seed).spawn(trial)
    chief = ("softmax", "angular_margin")[rng.randint(2)]
    auxiliary = ("center", "dsa", "dsa")[rng.randint(3)]
    mode = ("euclidean", "angular")[rng.randint(2)]
    with_sequences = rng.randint(2) == 1
    p = (0.3, 1.0)[rng.randint(2)]
    return rng, chief, auxiliary, mode, with_sequences, p


def gradcheck(trials: int = 50, seed: int = 0, coords_per_trial: int = 4,
              h: float = 1e-5) -> GradcheckReport:
    """End-to-end analytic-vs-finite-difference comparison on randomized
    small configurations (chief x auxiliary x distance mode x Z mix x
    sampling rate). The Bernoulli candidate mask is frozen per trial so
    the differenced function is the sampled loss itself."""
    report = GradcheckReport()
    for trial in range(trials):
        rng, chief, auxiliary, mode, with_seq, p = _gradcheck_scenario(trial, seed)
        C = 3 + rng.randint(3)
        n_seq = 2 + rng.randint(2) if with_seq else 0
        N = C + n_seq
        dim = 2 + rng.randint(2)
        k = 4
        cfg = TrainConfig(
            chief=chief, auxiliary=auxiliary,
            dsa=DsaConfig(lam=0.5, p=p, mode=mode),
            margin=AngularMarginConfig(delta=4.0, m=4, anneal=0.0),
            joint=JointLossConfig(eta=0.3, lsr_enabled=True))
        model = build_mlp(rng.spawn(1), input_dim=3, hidden=(4,),
                          embedding_dim=dim)
        head = _make_head(cfg, C, dim, rng.spawn(2))
        if auxiliary == "dsa" and mode == "angular":
            centers = CenterTable.random_unit(N, dim, rng.spawn(3))
        else:
            centers = CenterTable(rng.spawn(3).normal_array((N, dim)))
        images = rng.spawn(4).normal_array((k, 3))
        if with_seq:
            labels = np.array([rng.randint(C) for _ in range(k // 2)]
                              + [C + rng.randint(n_seq) for _ in range(k - k // 2)])
            z = np.array([0] * (k // 2) + [1] * (k - k // 2))
        else:
            labels = np.array([rng.randint(C) for _ in range(k)])
            z = np.zeros(k, dtype=int)
        mask = rng.spawn(5).uniform_array(k * N).reshape(k, N) < p

        def total_loss():
            out = _forward_losses(model, head, centers, images, labels, z,
                                  cfg, C, anneal=0.0, dsa_mask=mask)
            return out[4].loss

        _, trace, chief_out, aux_out, total, head_grads = _forward_losses(
            model, head, centers, images, labels, z, cfg, C, anneal=0.0,
            dsa_mask=mask)
        _, model_grads = model.backward(trace, total.grad)
        params = _collect_params(model, head)
        grads = _flatten_grads(model_grads, head_grads)

        pick = rng.spawn(6)
        worst = 0.0
        for _ in range(coords_per_trial):
            pi = pick.randint(len(params))
            arr, g = params[pi].reshape(-1), grads[pi].reshape(-1)
            ci = pick.randint(arr.size)
            orig = arr[ci]
            arr[ci] = orig + h
            fp = total_loss()
            arr[ci] = orig - h
            fm = total_loss()
            arr[ci] = orig
            fd = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(g[ci], fd, floor=1e-7))
        report.trials.append(GradcheckTrial(
            f"trial {trial}: {chief}+{auxiliary}({mode}) "
            f"seq={with_seq} p={p}", worst))
    return report
