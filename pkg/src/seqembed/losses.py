"""Joint supervision losses over mixed identity/sequence batches.

The chief classification loss is a label-smoothed cross-entropy on logits
from either a plain linear head or a feature-normalized angular-margin
head. Identity samples (Z=0) use their one-hot target; sequence samples
(Z=1) have no identity class and use the uniform 1/C target instead, so
the same cross-entropy consumes both kinds of data.

The auxiliary loss is either the classic center loss (intra-class pull
only) or the discriminative sequence-agent loss, which additionally
hinges each feature away from a Bernoulli-sampled set of other class and
sequence centers. Identity samples are pushed from all other centers;
sequence samples only from identity centers. Both Euclidean and angular
(normalized) distances are supported, with hand-derived gradients.

Gradients flow to features and head weights only; centers follow their
own averaged update rule and are not differentiated through.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.polynomial import chebyshev as _cheb

from .errors import (
    ConfigurationError,
    LabelError,
    NumericError,
    ParameterError,
    ShapeError,
)
from .numerics import Rng, as_tensor, check_finite

# ---------------------------------------------------------------------------
# Configuration and result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DsaConfig:
    lam: float = 0.5          # intra/inter balance
    alpha: float = 2.0        # intra multiplier inside the hinge
    beta: float = 1.0         # hinge margin
    p: float = 1.0            # candidate-center sampling rate
    mode: str = "euclidean"   # euclidean | angular

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError("lam must be in [0, 1]")
        if self.alpha < 1.0:
            raise ParameterError("alpha must be >= 1")
        if self.beta < 0.0:
            raise ParameterError("beta must be >= 0")
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError("p must be in [0, 1]")
        if self.mode not in ("euclidean", "angular"):
            raise ParameterError(f"unknown distance mode {self.mode!r}")


@dataclass(frozen=True)
class AngularMarginConfig:
    delta: float = 32.0       # feature scale after normalization
    m: int = 4                # angular margin multiplier
    anneal: float = 0.0       # blend with the plain cosine; 0 = full margin

    def __post_init__(self):
        if self.delta <= 0:
            raise ParameterError("delta must be positive")
        if self.m < 1 or int(self.m) != self.m:
            raise ParameterError("m must be an integer >= 1")
        if self.anneal < 0:
            raise ParameterError("anneal must be >= 0")


@dataclass(frozen=True)
class JointLossConfig:
    eta: float = 0.04         # auxiliary loss weight
    lsr_enabled: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ParameterError("eta must be >= 0")


@dataclass
class LossOutput:
    loss: float
    grad: np.ndarray


@dataclass
class DsaLossOutput(LossOutput):
    intra_term: float = 0.0
    inter_term: float = 0.0


# ---------------------------------------------------------------------------
# Center table
# ---------------------------------------------------------------------------


@dataclass
class CenterTable:
    """One feature center per class/sequence. In angular mode every row is
    kept unit-norm; updates renormalize only rows that actually moved."""

    centers: np.ndarray
    mode: str = "euclidean"
    center_lr: float = 0.5

    def __post_init__(self):
        self.centers = as_tensor(self.centers)
        if self.centers.ndim != 2:
            raise ShapeError("centers must be (num_classes, dim)")
        if self.mode not in ("euclidean", "angular"):
            raise ParameterError(f"unknown center mode {self.mode!r}")
        if self.mode == "angular":
            norms = np.linalg.norm(self.centers, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise NumericError("angular centers must be unit rows")

    @classmethod
    def zeros(cls, num_classes: int, dim: int, center_lr: float = 0.5):
        return cls(np.zeros((num_classes, dim)), "euclidean", center_lr)

    @classmethod
    def random_unit(cls, num_classes: int, dim: int, rng: Rng,
                    center_lr: float = 0.5):
        rows = rng.normal_array((num_classes, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(rows, "angular", center_lr)

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


# ---------------------------------------------------------------------------
# Softmax and label-smoothed cross-entropy
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    logits = as_tensor(logits)
    check_finite(logits, "logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _lsr_terms(logits, labels, z_flags, num_identities):
    """Per-sample losses and logit gradients (p - q), shared by the scalar
    and batched entry points so Z=0 stays bit-identical to plain CE."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("logits must be (batch, classes)")
    k, c = logits.shape
    if c != num_identities:
        raise ShapeError(f"logits have {c} classes, expected {num_identities}")
    labels = np.asarray(labels, dtype=np.int64)
    z = np.asarray(z_flags, dtype=np.int64)
    ident = z == 0
    if np.any((labels[ident] < 0) | (labels[ident] >= c)):
        raise LabelError("identity sample with label outside [0, C)")
    logp = _log_softmax(logits)
    p = np.exp(logp)
    rows = np.arange(k)
    safe = np.where(ident, labels, 0)
    losses = np.where(ident, -logp[rows, safe], -logp.sum(axis=1) / c)
    q = np.where(ident[:, None], 0.0, 1.0 / c) * np.ones_like(p)
    q[rows[ident], labels[ident]] = 1.0
    return losses, p - q


def lsr_cross_entropy(logits, label, z, num_identities) -> LossOutput:
    """Single-sample form: loss -(1-Z) log p(y) - (Z/C) sum_i log p(i),
    gradient p - q. For Z=1 the label argument is ignored."""
    logits = as_tensor(logits).reshape(1, -1)
    losses, grads = _lsr_terms(logits, [0 if z else label], [z],
                               num_identities)
    return LossOutput(float(losses[0]), grads[0])


def lsr_cross_entropy_batch(logits, labels, z_flags, num_identities) -> LossOutput:
    """Batch-mean loss; gradient already divided by the batch size."""
    losses, grads = _lsr_terms(logits, labels, z_flags, num_identities)
    k = len(losses)
    return LossOutput(float(losses.mean()), grads / k)


def cross_entropy(logits, label) -> LossOutput:
    """Plain softmax cross-entropy: the Z=0 arithmetic path."""
    return lsr_cross_entropy(logits, label, z=0,
                             num_identities=np.asarray(logits).shape[-1])


# ---------------------------------------------------------------------------
# Angular-margin chief head
# ---------------------------------------------------------------------------


def _psi_coeffs(m: int):
    t = _cheb.Chebyshev.basis(m).coef
    return t, _cheb.chebder(t)


def _normalize_rows(x, what):
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise NumericError(f"zero-norm {what} cannot be normalized")
    return x / norms[:, None], norms


def _margin_target_logit(cos_t, cfg: AngularMarginConfig):
    """psi(theta) = (-1)^k cos(m theta) - 2k on theta in [k pi/m, (k+1) pi/m],
    blended with the plain cosine and scaled. Returns value and d/d cos."""
    tm, tmd = _psi_coeffs(cfg.m)
    c = np.clip(cos_t, -1.0, 1.0)
    theta = np.arccos(c)
    k = np.minimum((theta * cfg.m / np.pi).astype(np.int64), cfg.m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    psi = sign * _cheb.chebval(c, tm) - 2.0 * k
    dpsi = sign * _cheb.chebval(c, tmd)
    a = cfg.anneal
    value = cfg.delta * (psi + a * cos_t) / (1.0 + a)
    dvalue = cfg.delta * (dpsi + a) / (1.0 + a)
    return value, dvalue


class MarginHead:
    """Feature-normalized angular-margin classifier over the C identity
    classes. Sequence samples carry no target class, so their rows get
    plain scaled cosines on every class."""

    def __init__(self, num_classes: int, dim: int, cfg: AngularMarginConfig,
                 rng: Optional[Rng] = None):
        self.cfg = cfg
        self.weight = (rng.normal_array((num_classes, dim)) * 0.01
                       if rng is not None else np.zeros((num_classes, dim)))

    def params(self):
        return {"weight": self.weight}

    def forward(self, features, labels, z_flags, anneal: Optional[float] = None):
        cfg = self.cfg if anneal is None else replace(self.cfg, anneal=anneal)
        x = as_tensor(features)
        labels = np.asarray(labels, dtype=np.int64)
        z = np.asarray(z_flags, dtype=np.int64)
        xn, xnorm = _normalize_rows(x, "feature")
        wn, wnorm = _normalize_rows(self.weight, "weight row")
        cos = xn @ wn.T
        logits = cfg.delta * cos
        scale = np.full_like(cos, cfg.delta)  # d logit / d cos
        ident = np.flatnonzero(z == 0)
        if ident.size:
            tgt = labels[ident]
            if np.any((tgt < 0) | (tgt >= self.weight.shape[0])):
                raise LabelError("identity label outside the class-weight rows")
            val, dval = _margin_target_logit(cos[ident, tgt], cfg)
            logits[ident, tgt] = val
            scale[ident, tgt] = dval
        cache = (xn, xnorm, wn, wnorm, cos, scale)
        return logits, cache

    def backward(self, cache, grad_logits):
        xn, xnorm, wn, wnorm, cos, scale = cache
        h = grad_logits * scale  # d loss / d cos
        hc = (h * cos).sum(axis=1, keepdims=True)
        dx = (h @ wn - hc * xn) / xnorm[:, None]
        hct = (h * cos).sum(axis=0)[:, None]
        dw = (h.T @ xn - hct * wn) / wnorm[:, None]
        return dx, {"weight": dw}


def angular_margin_logits(features, class_weights, cfg: AngularMarginConfig,
                          labels, z_flags) -> np.ndarray:
    """Functional form of the margin head's logits."""
    head = MarginHead(np.asarray(class_weights).shape[0],
                      np.asarray(class_weights).shape[1], cfg)
    head.weight[...] = class_weights
    logits, _ = head.forward(features, labels, z_flags)
    return logits


class SoftmaxHead:
    """Plain linear classifier producing chief-loss logits."""

    def __init__(self, num_classes: int, dim: int, rng: Optional[Rng] = None):
        self.weight = (rng.normal_array((num_classes, dim)) * 0.01
                       if rng is not None else np.zeros((num_classes, dim)))
        self.bias = np.zeros(num_classes)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, features, labels=None, z_flags=None, anneal=None):
        x = as_tensor(features)
        return x @ self.weight.T + self.bias, x

    def backward(self, cache, grad_logits):
        x = cache
        dx = grad_logits @ self.weight
        return dx, {"weight": grad_logits.T @ x,
                    "bias": grad_logits.sum(axis=0)}


# ---------------------------------------------------------------------------
# Center loss
# ---------------------------------------------------------------------------


def center_loss(features, labels, table: CenterTable) -> LossOutput:
    """0.5 sum_k ||x_k - c_{y_k}||^2 over the batch; gradient x_k - c_{y_k}.
    Identity and sequence labels are treated uniformly."""
    x = as_tensor(features)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels < 0) | (labels >= table.num_classes)):
        raise LabelError("label outside the center table")
    diff = x - table.centers[labels]
    return LossOutput(0.5 * float(np.sum(diff * diff)), diff)


# ---------------------------------------------------------------------------
# Sequence-agent loss
# ---------------------------------------------------------------------------


def dsa_distance(x, c, mode: str) -> float:
    """Euclidean: ||x - c||^2 / 4. Angular: (1 - cos theta) / 2 on the
    normalized vectors."""
    x = as_tensor(x).reshape(-1)
    c = as_tensor(c).reshape(-1)
    if x.shape != c.shape:
        raise ShapeError("vectors must have equal length")
    if mode == "euclidean":
        d = x - c
        return float(d @ d) / 4.0
    if mode == "angular":
        nx, nc = np.linalg.norm(x), np.linalg.norm(c)
        if nx == 0.0 or nc == 0.0:
            raise NumericError("zero norm in angular distance")
        return float(1.0 - (x @ c) / (nx * nc)) / 2.0
    raise ParameterError(f"unknown distance mode {mode!r}")


def dsa_pair_loss(d_intra: float, d_n: float, cfg: DsaConfig,
                  is_target: bool) -> float:
    if d_intra < 0 or d_n < 0:
        raise ParameterError("distances must be non-negative")
    if is_target:
        return d_intra
    return max(cfg.alpha * d_intra - d_n + cfg.beta, 0.0)


def _candidate_mask(labels, z_flags, num_identities, num_classes):
    """cand[k, n]: may center n repel sample k? Own centers never;
    sequence samples are repelled by identity centers only."""
    k = len(labels)
    cand = np.ones((k, num_classes), dtype=bool)
    cand[np.arange(k), labels] = False
    seq_rows = np.asarray(z_flags) == 1
    cand[np.ix_(seq_rows, np.arange(num_identities, num_classes))] = False
    return cand


def dsa_loss(features, labels, z_flags, table: CenterTable, cfg: DsaConfig,
             rng: Optional[Rng] = None, num_identities: Optional[int] = None,
             mask: Optional[np.ndarray] = None) -> DsaLossOutput:
    """Per sample: lam * d(x, own center) plus, for each Bernoulli-included
    candidate center, the hinge max(alpha*d_own - d_n + beta, 0), averaged
    over the batch. The sampled sum is divided by (candidate count * p) so
    it estimates the full candidate sum unbiasedly.

    The inclusion mask is drawn from `rng` (one variate per (sample,
    center) pair, row-major; non-candidate draws are discarded) or can be
    passed explicitly for oracle tests. Centers receive no gradient here;
    they move via :func:`dsa_center_update`.
    """
    x = as_tensor(features)
    labels = np.asarray(labels, dtype=np.int64)
    z = np.asarray(z_flags, dtype=np.int64)
    k, dim = x.shape
    n_classes = table.num_classes
    if num_identities is None:
        num_identities = n_classes
    if np.any((labels < 0) | (labels >= n_classes)):
        raise LabelError("label outside the center table")
    if cfg.mode != table.mode:
        raise ConfigurationError(
            f"distance mode {cfg.mode!r} does not match center mode {table.mode!r}")

    cand = _candidate_mask(labels, z, num_identities, n_classes)
    cand_counts = cand.sum(axis=1)
    if np.any(cand_counts == 0):
        raise ConfigurationError("a sample has no candidate centers "
                                 "(single-class table)")

    c = table.centers
    rows = np.arange(k)
    if cfg.mode == "euclidean":
        sq = np.maximum(
            (x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * x @ c.T,
            0.0)
        d = sq / 4.0
    else:
        xn, xnorm = _normalize_rows(x, "feature")
        cn, _ = _normalize_rows(c, "center")
        cos = xn @ cn.T
        d = (1.0 - cos) / 2.0
    d_own = d[rows, labels]

    if mask is None:
        if cfg.p == 1.0:
            incl = np.ones((k, n_classes), dtype=bool)
        elif cfg.p == 0.0:
            incl = np.zeros((k, n_classes), dtype=bool)
        else:
            if rng is None:
                raise ParameterError("rng required when 0 < p < 1")
            incl = rng.uniform_array(k * n_classes).reshape(k, n_classes) < cfg.p
    else:
        incl = np.asarray(mask, dtype=bool)
        if incl.shape != (k, n_classes):
            raise ShapeError("mask must be (batch, num_classes)")

    hinge = cfg.alpha * d_own[:, None] - d + cfg.beta
    active = cand & incl & (hinge > 0.0)
    intra = cfg.lam * float(d_own.sum()) / k

    inter = 0.0
    grad = np.zeros_like(x)
    if cfg.mode == "euclidean":
        a_own = (x - c[labels]) / 2.0
    else:
        a_own = -(cn[labels] - (cos[rows, labels])[:, None] * xn) / \
            (2.0 * xnorm[:, None])
    grad += cfg.lam * a_own

    if cfg.lam < 1.0 and cfg.p > 0.0:
        coef = (1.0 - cfg.lam) / (cand_counts * cfg.p)  # per sample
        inter = float((coef * (np.where(active, hinge, 0.0)).sum(axis=1)).sum()) / k
        n_act = active.sum(axis=1).astype(np.float64)
        if cfg.mode == "euclidean":
            sum_an = (n_act[:, None] * x - active @ c) / 2.0
        else:
            cos_sum = (np.where(active, cos, 0.0)).sum(axis=1)
            sum_an = -((active @ cn) - cos_sum[:, None] * xn) / \
                (2.0 * xnorm[:, None])
        grad += coef[:, None] * (cfg.alpha * n_act[:, None] * a_own - sum_an)

    grad /= k
    loss = intra + inter
    check_finite(grad, "dsa gradient")
    return DsaLossOutput(loss, grad, intra_term=intra, inter_term=inter)


def dsa_center_update(features, labels, table: CenterTable) -> CenterTable:
    """Move each center toward the mean of its batch members:
    delta_n = sum_{y_k = n} (x_k - c_n) / 2 / (1 + count_n), scaled by the
    center learning rate. Centers without members stay untouched."""
    x = as_tensor(features)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any((labels < 0) | (labels >= table.num_classes)):
        raise LabelError("label outside the center table")
    n, dim = table.centers.shape
    counts = np.bincount(labels, minlength=n).astype(np.float64)
    sums = np.zeros((n, dim))
    np.add.at(sums, labels, x)
    delta = (sums - counts[:, None] * table.centers) / 2.0
    delta /= (1.0 + counts)[:, None]
    new = table.centers + table.center_lr * delta
    if table.mode == "angular":
        moved = counts > 0
        norms = np.linalg.norm(new[moved], axis=1)
        if np.any(norms == 0.0):
            raise NumericError("center update produced a zero row")
        new[moved] /= norms[:, None]
    return CenterTable(new, table.mode, table.center_lr)


# ---------------------------------------------------------------------------
# Joint combination
# ---------------------------------------------------------------------------


def joint_loss(chief: LossOutput, auxiliary: LossOutput,
               cfg: JointLossConfig) -> LossOutput:
    """total = chief + eta * auxiliary, gradients combined the same way."""
    if chief.grad.shape != auxiliary.grad.shape:
        raise ShapeError(
            f"gradient shapes differ: {chief.grad.shape} vs {auxiliary.grad.shape}")
    return LossOutput(chief.loss + cfg.eta * auxiliary.loss,
                      chief.grad + cfg.eta * auxiliary.grad)
