"""Loss functions with analytic gradients.

Every loss returns a :class:`LossValue` holding the scalar value and the
gradient with respect to each differentiable input, keyed by input name.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConfigError, EmptyBatch, NoNegatives, ShapeMismatch
from .geometry import (
    pairwise_distances,
    pairwise_distances_backward,
    project_to_sphere,
    sphere_backward,
)

GRADIENT_FLOWS = ("classifier_only", "both")
UNSUPERVISED_KINDS = ("none", "info_nce", "pgc")


@dataclass
class SimilarityConfig:
    """Gaussian kernel ``C / (sigma sqrt(2 pi)) exp(-(d - mu)^2 / (2 sigma^2))``.

    ``normalizer`` defaults to ``sigma * sqrt(2 pi)`` so the kernel peaks at
    exactly 1; with ``mu=0, sigma=1/sqrt(2)`` it reduces to ``exp(-d^2)``.
    """

    mu: float = 0.0
    sigma: float = 1.0 / math.sqrt(2.0)
    normalizer: float = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.normalizer is None:
            self.normalizer = self.sigma * math.sqrt(2.0 * math.pi)
        if not self.normalizer > 0:
            raise ConfigError(f"normalizer must be positive, got {self.normalizer}")

    @property
    def peak(self):
        return self.normalizer / (self.sigma * math.sqrt(2.0 * math.pi))

    def validate(self):
        # the kernel attains its max over [0, 2] at the point closest to mu
        d = min(max(self.mu, 0.0), 2.0)
        top = self.peak * math.exp(-0.5 * ((d - self.mu) / self.sigma) ** 2)
        if top > 1.0 + 1e-12:
            raise ConfigError(
                f"similarity kernel reaches {top:.6g} > 1 on [0, 2]; "
                "lower the normalizer"
            )


@dataclass
class HcrConfig:
    similarity_g: SimilarityConfig = field(default_factory=SimilarityConfig)
    similarity_h: SimilarityConfig = field(default_factory=SimilarityConfig)
    clamp_eps: float = 1e-7
    gradient_flow: str = "classifier_only"
    weight: float = 1.0

    def __post_init__(self):
        if isinstance(self.similarity_g, dict):
            self.similarity_g = SimilarityConfig(**self.similarity_g)
        if isinstance(self.similarity_h, dict):
            self.similarity_h = SimilarityConfig(**self.similarity_h)
        if not 0.0 < self.clamp_eps < 0.5:
            raise ConfigError("clamp_eps must lie in (0, 0.5)")
        if self.gradient_flow not in GRADIENT_FLOWS:
            raise ConfigError(
                f"gradient_flow must be one of {GRADIENT_FLOWS}, got {self.gradient_flow!r}"
            )
        if self.weight < 0:
            raise ConfigError("HCR weight must be non-negative")


@dataclass
class LossValue:
    value: float
    grads: dict = field(default_factory=dict)

    def __float__(self):
        return float(self.value)


def _similarity_and_slope(d, cfg):
    z = (d - cfg.mu) / cfg.sigma
    s = cfg.peak * np.exp(-0.5 * z * z)
    return s, -s * z / cfg.sigma


def gaussian_similarity(d, cfg=None):
    """Entrywise Gaussian similarity of a distance matrix, in (0, 1]."""
    cfg = SimilarityConfig() if cfg is None else cfg
    cfg.validate()
    s, _ = _similarity_and_slope(np.asarray(d, dtype=float), cfg)
    return s


def hcr_loss(d_g, d_h, cfg=None):
    """Binary cross entropy between the similarities of two distance sets.

    ``p = sim_g(d_g)`` acts as the target distribution and ``q = sim_h(d_h)``
    as the prediction, averaged over pairs ``i < j``. The gradient w.r.t.
    ``d_g`` is always returned; the one w.r.t. ``d_h`` only when
    ``cfg.gradient_flow == "both"``. Gradients live on the strict upper
    triangle, the entries the loss actually reads.
    """
    cfg = HcrConfig() if cfg is None else cfg
    d_g = np.asarray(d_g, dtype=float)
    d_h = np.asarray(d_h, dtype=float)
    if d_g.shape != d_h.shape or d_g.ndim != 2 or d_g.shape[0] != d_g.shape[1]:
        raise ShapeMismatch(f"distance matrices differ: {d_g.shape} vs {d_h.shape}")
    n = d_g.shape[0]
    if n < 2:
        raise ShapeMismatch("HCR needs at least 2 points")
    cfg.similarity_g.validate()
    cfg.similarity_h.validate()

    iu = np.triu_indices(n, k=1)
    m = iu[0].size
    eps = cfg.clamp_eps
    s_p, slope_p = _similarity_and_slope(d_g[iu], cfg.similarity_g)
    s_q, slope_q = _similarity_and_slope(d_h[iu], cfg.similarity_h)
    p = np.clip(s_p, eps, 1.0 - eps)
    q = np.clip(s_q, eps, 1.0 - eps)

    value = float(np.mean(-p * np.log(q) - (1.0 - p) * np.log1p(-q)))

    # clipping kills the gradient outside (eps, 1 - eps)
    live_p = (s_p > eps) & (s_p < 1.0 - eps)
    dp = (np.log1p(-q) - np.log(q)) * slope_p * live_p / m
    grad_g = np.zeros_like(d_g)
    grad_g[iu] = dp
    grads = {"d_g": grad_g}
    if cfg.gradient_flow == "both":
        live_q = (s_q > eps) & (s_q < 1.0 - eps)
        dq = (-p / q + (1.0 - p) / (1.0 - q)) * slope_q * live_q / m
        grad_h = np.zeros_like(d_h)
        grad_h[iu] = dq
        grads["d_h"] = grad_h
    return LossValue(value, grads)


def cross_entropy(logits, labels, mask=None):
    """Mean softmax cross entropy over the rows selected by ``mask``."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match {b} rows")
    mask = np.ones(b, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != (b,):
        raise ShapeMismatch("mask must have one entry per row")
    n_sel = int(mask.sum())
    if n_sel == 0:
        raise EmptyBatch("mask selects no labeled examples")
    sel = np.flatnonzero(mask)
    y = labels[sel]
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")

    z = logits[sel]
    lse = logsumexp(z, axis=1)
    value = float(np.mean(lse - z[np.arange(n_sel), y]))

    probs = np.exp(z - lse[:, None])
    probs[np.arange(n_sel), y] -= 1.0
    grad = np.zeros_like(logits)
    grad[sel] = probs / n_sel
    return LossValue(value, {"logits": grad})


def _check_pair(queries, keys):
    q = np.asarray(queries, dtype=float)
    k = np.asarray(keys, dtype=float)
    if q.shape != k.shape or q.ndim != 2:
        raise ShapeMismatch(f"queries {q.shape} and keys {k.shape} must match")
    if q.shape[0] < 2:
        raise ShapeMismatch("contrastive losses need at least 2 rows")
    return q, k


def info_nce(queries, keys, tau=0.07):
    """InfoNCE where key ``i`` is the positive for query ``i``.

    All other keys in the batch are negatives.
    """
    if not tau > 0:
        raise ConfigError("tau must be positive")
    q, k = _check_pair(queries, keys)
    b = q.shape[0]
    s = q @ k.T / tau
    lse = logsumexp(s, axis=1)
    value = float(np.mean(lse - np.diag(s)))

    g = np.exp(s - lse[:, None])
    g[np.diag_indices(b)] -= 1.0
    g /= b * tau
    return LossValue(value, {"queries": g @ k, "keys": g.T @ q})


def pgc_loss(queries, keys, pseudo_labels, tau=0.07):
    """In-batch pseudo group contrast.

    Positives of query ``i`` are all keys sharing its pseudo-label (its own
    key included); negatives are the keys with a different pseudo-label.
    For each positive ``p`` the term is
    ``-log(e^{s_ip} / (e^{s_ip} + sum_n e^{s_in}))``, averaged over the
    positives and then over queries.
    """
    if not tau > 0:
        raise ConfigError("tau must be positive")
    q, k = _check_pair(queries, keys)
    b = q.shape[0]
    y = np.asarray(pseudo_labels)
    if y.shape != (b,):
        raise ShapeMismatch("pseudo_labels must be row-aligned with keys")
    pos = y[:, None] == y[None, :]
    neg = ~pos
    if not neg.any():
        raise NoNegatives("all pseudo-labels are identical")

    s = q @ k.T / tau
    neg_lse = logsumexp(np.where(neg, s, -np.inf), axis=1)
    # log of each positive's denominator
    log_z = np.logaddexp(s, neg_lse[:, None])
    n_pos = pos.sum(axis=1)
    terms = np.where(pos, log_z - s, 0.0)
    value = float(np.mean(terms.sum(axis=1) / n_pos))

    # d term_ip / d s_ip = w_ip - 1 ; d term_ip / d s_in = e^{s_in - log_z_ip}
    w = np.where(pos, np.exp(s - log_z), 0.0)
    g = np.where(pos, w - 1.0, 0.0)
    inv_z = logsumexp(np.where(pos, -log_z, -np.inf), axis=1)
    g = g + np.where(neg, np.exp(s + inv_z[:, None]), 0.0)
    g /= n_pos[:, None] * b * tau
    return LossValue(value, {"queries": g @ k, "keys": g.T @ q})


@dataclass
class ObjectiveConfig:
    """Weights and switches for the composite objective.

    ``hcr=None`` removes the regularizer entirely; a zero ``hcr.weight``
    skips its evaluation as well.
    """

    hcr: HcrConfig = field(default_factory=HcrConfig)
    unsupervised_kind: str = "info_nce"
    lambda_u: float = 1.0
    tau: float = 0.07

    def __post_init__(self):
        if isinstance(self.hcr, dict):
            self.hcr = HcrConfig(**self.hcr)
        if self.unsupervised_kind not in UNSUPERVISED_KINDS:
            raise ConfigError(
                f"unsupervised_kind must be one of {UNSUPERVISED_KINDS}, "
                f"got {self.unsupervised_kind!r}"
            )
        if self.lambda_u < 0:
            raise ConfigError("lambda_u must be non-negative")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")

    @property
    def hcr_active(self):
        return self.hcr is not None and self.hcr.weight > 0

    @property
    def unsupervised_active(self):
        return self.unsupervised_kind != "none" and self.lambda_u > 0


@dataclass
class CompositeLoss(LossValue):
    loss_s: float = 0.0
    loss_u: float = 0.0
    loss_hcr: float = 0.0


def composite_loss(logits, projections, labels, mask, cfg=None,
                   keys=None, pseudo_labels=None):
    """``L_s + lambda_u * L_u + weight * HCR`` on one batch.

    Parameters
    ----------
    logits : (B, C) raw classifier outputs of the first view.
    projections : (B, D_h) unit-norm projection-head outputs of the first view.
    labels, mask : observed labels and the labeled-row mask. When ``mask``
        selects nothing (or ``labels`` is None) the supervised term is 0.
    keys : (B, D_h) unit-norm projections of the second view; required when
        the unsupervised term is active.
    pseudo_labels : required for ``unsupervised_kind="pgc"``.

    Returns
    -------
    CompositeLoss
        Gradients under ``"logits"``, ``"projections"`` and ``"keys"``.
    """
    cfg = ObjectiveConfig() if cfg is None else cfg
    logits = np.asarray(logits, dtype=float)
    projections = np.asarray(projections, dtype=float)
    if logits.shape[0] != projections.shape[0]:
        raise ShapeMismatch("logits and projections must have the same rows")

    g_logits = np.zeros_like(logits)
    g_proj = np.zeros_like(projections)
    g_keys = None if keys is None else np.zeros_like(keys, dtype=float)
    loss_s = loss_u = loss_hcr = 0.0

    if labels is not None and (mask is None or np.any(mask)):
        ce = cross_entropy(logits, labels, mask)
        loss_s = ce.value
        g_logits += ce.grads["logits"]

    if cfg.unsupervised_active:
        if keys is None:
            raise ShapeMismatch("keys are required for the unsupervised term")
        if cfg.unsupervised_kind == "info_nce":
            lu = info_nce(projections, keys, cfg.tau)
        else:
            if pseudo_labels is None:
                raise ConfigError("pgc needs pseudo_labels")
            lu = pgc_loss(projections, keys, pseudo_labels, cfg.tau)
        loss_u = lu.value
        g_proj += cfg.lambda_u * lu.grads["queries"]
        g_keys += cfg.lambda_u * lu.grads["keys"]

    if cfg.hcr_active:
        w = cfg.hcr.weight
        unit_g = project_to_sphere(logits)
        d_g = pairwise_distances(unit_g)
        d_h = pairwise_distances(projections)
        hl = hcr_loss(d_g, d_h, cfg.hcr)
        loss_hcr = hl.value
        g_unit = pairwise_distances_backward(unit_g, d_g, hl.grads["d_g"])
        g_logits += w * sphere_backward(logits, g_unit)
        if "d_h" in hl.grads:
            g_proj += w * pairwise_distances_backward(projections, d_h, hl.grads["d_h"])

    weight = cfg.hcr.weight if cfg.hcr_active else 0.0
    lam = cfg.lambda_u if cfg.unsupervised_active else 0.0
    total = loss_s + lam * loss_u + weight * loss_hcr
    grads = {"logits": g_logits, "projections": g_proj}
    if g_keys is not None:
        grads["keys"] = g_keys
    return CompositeLoss(total, grads, loss_s=loss_s, loss_u=loss_u, loss_hcr=loss_hcr)
