"""Training loop for the composite objective, evaluation and distance diagnostics."""
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import AugmentSpec, augment
from .diffnet import (
    NetworkConfig,
    OptimizerState,
    backward,
    forward,
    init_params,
    sgd_momentum_step,
)
from .exceptions import ConfigError, EmptyDataset
from .geometry import (
    distance_histogram,
    ks_statistic,
    pairwise_distances,
    project_to_sphere,
    upper_triangle,
)
from .losses import HcrConfig, ObjectiveConfig, composite_loss

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    network: NetworkConfig
    hcr: HcrConfig = field(default_factory=HcrConfig)
    tau: float = 0.07
    lambda_u: float = 1.0
    unsupervised_kind: str = "info_nce"
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    precision: str = "float64"
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    # rows of the evaluation set used for the per-epoch KS diagnostic
    diagnostic_size: int = 256

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig(**self.network)
        if isinstance(self.hcr, dict):
            self.hcr = HcrConfig(**self.hcr)
        if isinstance(self.augment, dict):
            self.augment = AugmentSpec(**self.augment)
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.hcr is not None and self.hcr.weight > 0 and self.batch_size < 4:
            raise ConfigError("HCR needs batch_size >= 4")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.diagnostic_size < 8:
            raise ConfigError("diagnostic_size must be >= 8")
        # validates tau, lambda_u and unsupervised_kind
        self.objective()

    def objective(self):
        return ObjectiveConfig(hcr=self.hcr, unsupervised_kind=self.unsupervised_kind,
                               lambda_u=self.lambda_u, tau=self.tau)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["network"] = self.network.to_dict()
        d["hcr"] = None if self.hcr is None else asdict(self.hcr)
        d["augment"] = asdict(self.augment)
        d["augment"]["scale_range"] = list(self.augment.scale_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MetricsRecord:
    epoch: int
    loss_s: float
    loss_u: float
    loss_hcr: float
    loss_total: float
    train_acc: float
    test_acc: float
    ks_statistic: float


METRICS_HEADER = ("epoch", "loss_s", "loss_u", "loss_hcr", "loss_total",
                  "train_acc", "test_acc", "ks")


def metrics_to_csv(records, path=None):
    """Serialize metrics with 17 significant digits; returns the CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in records:
        writer.writerow([r.epoch] + [
            f"{v:.17g}" for v in (r.loss_s, r.loss_u, r.loss_hcr, r.loss_total,
                                  r.train_acc, r.test_acc, r.ks_statistic)
        ])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def predict_logits(params, x):
    return forward(params, x).logits


def evaluate(params, ds):
    """Accuracy of ``argmax(logits)`` against the true labels."""
    if len(ds) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    pred = np.argmax(predict_logits(params, ds.features), axis=1)
    return float(np.mean(pred == ds.true_labels))


def _fit_accuracy(params, ds):
    # accuracy on the labels the model is actually trained against
    if ds.n_labeled == 0:
        return float("nan")
    x = ds.features[ds.labeled_mask]
    pred = np.argmax(predict_logits(params, x), axis=1)
    return float(np.mean(pred == ds.observed_labels[ds.labeled_mask]))


@dataclass
class DistanceConsistency:
    hist_g: object
    hist_h: object
    ks_statistic: float
    d_g: np.ndarray
    d_h: np.ndarray


def distance_consistency(params, batch, bins=50):
    """Compare classifier and projection-head distance distributions on a batch.

    ``d_g`` comes from the sphere-projected logits and ``d_h`` from the
    projections; both are histogrammed over [0, 2] and compared with the
    two-sample KS statistic over their upper triangles.
    """
    batch = np.asarray(batch)
    if batch.shape[0] < 8:
        raise ValueError("distance_consistency needs a batch of at least 8 rows")
    rec = forward(params, batch)
    d_g = pairwise_distances(project_to_sphere(rec.logits))
    d_h = pairwise_distances(rec.projections)
    return DistanceConsistency(
        hist_g=distance_histogram(d_g, bins, (0.0, 2.0)),
        hist_h=distance_histogram(d_h, bins, (0.0, 2.0)),
        ks_statistic=ks_statistic(upper_triangle(d_g), upper_triangle(d_h)),
        d_g=d_g,
        d_h=d_h,
    )


def _check_datasets(cfg, *datasets):
    for ds in datasets:
        if ds is None:
            continue
        if ds.num_classes > cfg.network.num_classes:
            raise ConfigError(
                f"dataset has {ds.num_classes} classes but the network has "
                f"{cfg.network.num_classes} outputs"
            )
        if ds.features.shape[1] != cfg.network.input_dim:
            raise ConfigError(
                f"dataset has {ds.features.shape[1]} features, network expects "
                f"{cfg.network.input_dim}"
            )


def train(cfg, train_ds, test_ds=None, params=None, callback=None):
    """Optimize the composite objective with SGD + momentum.

    Each batch is augmented twice; the first view feeds the supervised
    term and HCR, both views feed the contrastive term. Returns
    ``(records, params)`` with one :class:`MetricsRecord` per epoch.
    ``test_acc`` is NaN when no ``test_ds`` is given; the KS diagnostic
    then uses the training features.
    """
    _check_datasets(cfg, train_ds, test_ds)
    dtype = PRECISIONS[cfg.precision]
    if params is None:
        params = init_params(cfg.network, seed=cfg.seed, dtype=dtype)
    else:
        params = params.astype(dtype)
    if cfg.epochs == 0:
        return [], params

    n = len(train_ds)
    hcr_on = cfg.hcr is not None and cfg.hcr.weight > 0
    if n < (4 if hcr_on else 2):
        raise ConfigError(f"training set too small ({n} rows)")
    objective = cfg.objective()
    fallback = ObjectiveConfig(hcr=cfg.hcr, unsupervised_kind="info_nce",
                               lambda_u=cfg.lambda_u, tau=cfg.tau)
    weight = cfg.hcr.weight if objective.hcr_active else 0.0
    lam = cfg.lambda_u if objective.unsupervised_active else 0.0
    needs_keys = objective.unsupervised_active

    state = OptimizerState(cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 1])
    eval_ds = test_ds if test_ds is not None else train_ds
    diag = eval_ds.features[: cfg.diagnostic_size]
    n_batches = max(1, math.ceil(n / cfg.batch_size))

    records = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for idx in np.array_split(order, n_batches):
            seeds = rng.integers(0, 2**63, size=2)
            xb = train_ds.features[idx]
            rec1 = forward(params, augment(xb, cfg.augment, seeds[0]).astype(dtype))
            rec2 = None
            if needs_keys:
                rec2 = forward(params, augment(xb, cfg.augment, seeds[1]).astype(dtype))

            obj = objective
            pseudo = None
            if cfg.unsupervised_kind == "pgc" and needs_keys:
                pseudo = np.argmax(rec1.logits, axis=1)
                if np.all(pseudo == pseudo[0]):
                    # no negatives in this batch; plain instance contrast instead
                    obj = fallback

            loss = composite_loss(
                rec1.logits, rec1.projections,
                train_ds.observed_labels[idx], train_ds.labeled_mask[idx], obj,
                keys=None if rec2 is None else rec2.projections,
                pseudo_labels=pseudo,
            )
            grads = backward(params, rec1, loss.grads["logits"], loss.grads["projections"])
            if rec2 is not None:
                g2 = backward(params, rec2, grad_projections=loss.grads["keys"])
                for k in grads:
                    grads[k] = grads[k] + g2[k]
            sgd_momentum_step(params, grads, state)
            sums += (loss.loss_s, loss.loss_u, loss.loss_hcr)

        loss_s, loss_u, loss_hcr = sums / n_batches
        record = MetricsRecord(
            epoch=epoch,
            loss_s=float(loss_s),
            loss_u=float(loss_u),
            loss_hcr=float(loss_hcr),
            loss_total=float(loss_s + lam * loss_u + weight * loss_hcr),
            train_acc=_fit_accuracy(params, train_ds),
            test_acc=evaluate(params, test_ds) if test_ds is not None else float("nan"),
            ks_statistic=distance_consistency(params, diag).ks_statistic,
        )
        records.append(record)
        logger.debug("epoch %d: %s", epoch, record)
        if callback is not None:
            callback(record, params)
    return records, params
