"""Monte-Carlo checks of three geometric / information-theoretic facts.

* distances between uniform points on the unit sphere concentrate around
  sqrt(2) with variance 1 / (2 dim);
* Gaussian random projections approximately preserve squared distances
  (Johnson-Lindenstrauss);
* mutual information is invariant under invertible reparametrization of
  the marginals, checked with the KSG k-nearest-neighbour estimator.

Each ``verify_*`` function returns a JSON-serializable report with the
inputs, statistics, predictions, frozen bounds and a pass flag.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist
from scipy.special import digamma

from .exceptions import DegenerateData, DuplicatePoints, ShapeMismatch
from .geometry import pairwise_distances, sample_uniform_sphere, upper_triangle

# Frozen acceptance bounds.
DISTANCE_MEAN_TOL = 0.01
DISTANCE_VAR_REL_TOL = 0.25
MI_ABS_TOL = 0.1
MI_DELTA_TOL = 0.1
JL_COVERAGE = 0.95
# 95% quantile of the max distortion over calibration seeds 1000..1019
# (N=100 uniform points on S^255 -> 64 dims), rounded up to 0.05.
# Reproduce with calibrate_jl_bound(); see tests/test_theory.py.
JL_MAX_DISTORTION_BOUND = 0.95
JL_CALIBRATION_SEEDS = tuple(range(1000, 1020))


@dataclass
class DistanceStats:
    dim: int
    n_points: int
    mean: float
    variance: float
    predicted_mean: float
    predicted_variance: float


def check_distance_asymptotics(dim, n_points, seed=None):
    """Upper-triangle distance moments of uniform unit-sphere samples."""
    if dim < 2 or n_points < 100:
        raise ValueError("need dim >= 2 and n_points >= 100")
    x = sample_uniform_sphere(n_points, dim, seed)
    r = upper_triangle(pairwise_distances(x))
    return DistanceStats(
        dim=dim,
        n_points=n_points,
        mean=float(r.mean()),
        variance=float(r.var(ddof=1)),
        predicted_mean=math.sqrt(2.0),
        predicted_variance=1.0 / (2.0 * dim),
    )


def jl_project(points, target_dim, seed=None):
    """Multiply by a Gaussian matrix with entries ``N(0, 1 / target_dim)``."""
    if target_dim < 1:
        raise ValueError("target_dim must be >= 1")
    x = np.asarray(points, dtype=float)
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((x.shape[1], target_dim)) / math.sqrt(target_dim)
    return x @ r


@dataclass
class JlReport:
    source_dim: int
    target_dim: int
    n_points: int
    max_distortion_eps: float
    distortions: np.ndarray

    @property
    def median_distortion(self):
        return float(np.median(self.distortions))


def jl_distortion(original, projected):
    """Per-pair ``| ||F(a)-F(b)||^2 / ||a-b||^2 - 1 |``."""
    original = np.asarray(original, dtype=float)
    projected = np.asarray(projected, dtype=float)
    if original.shape[0] != projected.shape[0]:
        raise ShapeMismatch("original and projected need the same number of rows")
    before = pdist(original, "sqeuclidean")
    if np.any(before == 0.0):
        raise DuplicatePoints("original points contain duplicates")
    after = pdist(projected, "sqeuclidean")
    dist = np.abs(after / before - 1.0)
    return JlReport(
        source_dim=original.shape[1],
        target_dim=projected.shape[1],
        n_points=original.shape[0],
        max_distortion_eps=float(dist.max()),
        distortions=dist,
    )


def _jl_trial(n_points, source_dim, target_dim, seed):
    ss = np.random.SeedSequence(seed)
    point_seed, map_seed = ss.spawn(2)
    x = sample_uniform_sphere(n_points, source_dim, point_seed)
    return jl_distortion(x, jl_project(x, target_dim, map_seed))


def calibrate_jl_bound(n_points=100, source_dim=256, target_dim=64,
                       seeds=JL_CALIBRATION_SEEDS, coverage=JL_COVERAGE):
    """Max-distortion quantile over calibration seeds, rounded up to 0.05."""
    worst = [_jl_trial(n_points, source_dim, target_dim, s).max_distortion_eps
             for s in seeds]
    q = float(np.quantile(worst, coverage, method="higher"))
    return math.ceil(q * 20.0 - 1e-9) / 20.0


@dataclass
class MiEstimate:
    value: float
    k_neighbors: int
    n_samples: int


def _as_samples(a):
    a = np.asarray(a, dtype=float)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def ksg_mutual_information(x, y, k=5):
    """Kraskov-Stoegbauer-Grassberger estimator (variant 1), in nats.

    ``I = psi(k) + psi(N) - < psi(n_x + 1) + psi(n_y + 1) >`` where
    ``n_x`` counts marginal neighbours strictly closer (max-norm) than the
    k-th joint neighbour.
    """
    x = _as_samples(x)
    y = _as_samples(y)
    n = x.shape[0]
    if y.shape[0] != n:
        raise ShapeMismatch("x and y must have the same number of samples")
    if not n > k >= 1:
        raise ValueError("need n_samples > k >= 1")
    for name, a in (("x", x), ("y", y)):
        if np.all(np.ptp(a, axis=0) == 0):
            raise DegenerateData(f"{name} has zero spread")

    joint = np.hstack([x, y])
    eps = cKDTree(joint).query(joint, k=k + 1, p=np.inf)[0][:, k]
    radius = np.nextafter(eps, 0.0)
    nx = cKDTree(x).query_ball_point(x, radius, p=np.inf, return_length=True) - 1
    ny = cKDTree(y).query_ball_point(y, radius, p=np.inf, return_length=True) - 1
    value = digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1))
    return MiEstimate(float(value), k, n)


def random_invertible_map(dim, rng, max_condition=10.0, kind="general"):
    """Random linear map with condition number <= ``max_condition``.

    ``general`` maps are Gaussian matrices rejection-sampled until every
    singular value lies in ``[1/sqrt(c), sqrt(c)]``, which bounds both the
    condition number and the overall scale (a 1x1 map always has condition
    number 1, so the scale bound is what keeps it away from 0).
    ``orthogonal`` maps come from the QR decomposition of a Gaussian matrix.
    """
    if kind == "identity":
        return np.eye(dim)
    if kind == "orthogonal":
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        return q * np.sign(np.diag(r))
    if kind != "general":
        raise ValueError(f"unknown map kind {kind!r}")
    lo, hi = 1.0 / math.sqrt(max_condition), math.sqrt(max_condition)
    while True:
        a = rng.standard_normal((dim, dim))
        sv = np.linalg.svd(a, compute_uv=False)
        if sv.min() >= lo and sv.max() <= hi:
            return a


def mi_invariance_check(x, y, map_seed=None, k=5, kind="general"):
    """Re-estimate MI after independent invertible linear maps on x and y."""
    x = _as_samples(x)
    y = _as_samples(y)
    rng = np.random.default_rng(map_seed)
    a = random_invertible_map(x.shape[1], rng, kind=kind)
    b = random_invertible_map(y.shape[1], rng, kind=kind)
    before = ksg_mutual_information(x, y, k)
    after = ksg_mutual_information(x @ a.T, y @ b.T, k)
    return {"before": before, "after": after, "delta": abs(before.value - after.value)}


def correlated_gaussians(n, rho, dim=1, seed=None):
    """``dim`` independent pairs with correlation ``rho``; MI = -dim/2 ln(1 - rho^2)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal((n, dim))
    return x, y


def gaussian_mi(rho, dim=1):
    return -0.5 * dim * math.log(1.0 - rho * rho)


def verify_distance(dim=512, n_points=2000, seeds=(0,)):
    rows = []
    for s in seeds:
        st = check_distance_asymptotics(dim, n_points, s)
        rows.append({
            "seed": s,
            "mean": st.mean,
            "variance": st.variance,
            "mean_error": abs(st.mean - st.predicted_mean),
            "variance_rel_error": abs(st.variance / st.predicted_variance - 1.0),
        })
    passed = all(r["mean_error"] < DISTANCE_MEAN_TOL
                 and r["variance_rel_error"] < DISTANCE_VAR_REL_TOL for r in rows)
    return {
        "check": "distance",
        "inputs": {"dim": dim, "n_points": n_points, "seeds": list(seeds)},
        "statistics": {
            "per_seed": rows,
            "mean_of_means": float(np.mean([r["mean"] for r in rows])),
            "mean_of_variances": float(np.mean([r["variance"] for r in rows])),
        },
        "predictions": {"mean": math.sqrt(2.0), "variance": 1.0 / (2.0 * dim)},
        "bounds": {"mean_abs": DISTANCE_MEAN_TOL, "variance_rel": DISTANCE_VAR_REL_TOL},
        "passed": bool(passed),
    }


def verify_jl(n_points=100, source_dim=256, target_dim=64, seeds=tuple(range(20)),
              sweep_dims=(16, 32, 64, 128), bound=JL_MAX_DISTORTION_BOUND):
    seeds = list(seeds)
    worst = [_jl_trial(n_points, source_dim, target_dim, s).max_distortion_eps
             for s in seeds]
    within = float(np.mean(np.asarray(worst) <= bound))
    medians = {}
    for t in sweep_dims:
        medians[t] = float(np.mean([
            _jl_trial(n_points, source_dim, t, s).median_distortion for s in seeds
        ]))
    ordered = [medians[t] for t in sorted(medians)]
    decreasing = all(a > b for a, b in zip(ordered, ordered[1:]))
    return {
        "check": "jl",
        "inputs": {"n_points": n_points, "source_dim": source_dim,
                   "target_dim": target_dim, "seeds": seeds,
                   "sweep_dims": list(sweep_dims)},
        "statistics": {
            "max_distortion_per_seed": worst,
            "fraction_within_bound": within,
            "median_distortion_by_target_dim": {str(t): m for t, m in medians.items()},
            "median_strictly_decreasing": decreasing,
        },
        "predictions": {"expected_sq_norm_ratio": 1.0},
        "bounds": {"max_distortion": bound, "coverage": JL_COVERAGE,
                   "calibration_seeds": [JL_CALIBRATION_SEEDS[0], JL_CALIBRATION_SEEDS[-1]]},
        "passed": bool(within >= JL_COVERAGE and decreasing),
    }


def verify_mi(n_samples=2000, rho=0.9, k=5, seeds=(0,), mixing_dim=2):
    """KSG vs. the closed form, and invariance under random linear maps.

    The pass flag covers the 1-D pair. Maps on ``mixing_dim``-D pairs are
    reported as a diagnostic only: with mixing matrices the KSG bias itself
    shifts by more than the tolerance.
    """
    rows = []
    for s in seeds:
        data_seed, map_seed, mix_data_seed, mix_map_seed = np.random.SeedSequence(s).spawn(4)
        x, y = correlated_gaussians(n_samples, rho, 1, data_seed)
        inv = mi_invariance_check(x, y, map_seed, k)
        row = {
            "seed": s,
            "estimate": inv["before"].value,
            "abs_error": abs(inv["before"].value - gaussian_mi(rho)),
            "after_map": inv["after"].value,
            "delta": inv["delta"],
        }
        if mixing_dim:
            xm, ym = correlated_gaussians(n_samples, rho, mixing_dim, mix_data_seed)
            mixed = mi_invariance_check(xm, ym, mix_map_seed, k)
            row["mixing_before"] = mixed["before"].value
            row["mixing_after"] = mixed["after"].value
            row["mixing_delta"] = mixed["delta"]
        rows.append(row)
    passed = all(r["abs_error"] < MI_ABS_TOL and r["delta"] < MI_DELTA_TOL for r in rows)
    return {
        "check": "mi",
        "inputs": {"n_samples": n_samples, "rho": rho, "k": k, "seeds": list(seeds),
                   "mixing_dim": mixing_dim},
        "statistics": {"per_seed": rows},
        "predictions": {"mi": gaussian_mi(rho),
                        "mi_mixing": gaussian_mi(rho, mixing_dim) if mixing_dim else None},
        "bounds": {"abs_error": MI_ABS_TOL, "delta": MI_DELTA_TOL},
        "passed": bool(passed),
    }


CHECKS = ("distance", "jl", "mi")


def run_checks(only=None, seeds=None, dim=512, n_points=2000, target_dim=64,
               n_samples=2000, k=5):
    """Run the selected checks; ``seeds`` is a count (JL defaults to 20)."""
    only = CHECKS if not only else tuple(only)
    reports = {}
    for name in only:
        if name == "distance":
            reports[name] = verify_distance(dim, n_points, tuple(range(seeds or 1)))
        elif name == "jl":
            reports[name] = verify_jl(target_dim=target_dim, seeds=tuple(range(seeds or 20)))
        elif name == "mi":
            reports[name] = verify_mi(n_samples, k=k, seeds=tuple(range(seeds or 1)))
        else:
            raise ValueError(f"unknown check {name!r}; choose from {CHECKS}")
    return reports
