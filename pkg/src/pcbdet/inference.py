"""Detection inference: per-class statistics, Gamma null, order-statistic test.

Each putative source class yields a combined statistic r = w * r_t / r_s that
is abnormally large only when a genuine backdoor pair exists: r_s small (a
common location close to source clouds works), r_t large (that location is
not simply inside the target class), and w large (per-sample locations agree
with the group location). Classes voting for the same target as the top
statistic are excluded from the null fit to absorb collateral damage, and the
verdict comes from the maximum order statistic p-value under a fitted Gamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from pcbdet.geometry import as_point, point_to_cloud_distance

__all__ = [
    "ClassStatistics",
    "NullFit",
    "PValue",
    "DetectionReport",
    "DegenerateNullError",
    "compute_r_s",
    "compute_r_t",
    "compute_z",
    "compute_w",
    "combined_statistic",
    "ablation_statistics",
    "exclusion_set",
    "fit_gamma_null",
    "gamma_cdf",
    "order_statistic_pvalue",
    "detect",
]

# Substituted for a vanishing source-distance denominator.
DENOM_EPS = 1e-9

# Values are clamped up to this floor before the Gamma fit.
FIT_FLOOR = 1e-12

# Smallest positive double; smaller p-values are flagged as underflow.
UNDERFLOW_LIMIT = 1e-323

MIN_FIT_SIZE = 4

VERDICT_ATTACKED = "attacked"
VERDICT_CLEAN = "clean"
VERDICT_INCONCLUSIVE = "inconclusive"


class DegenerateNullError(ValueError):
    """Null fit impossible: all statistics identical after clamping."""


@dataclass
class ClassStatistics:
    source: int
    t_hat: int | None  # None when the group estimate failed
    r_s: float
    r_t: float
    z: float
    w: float
    r: float

    @property
    def failed(self) -> bool:
        return self.t_hat is None


@dataclass
class NullFit:
    shape: float
    scale: float
    excluded: tuple  # sorted class indices left out of the fit
    values: np.ndarray  # the clamped statistics the fit used


@dataclass
class PValue:
    pv: float
    log_pv: float
    underflow: bool

    def display(self) -> str:
        return "u.f." if self.underflow else f"{self.pv:.3g}"


@dataclass
class DetectionReport:
    stats: list  # ClassStatistics per class
    fit: NullFit | None
    s_max: int
    pvalue: PValue | None
    phi: float
    verdict: str
    inferred_target: int | None
    num_classes: int
    num_excluded: int


def compute_r_s(c_hat, clouds) -> float:
    """Mean distance from the estimated location to the source-class clouds."""
    c = as_point(c_hat)
    if len(clouds) < 1:
        raise ValueError("need at least one cloud")
    return float(np.mean([point_to_cloud_distance(c, X) for X in clouds]))


def compute_r_t(c_hat, clouds) -> float:
    """Mean distance from the estimated location to the voted target's clouds."""
    return compute_r_s(c_hat, clouds)


def compute_z(group_center, samplewise_centers) -> float:
    """Average cosine similarity between group and per-sample locations.

    A sample contributes 0 when its estimate failed or either vector is
    (numerically) zero.
    """
    g = as_point(group_center)
    gn = float(np.linalg.norm(g))
    if len(samplewise_centers) < 1:
        raise ValueError("need at least one sample-wise estimate")
    total = 0.0
    for c in samplewise_centers:
        if c is None:
            continue
        c = as_point(c)
        cn = float(np.linalg.norm(c))
        if gn < 1e-12 or cn < 1e-12:
            continue
        total += float(np.dot(g, c)) / (gn * cn)
    return total / len(samplewise_centers)


def compute_w(z_values) -> np.ndarray:
    """Min-max normalize the per-class similarity scores into [0, 1].

    With a degenerate spread (all z equal) every class gets w = 1: a neutral
    weight, so genuine distance evidence is not erased.
    """
    z = np.asarray(z_values, dtype=np.float64)
    if z.size < 2:
        raise ValueError("need at least two classes")
    lo, hi = float(z.min()), float(z.max())
    if hi - lo < 1e-12:
        return np.ones_like(z)
    return (z - lo) / (hi - lo)


def combined_statistic(w_s: float, r_t: float, r_s: float) -> float:
    """r = w * r_t / r_s, with a tiny epsilon denominator when r_s vanishes."""
    denom = r_s if r_s > 0.0 else DENOM_EPS
    return w_s * r_t / denom


def ablation_statistics(stats) -> list:
    """The alternative statistic families (1/r_s, r_t/r_s, w/r_s) plus r.

    Reporting only; the verdict always uses r. Failed classes map to zeros.
    """
    out = []
    for st in stats:
        if st.failed:
            out.append({"inv_rs": 0.0, "rt_over_rs": 0.0, "w_over_rs": 0.0, "r": 0.0})
            continue
        denom = st.r_s if st.r_s > 0.0 else DENOM_EPS
        out.append(
            {
                "inv_rs": 1.0 / denom,
                "rt_over_rs": st.r_t / denom,
                "w_over_rs": st.w / denom,
                "r": st.r,
            }
        )
    return out


def exclusion_set(stats) -> set:
    """Classes whose voted target matches the top statistic's voted target.

    s_max (ties to the lowest class index) is always a member. Classes with
    failed estimates have no vote and are never excluded (r = 0 there is
    maximal no-backdoor evidence, so they belong in the null).
    """
    if len(stats) < 2:
        raise ValueError("need at least two classes")
    r = np.array([st.r for st in stats])
    s_max = int(np.argmax(r))
    top_target = stats[s_max].t_hat
    excluded = {s_max}
    if top_target is not None:
        for st in stats:
            if st.t_hat == top_target:
                excluded.add(st.source)
    return excluded


def fit_gamma_null(values) -> NullFit:
    """Maximum-likelihood Gamma fit of the null statistics.

    Values are clamped below at 1e-12; the shape starts at the
    method-of-moments value and is refined by Newton steps on the profile
    log-likelihood until the update is below 1e-10 (at most 100 steps).
    """
    vals = np.maximum(np.asarray(values, dtype=np.float64), FIT_FLOOR)
    if vals.size < 2:
        raise ValueError("need at least two values")
    m = float(vals.mean())
    v = float(vals.var())
    if v < 1e-30 or np.ptp(vals) <= 0.0:
        raise DegenerateNullError("all null statistics identical")
    shape = m * m / v
    # Profile likelihood: log(k) - digamma(k) = log(mean) - mean(log).
    s = math.log(m) - float(np.mean(np.log(vals)))
    if s <= 0:
        raise DegenerateNullError("non-positive log-moment gap")
    for _ in range(100):
        f = math.log(shape) - float(special.digamma(shape)) - s
        fp = 1.0 / shape - float(special.polygamma(1, shape))
        step = f / fp
        new_shape = shape - step
        if new_shape <= 0:
            new_shape = shape / 2.0
        done = abs(new_shape - shape) < 1e-10
        shape = new_shape
        if done:
            break
    scale = m / shape
    return NullFit(shape=float(shape), scale=float(scale), excluded=(), values=vals)


def gamma_cdf(fit: NullFit, x: float) -> float:
    """Null cdf G(x)."""
    if x <= 0:
        return 0.0
    return float(special.gammainc(fit.shape, x / fit.scale))


def _gamma_log_sf(fit: NullFit, x: float) -> float:
    """log of the Gamma upper tail, with an asymptotic fallback at underflow."""
    y = x / fit.scale
    sf = float(special.gammaincc(fit.shape, y))
    if sf > 0.0:
        return math.log(sf)
    # First-order tail expansion: sf ~ y^(k-1) e^-y / Gamma(k) * (1 + (k-1)/y).
    k = fit.shape
    return (k - 1.0) * math.log(y) - y - float(special.gammaln(k)) + math.log1p(max(k - 1.0, 0.0) / y)


def order_statistic_pvalue(fit: NullFit, r_max: float, num_classes: int, num_excluded: int) -> PValue:
    """pv = 1 - G(r_max)^(K-J), evaluated in the log domain.

    Values below 1e-323 are flagged as underflow and reported through log_pv.
    """
    m = num_classes - num_excluded
    if m < 1:
        raise ValueError("need at least one retained statistic")
    if r_max <= 0:
        return PValue(pv=1.0, log_pv=0.0, underflow=False)
    y = r_max / fit.scale
    sf = float(special.gammaincc(fit.shape, y))
    if sf >= 1.0:
        return PValue(pv=1.0, log_pv=0.0, underflow=False)
    log_g = math.log1p(-sf)  # log G(r_max), accurate when G is near 1
    pv = -math.expm1(m * log_g)
    if pv >= UNDERFLOW_LIMIT:
        return PValue(pv=pv, log_pv=math.log(pv), underflow=False)
    # 1 - G^m ~ m * sf for tiny sf; use the tail log for the displayable value.
    log_pv = math.log(m) + _gamma_log_sf(fit, r_max)
    return PValue(pv=pv, log_pv=log_pv, underflow=True)


def detect(stats, phi: float = 0.05) -> DetectionReport:
    """Fit the null with collateral-damage exclusion and produce the verdict.

    Attacked iff pv < phi. If exclusion leaves fewer than 4 statistics, it
    shrinks to the top class alone; if even that leaves fewer than 4, or the
    remaining statistics are degenerate, the verdict is inconclusive.
    """
    K = len(stats)
    r = np.array([st.r for st in stats])
    s_max = int(np.argmax(r))
    excluded = exclusion_set(stats)
    if K - len(excluded) < MIN_FIT_SIZE:
        excluded = {s_max}
    if K - len(excluded) < MIN_FIT_SIZE:
        return DetectionReport(
            stats=list(stats),
            fit=None,
            s_max=s_max,
            pvalue=None,
            phi=phi,
            verdict=VERDICT_INCONCLUSIVE,
            inferred_target=None,
            num_classes=K,
            num_excluded=len(excluded),
        )
    retained = [st.r for st in stats if st.source not in excluded]
    try:
        fit = fit_gamma_null(retained)
    except DegenerateNullError:
        return DetectionReport(
            stats=list(stats),
            fit=None,
            s_max=s_max,
            pvalue=None,
            phi=phi,
            verdict=VERDICT_INCONCLUSIVE,
            inferred_target=None,
            num_classes=K,
            num_excluded=len(excluded),
        )
    fit = NullFit(shape=fit.shape, scale=fit.scale, excluded=tuple(sorted(excluded)), values=fit.values)
    pvalue = order_statistic_pvalue(fit, float(r[s_max]), K, len(excluded))
    attacked = pvalue.pv < phi
    return DetectionReport(
        stats=list(stats),
        fit=fit,
        s_max=s_max,
        pvalue=pvalue,
        phi=phi,
        verdict=VERDICT_ATTACKED if attacked else VERDICT_CLEAN,
        inferred_target=stats[s_max].t_hat if attacked else None,
        num_classes=K,
        num_excluded=len(excluded),
    )
