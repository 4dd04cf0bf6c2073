"""Backdoor trigger reverse-engineering.

For each putative source class, gradient descent searches for the insertion
location of a single point that flips most of that class's clean clouds,
while an adaptively scaled penalty keeps the location close to the clouds.
Feasible iterates (group misclassification fraction >= pi) are recorded and
the closest one across all random restarts wins. A per-sample variant reuses
the same loop with a targeted margin loss to expose "intrinsic backdoors",
whose per-sample locations scatter instead of agreeing on one spot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pcbdet.classifier import (
    ClassifierWeights,
    forward_logits,
    insertion_gradient,
    insertion_logits,
    pool_vector,
)
from pcbdet.geometry import as_cloud, as_point, point_to_cloud_distance

__all__ = [
    "EstimationParams",
    "GroupEstimate",
    "SampleWiseEstimate",
    "group_loss",
    "samplewise_loss",
    "estimate_group_location",
    "vote_target_class",
    "estimate_samplewise_location",
]

TRACE_HEADER = "restart,iter,loss,rho,lambda,cx,cy,cz"

# Numerical guard only: a restart stuck in an always-feasible region would
# otherwise grow lambda past float range. Any lambda this large has long left
# the regime where the candidate can be competitive.
LAMBDA_CAP = 1e30


@dataclass
class EstimationParams:
    pi: float = 0.9
    delta: float = 0.1
    tau_max: int = 3000
    alpha: float = 1.5
    lambda0: float = 1e-5
    n_restarts: int = 10

    def __post_init__(self):
        if not 0.0 < self.pi <= 1.0:
            raise ValueError("pi must be in (0, 1]")
        if self.delta <= 0:
            raise ValueError("step size must be positive")
        if self.alpha <= 1.0:
            raise ValueError("scaling factor must exceed 1")
        if self.tau_max < 1:
            raise ValueError("need at least one iteration")
        if self.lambda0 <= 0:
            raise ValueError("initial penalty must be positive")
        if self.n_restarts < 1:
            raise ValueError("need at least one restart")


@dataclass
class GroupEstimate:
    """Result of the group search for one putative source class."""

    source: int
    center: np.ndarray | None  # None means the search never became feasible
    target: int | None  # voted target class; None when failed
    rho: float  # misclassification fraction re-checked at center
    avg_source_distance: float  # mean d(center, X) over the class subset

    @property
    def failed(self) -> bool:
        return self.center is None


@dataclass
class SampleWiseEstimate:
    """Per-sample insertion locations for one source class (None = failed)."""

    source: int
    centers: list


def group_loss(w: ClassifierWeights, clouds, source: int, c, lam: float) -> float:
    """Untargeted margin loss plus distance penalty, summed over the clouds."""
    c = as_point(c)
    if len(clouds) < 1:
        raise ValueError("need at least one cloud")
    total = 0.0
    for X in clouds:
        logits = forward_logits(w, np.vstack([as_cloud(X), c[None, :]]))
        others = np.delete(logits, source)
        total += float(logits[source] - others.max())
        total += lam * point_to_cloud_distance(c, X)
    return total


def samplewise_loss(w: ClassifierWeights, X, source: int, target: int, c, lam: float) -> float:
    """Targeted margin loss plus distance penalty for a single cloud."""
    c = as_point(c)
    logits = forward_logits(w, np.vstack([as_cloud(X), c[None, :]]))
    return float(logits[source] - logits[target]) + lam * point_to_cloud_distance(c, X)


# ---------------------------------------------------------------------------
# Shared descent loop
# ---------------------------------------------------------------------------


def _distance_state(c: np.ndarray, clouds):
    """Distances and unit directions from each restart's c to each cloud.

    c: (R, 3). Returns dists (R, M) and the summed subgradient (R, 3).
    """
    R = c.shape[0]
    dists = np.empty((R, len(clouds)))
    grad = np.zeros((R, 3))
    for m, X in enumerate(clouds):
        diff = c[:, None, :] - X[None, :, :]  # (R, n, 3)
        d2 = np.einsum("rnd,rnd->rn", diff, diff)
        idx = np.argmin(d2, axis=1)
        rows = np.arange(R)
        nearest = diff[rows, idx]  # (R, 3)
        d = np.sqrt(d2[rows, idx])
        dists[:, m] = d
        safe = d > 1e-12
        grad[safe] += nearest[safe] / d[safe, None]
    return dists, grad


def _margin_coefficients(logits: np.ndarray, source: int, target: int | None) -> np.ndarray:
    """d(margin)/d(logits) for each (restart, cloud) pair.

    Untargeted (target None): +1 at source, -1 at the current best rival.
    Targeted: +1 at source, -1 at target.
    """
    g = np.zeros_like(logits)
    g[..., source] = 1.0
    if target is None:
        masked = logits.copy()
        masked[..., source] = -np.inf
        rival = np.argmax(masked, axis=-1)
        np.put_along_axis(g, rival[..., None], -1.0, axis=-1)
    else:
        g[..., target] = -1.0
    return g


def _descent(w, clouds, source, target, params, seed, trace_path):
    """Run the adaptive-penalty descent from n_restarts seeded inits.

    target None selects the group (untargeted) variant: feasibility means at
    least a pi fraction of clouds misclassified away from source. With a
    target, feasibility means the (single) cloud is classified as target.

    Returns (best_center | None, best_total_distance).
    """
    clouds = [as_cloud(X) for X in clouds]
    M = len(clouds)
    R = params.n_restarts
    pooled = np.stack([pool_vector(w, X) for X in clouds])  # (M, 128)

    rng = np.random.default_rng([int(seed), 0xA16])
    c = rng.normal(size=(R, 3))
    lam = np.full(R, params.lambda0)
    best_sum = np.full(R, np.inf)
    best_c = np.zeros((R, 3))

    logits, cache = insertion_logits(w, pooled, c)  # (R, M, K)
    dists, dist_grad = _distance_state(c, clouds)

    trace = open(trace_path, "w", encoding="ascii") if trace_path else None
    if trace:
        trace.write(TRACE_HEADER + "\n")
    try:
        for tau in range(params.tau_max):
            coeff = _margin_coefficients(logits, source, target)
            g_net = insertion_gradient(w, cache, coeff)  # (R, 3)
            grad = g_net + lam[:, None] * dist_grad
            c = c - params.delta * grad

            logits, cache = insertion_logits(w, pooled, c)
            dists, dist_grad = _distance_state(c, clouds)
            preds = np.argmax(logits, axis=-1)  # (R, M)
            if target is None:
                rho = np.mean(preds != source, axis=1)
            else:
                rho = np.mean(preds == target, axis=1)
            feasible = rho >= params.pi
            lam = np.where(feasible, np.minimum(lam * params.alpha, LAMBDA_CAP), lam / params.alpha)
            total = dists.sum(axis=1)
            improved = feasible & (total < best_sum) & np.all(np.isfinite(c), axis=1)
            best_sum = np.where(improved, total, best_sum)
            best_c[improved] = c[improved]

            if trace:
                margins = np.take(logits, source, axis=-1) - _rival_values(logits, source, target)
                loss = margins.sum(axis=1) + lam * total
                for r in range(R):
                    trace.write(
                        f"{r},{tau + 1},{float(loss[r])!r},{float(rho[r])!r},{float(lam[r])!r},"
                        f"{float(c[r, 0])!r},{float(c[r, 1])!r},{float(c[r, 2])!r}\n"
                    )
    finally:
        if trace:
            trace.close()

    order = np.argsort(best_sum, kind="stable")
    for r in order:
        if not np.isfinite(best_sum[r]):
            break
        cand = best_c[r]
        # Recorded candidates are re-validated from scratch, not trusted
        # from loop state.
        if _feasibility(w, clouds, cand, source, target) >= params.pi:
            return cand.copy(), float(best_sum[r])
    return None, np.inf


def _rival_values(logits: np.ndarray, source: int, target: int | None) -> np.ndarray:
    if target is None:
        masked = logits.copy()
        masked[..., source] = -np.inf
        return masked.max(axis=-1)
    return np.take(logits, target, axis=-1)


def _feasibility(w, clouds, c, source, target) -> float:
    preds = [int(np.argmax(forward_logits(w, np.vstack([X, c[None, :]])))) for X in clouds]
    preds = np.asarray(preds)
    if target is None:
        return float(np.mean(preds != source))
    return float(np.mean(preds == target))


def estimate_group_location(
    w: ClassifierWeights,
    clouds,
    source: int,
    params: EstimationParams,
    seed: int,
    trace_path=None,
) -> GroupEstimate:
    """Estimate the common insertion location for one putative source class.

    Runs n_restarts descent trajectories from c ~ N(0, I); each iterate that
    flips at least a pi fraction of the clouds away from the source class is
    a candidate, and the candidate with the smallest total distance to the
    clouds wins. Returns a failed estimate when no iterate of any restart is
    ever feasible. The voted target class is filled in on success.
    """
    if len(clouds) < 1:
        raise ValueError("need at least one cloud")
    if not 0 <= source < w.num_classes:
        raise ValueError("source class out of range")
    center, total = _descent(w, clouds, source, None, params, seed, trace_path)
    if center is None:
        return GroupEstimate(source=source, center=None, target=None, rho=0.0, avg_source_distance=np.inf)
    rho = _feasibility(w, [as_cloud(X) for X in clouds], center, source, None)
    target = vote_target_class(w, clouds, center, source)
    return GroupEstimate(
        source=source,
        center=center,
        target=target,
        rho=rho,
        avg_source_distance=total / len(clouds),
    )


def vote_target_class(w: ClassifierWeights, clouds, c_hat, source: int) -> int:
    """Most common predicted class (excluding source) after inserting c_hat.

    Ties break toward the lowest class index.
    """
    if c_hat is None:
        raise ValueError("cannot vote with a failed estimate")
    c = as_point(c_hat)
    counts = np.zeros(w.num_classes, dtype=np.int64)
    for X in clouds:
        pred = int(np.argmax(forward_logits(w, np.vstack([as_cloud(X), c[None, :]]))))
        counts[pred] += 1
    counts[source] = -1
    return int(np.argmax(counts))


def estimate_samplewise_location(
    w: ClassifierWeights,
    X,
    source: int,
    target: int,
    params: EstimationParams,
    seed: int,
    trace_path=None,
):
    """Per-sample insertion location driving this one cloud to the voted target.

    Same restart / step / penalty machinery as the group search, with the
    margin replaced by the targeted difference h(source) - h(target) and
    feasibility by prediction equal to target. Returns the location or None.
    """
    if target == source:
        raise ValueError("target must differ from source")
    if not 0 <= target < w.num_classes:
        raise ValueError("target class out of range")
    center, _ = _descent(w, [X], source, target, params, seed, trace_path)
    return center
