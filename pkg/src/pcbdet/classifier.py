"""A minimal PointNet-style classifier with hand-written backpropagation.

Architecture: per-point features 3 -> 64 -> 128 (affine + ReLU each), a global
per-channel max over points, then a head 128 -> 64 -> K (affine + ReLU, then
affine). Logits depend on the cloud only through the per-channel max, so they
are exactly invariant to point order and to duplicated points.

Everything runs in float64 numpy. Training is plain SGD with momentum 0.9 and
is bit-deterministic under a fixed seed.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from pcbdet.geometry import Dataset, as_cloud, as_point

__all__ = [
    "ClassifierWeights",
    "TrainConfig",
    "LossSpec",
    "init_weights",
    "forward_logits",
    "predict",
    "pool_vector",
    "insertion_logits",
    "insertion_gradient",
    "loss_gradient_wrt_point",
    "train",
    "accuracy",
    "mean_cross_entropy",
    "save_weights",
    "load_weights",
]

POINT_DIMS = (3, 64, 128)
HEAD_HIDDEN = 64

WEIGHTS_MAGIC = "PCBDET-WEIGHTS"
WEIGHTS_VERSION = 1


class WeightsFormatError(ValueError):
    """Weight file is truncated, corrupt, or has an unsupported version."""


@dataclass
class ClassifierWeights:
    """Parameter arrays; shapes are (in, out) for matrices, (out,) for biases."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.w4.shape[1]

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3, self.w4, self.b4]

    def validate(self) -> None:
        shapes = [
            (POINT_DIMS[0], POINT_DIMS[1]),
            (POINT_DIMS[1],),
            (POINT_DIMS[1], POINT_DIMS[2]),
            (POINT_DIMS[2],),
            (POINT_DIMS[2], HEAD_HIDDEN),
            (HEAD_HIDDEN,),
            (HEAD_HIDDEN, self.num_classes),
            (self.num_classes,),
        ]
        for arr, want in zip(self.arrays(), shapes):
            if arr.shape != want:
                raise ValueError(f"weight shape mismatch: {arr.shape} != {want}")
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite parameter")

    def copy(self) -> "ClassifierWeights":
        return ClassifierWeights(*[a.copy() for a in self.arrays()])


@dataclass
class TrainConfig:
    """SGD-with-momentum training settings.

    outlier_points stray points (drawn uniformly in a ball of radius
    outlier_radius, fresh each epoch) are appended to every training cloud so
    the classifier learns to ignore isolated inserted points; without this a
    network this small flips class for almost any single far-out insertion.
    logit_scale is a softmax temperature folded into the output layer after
    training; it leaves every prediction unchanged.
    """

    epochs: int = 12
    batch_size: int = 16
    learning_rate: float = 0.01
    seed: int = 0
    momentum: float = 0.9
    outlier_points: int = 2
    outlier_radius: float = 0.9
    logit_scale: float = 0.05

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.outlier_points < 0:
            raise ValueError("outlier point count must be >= 0")
        if self.logit_scale <= 0:
            raise ValueError("logit scale must be positive")


@dataclass(frozen=True)
class LossSpec:
    """Network-dependent scalar whose gradient wrt an inserted point is wanted.

    kind "untargeted": h(source | X+{c}) - max_{k != source} h(k | X+{c})
    kind "targeted":   h(source | X+{c}) - h(target | X+{c})
    """

    kind: str
    source: int
    target: int | None = None

    def __post_init__(self):
        if self.kind not in ("untargeted", "targeted"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "targeted" and self.target is None:
            raise ValueError("targeted loss needs a target class")


def init_weights(num_classes: int, seed: int) -> ClassifierWeights:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng([int(seed), 0xC1A55])
    d0, d1, d2 = POINT_DIMS

    def he(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

    w = ClassifierWeights(
        w1=he(d0, d1),
        b1=np.zeros(d1),
        w2=he(d1, d2),
        b2=np.zeros(d2),
        w3=he(d2, HEAD_HIDDEN),
        b3=np.zeros(HEAD_HIDDEN),
        w4=he(HEAD_HIDDEN, num_classes),
        b4=np.zeros(num_classes),
    )
    w.validate()
    return w


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


# Rows are multiplied in fixed-shape zero-padded blocks so that a point's
# feature vector is bit-identical no matter how many other points the cloud
# holds or where in the cloud it sits. (BLAS picks kernels by matrix shape;
# without blocking, appending a point can perturb every feature by an ulp and
# break the exact permutation/duplicate invariance of the logits.)
_ROW_BLOCK = 256


def _affine_rows(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if n == _ROW_BLOCK:
        return x @ W + b
    out = np.empty((n, W.shape[1]))
    for s in range(0, n, _ROW_BLOCK):
        chunk = x[s : s + _ROW_BLOCK]
        m = len(chunk)
        if m < _ROW_BLOCK:
            padded = np.zeros((_ROW_BLOCK, x.shape[1]))
            padded[:m] = chunk
            out[s : s + m] = (padded @ W)[:m]
        else:
            out[s : s + m] = chunk @ W
    return out + b


def _point_features(w: ClassifierWeights, pts: np.ndarray):
    """Per-point feature stack with row-stable arithmetic; pts is (..., 3)."""
    lead = pts.shape[:-1]
    flat = pts.reshape(-1, 3)
    z1 = _affine_rows(flat, w.w1, w.b1)
    a1 = np.maximum(z1, 0.0)
    z2 = _affine_rows(a1, w.w2, w.b2)
    a2 = np.maximum(z2, 0.0)
    d1, d2 = POINT_DIMS[1], POINT_DIMS[2]
    return (
        z1.reshape(*lead, d1),
        a1.reshape(*lead, d1),
        z2.reshape(*lead, d2),
        a2.reshape(*lead, d2),
    )


def _point_features_fast(w: ClassifierWeights, pts: np.ndarray):
    """Plain-matmul feature stack for small fixed-shape inputs.

    Used on inserted-point candidates, whose array shape is constant within a
    run; values may differ from _point_features in the last ulp.
    """
    z1 = pts @ w.w1 + w.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w.w2 + w.b2
    a2 = np.maximum(z2, 0.0)
    return z1, a1, z2, a2


def _head(w: ClassifierWeights, pooled: np.ndarray):
    """Classification head; pooled has shape (..., 128)."""
    z3 = pooled @ w.w3 + w.b3
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ w.w4 + w.b4
    return z3, a3, logits


def forward_logits(w: ClassifierWeights, X) -> np.ndarray:
    """Pre-softmax logits h(k|X) for a single cloud."""
    X = as_cloud(X)
    w.validate()
    _, _, _, a2 = _point_features(w, X)
    pooled = a2.max(axis=0)
    _, _, logits = _head(w, pooled)
    return logits


def predict(w: ClassifierWeights, X) -> int:
    """argmax_k h(k|X); ties break toward the lowest class index."""
    return int(np.argmax(forward_logits(w, X)))


def pool_vector(w: ClassifierWeights, X) -> np.ndarray:
    """Per-channel max of the per-point features of X (shape (128,)).

    Inserting a point c into X changes the logits only through
    max(pool_vector(X), features(c)), which is what the estimation loop
    exploits to avoid re-encoding X at every iterate.
    """
    X = as_cloud(X)
    _, _, _, a2 = _point_features(w, X)
    return a2.max(axis=0)


def insertion_logits(w: ClassifierWeights, pooled_base: np.ndarray, c: np.ndarray):
    """Logits of clouds with one point appended, from cached pools.

    pooled_base: (M, 128) per-cloud pooled features; c: (..., 3) insertion
    locations. Returns (logits, cache) where logits has shape (..., M, K).
    Ties between the inserted point and an existing point go to the existing
    point (the insertion is appended after all cloud points).
    """
    z1, a1, z2, a2 = _point_features_fast(w, c)
    a2e = a2[..., None, :]  # (..., 1, 128)
    pooled = np.maximum(pooled_base, a2e)
    win = a2e > pooled_base  # strict: existing points keep ties
    z3, a3, logits = _head(w, pooled)
    cache = {"z1": z1, "z2": z2, "a1": a1, "win": win, "z3": z3, "a3": a3}
    return logits, cache


def insertion_gradient(w: ClassifierWeights, cache, g_logits: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient wrt the inserted point(s).

    g_logits: (..., M, K) cotangent of the logits returned by
    insertion_logits. Returns gradient of shape (..., 3): per-channel max-pool
    gates the flow to channels the inserted point strictly wins; contributions
    are summed over the M clouds.
    """
    g_a3 = g_logits @ w.w4.T
    g_z3 = g_a3 * (cache["z3"] > 0.0)
    g_pooled = g_z3 @ w.w3.T  # (..., M, 128)
    g_a2 = (g_pooled * cache["win"]).sum(axis=-2)  # (..., 128)
    g_z2 = g_a2 * (cache["z2"] > 0.0)
    g_a1 = g_z2 @ w.w2.T
    g_z1 = g_a1 * (cache["z1"] > 0.0)
    return g_z1 @ w.w1.T


def loss_gradient_wrt_point(w: ClassifierWeights, X, c, spec: LossSpec) -> np.ndarray:
    """Exact gradient wrt c of the network term selected by spec, on X + {c}.

    The distance regularizer is not included; callers add
    lambda * distance_gradient(c, X) themselves.
    """
    X = as_cloud(X)
    c = as_point(c)
    w.validate()
    K = w.num_classes
    if not 0 <= spec.source < K:
        raise ValueError("source class out of range")
    pooled = pool_vector(w, X)[None, :]  # (1, 128)
    logits, cache = insertion_logits(w, pooled, c)
    lg = logits[0]
    g = np.zeros((1, K))
    g[0, spec.source] += 1.0
    if spec.kind == "untargeted":
        rival = _best_rival(lg, spec.source)
        g[0, rival] -= 1.0
    else:
        if not 0 <= spec.target < K:
            raise ValueError("target class out of range")
        g[0, spec.target] -= 1.0
    return insertion_gradient(w, cache, g)


def _best_rival(logits: np.ndarray, source: int) -> int:
    """argmax_{k != source} logits[k], ties to the lowest index."""
    masked = logits.copy()
    masked[source] = -np.inf
    return int(np.argmax(masked))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _stack_by_size(clouds, labels):
    """Group sample indices by cloud size so each group batches into one array."""
    groups: dict[int, list[int]] = {}
    for i, X in enumerate(clouds):
        groups.setdefault(len(X), []).append(i)
    return groups


def _batch_forward(w: ClassifierWeights, pts: np.ndarray):
    """pts: (B, n, 3). Returns logits plus everything backward needs."""
    z1, a1, z2, a2 = _point_features(w, pts)
    pooled = a2.max(axis=1)  # (B, 128)
    winners = a2.argmax(axis=1)  # (B, 128), first index wins ties
    z3, a3, logits = _head(w, pooled)
    return {
        "pts": pts,
        "z1": z1,
        "a1": a1,
        "z2": z2,
        "a2": a2,
        "pooled": pooled,
        "winners": winners,
        "z3": z3,
        "a3": a3,
        "logits": logits,
    }


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _batch_backward(w: ClassifierWeights, fwd, g_logits: np.ndarray):
    """Gradients of sum(g_logits * logits) wrt every parameter array."""
    B, n, _ = fwd["pts"].shape
    g_a3 = g_logits @ w.w4.T
    g_z3 = g_a3 * (fwd["z3"] > 0.0)
    g_w4 = fwd["a3"].T @ g_logits
    g_b4 = g_logits.sum(axis=0)
    g_w3 = fwd["pooled"].T @ g_z3
    g_b3 = g_z3.sum(axis=0)
    g_pooled = g_z3 @ w.w3.T  # (B, 128)
    g_a2 = np.zeros_like(fwd["a2"])  # (B, n, 128)
    bi = np.arange(B)[:, None]
    ci = np.arange(g_pooled.shape[1])[None, :]
    g_a2[bi, fwd["winners"], ci] = g_pooled
    g_z2 = g_a2 * (fwd["z2"] > 0.0)
    flat_a1 = fwd["a1"].reshape(B * n, -1)
    flat_gz2 = g_z2.reshape(B * n, -1)
    g_w2 = flat_a1.T @ flat_gz2
    g_b2 = flat_gz2.sum(axis=0)
    g_a1 = g_z2 @ w.w2.T
    g_z1 = g_a1 * (fwd["z1"] > 0.0)
    flat_pts = fwd["pts"].reshape(B * n, -1)
    flat_gz1 = g_z1.reshape(B * n, -1)
    g_w1 = flat_pts.T @ flat_gz1
    g_b1 = flat_gz1.sum(axis=0)
    return [g_w1, g_b1, g_w2, g_b2, g_w3, g_b3, g_w4, g_b4]


def train(data: Dataset, cfg: TrainConfig) -> ClassifierWeights:
    """SGD-with-momentum training on the softmax cross-entropy.

    Deterministic given cfg.seed: initialization and every epoch's shuffle
    come from seed-derived generator streams.
    """
    if data.num_classes < 2:
        raise ValueError("need at least two classes")
    counts = np.bincount(data.labels, minlength=data.num_classes)
    if np.any(counts == 0):
        raise ValueError(f"class {int(np.argmin(counts))} has no training samples")
    w = init_weights(data.num_classes, cfg.seed)
    velocity = [np.zeros_like(a) for a in w.arrays()]
    n_samples = len(data)
    for epoch in range(cfg.epochs):
        epoch_rng = np.random.default_rng([int(cfg.seed), 0x5417, epoch])
        order = epoch_rng.permutation(n_samples)
        if cfg.outlier_points > 0:
            noise = cfg.outlier_radius * _ball_points(epoch_rng, n_samples * cfg.outlier_points)
            noise = noise.reshape(n_samples, cfg.outlier_points, 3)
        for start in range(0, n_samples, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grads = [np.zeros_like(a) for a in w.arrays()]
            # Clouds of different cardinalities forward separately; gradients
            # accumulate so the update equals one whole-batch step.
            by_size: dict[int, list[int]] = {}
            for i in batch:
                by_size.setdefault(len(data.clouds[i]), []).append(int(i))
            for size in sorted(by_size):
                idx = by_size[size]
                if cfg.outlier_points > 0:
                    pts = np.stack([np.vstack([data.clouds[i], noise[i]]) for i in idx])
                else:
                    pts = np.stack([data.clouds[i] for i in idx])
                labs = data.labels[idx]
                fwd = _batch_forward(w, pts)
                probs = _softmax(fwd["logits"])
                g_logits = probs
                g_logits[np.arange(len(idx)), labs] -= 1.0
                g_logits /= len(batch)
                for acc, g in zip(grads, _batch_backward(w, fwd, g_logits)):
                    acc += g
            arrays = w.arrays()
            for v, a, g in zip(velocity, arrays, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                a += v
    w.w4 *= cfg.logit_scale
    w.b4 *= cfg.logit_scale
    w.validate()
    return w


def _ball_points(rng, count: int) -> np.ndarray:
    dirs = rng.normal(size=(count, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * rng.uniform(size=(count, 1)) ** (1.0 / 3.0)


def accuracy(w: ClassifierWeights, data: Dataset) -> float:
    hits = sum(1 for X, lab in zip(data.clouds, data.labels) if predict(w, X) == lab)
    return hits / len(data)


def mean_cross_entropy(w: ClassifierWeights, data: Dataset) -> float:
    total = 0.0
    for X, lab in zip(data.clouds, data.labels):
        logits = forward_logits(w, X)
        shifted = logits - logits.max()
        total += float(np.log(np.exp(shifted).sum()) - shifted[lab])
    return total / len(data)


# ---------------------------------------------------------------------------
# Weight file IO (versioned container, bit-exact round trip)
# ---------------------------------------------------------------------------
#
# Layout: one ASCII header line "PCBDET-WEIGHTS <version>\n", one JSON line
# with {"num_classes": K, "shapes": [[...], ...]}, then the parameter arrays
# concatenated as little-endian float64 in declaration order.


def save_weights(w: ClassifierWeights, path) -> None:
    w.validate()
    meta = {
        "num_classes": w.num_classes,
        "shapes": [list(a.shape) for a in w.arrays()],
    }
    with open(path, "wb") as fh:
        fh.write(f"{WEIGHTS_MAGIC} {WEIGHTS_VERSION}\n".encode("ascii"))
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode("ascii"))
        for a in w.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_weights(path) -> ClassifierWeights:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    header = buf.readline().decode("ascii", errors="replace").strip()
    parts = header.split()
    if len(parts) != 2 or parts[0] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"not a weights file: header {header!r}")
    if int(parts[1]) != WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {parts[1]}")
    try:
        meta = json.loads(buf.readline().decode("ascii"))
        shapes = [tuple(s) for s in meta["shapes"]]
    except (ValueError, KeyError) as exc:
        raise WeightsFormatError(f"bad weights metadata: {exc}") from None
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        raw = buf.read(count * 8)
        if len(raw) != count * 8:
            raise WeightsFormatError("truncated weights file")
        arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
    if buf.read(1):
        raise WeightsFormatError("trailing bytes in weights file")
    w = ClassifierWeights(*arrays)
    w.validate()
    if w.num_classes != meta["num_classes"]:
        raise WeightsFormatError("metadata class count disagrees with array shapes")
    return w
