"""Federated objective suites with analytic constants and noisy gradient oracles.

Each objective is a mean ``f = (1/M) sum_i f_i`` over per-client losses and
carries the constants the bound verifiers need: strong convexity ``mu``,
smoothness ``L``, the gradient-dissimilarity pair ``(a, b)`` with
``(1/M) sum_i ||grad f_i(w)||^2 <= a + b ||grad f(w)||^2``, and, when known in
closed form, the minimizer and optimal value.  Certification flags record
which constants are analytic and which are empirical estimates.

Three suites:

* ``quadratic``: ``f_i(w) = 0.5 ||w - c_i||^2``.  Everything is analytic:
  ``mu = L = 1``, ``w* = mean(c_i)``, ``a = (1/M) sum ||c_i - mean||^2``,
  ``b = 1`` (the dissimilarity identity holds with equality).
* ``logistic``: ridge-regularized logistic loss on synthetic Gaussian blobs.
  ``mu = ridge`` and ``L = ridge + max_i lambda_max(X_i^T X_i) / (4 n_i)`` are
  certified from the data; ``(a, b)`` are estimated on a probe grid with
  ``b = 2`` fixed and are flagged empirical.
* ``tiny_mlp``: one hidden tanh layer with squared loss and hand-coded
  backprop; non-convex, ``mu = 0``, bounded below by 0, ``L`` is an empirical
  Lipschitz estimate (flagged non-certified).
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .vectors import ParamVector, RngStream, StreamPurpose, derive_stream

__all__ = [
    "ObjectiveKind",
    "NoiseKind",
    "NoiseModel",
    "FederatedObjective",
    "make_quadratic",
    "make_logistic",
    "make_tiny_mlp",
    "stochastic_gradient",
    "verify_h2",
    "H2Report",
    "save_dataset",
    "load_dataset",
]

_DATASET_MAGIC = b"FDS1"


class ObjectiveKind(str, Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"
    TINY_MLP = "tiny_mlp"


class NoiseKind(str, Enum):
    GAUSSIAN_ISO = "gaussian_iso"
    UNIFORM_BALL = "uniform_ball"


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean gradient noise with second moment at most ``sigma**2``.

    The isotropic Gaussian uses per-coordinate variance ``sigma**2 / d`` so
    its second moment equals ``sigma**2`` exactly; the uniform ball of radius
    ``sigma`` has second moment ``sigma**2 * d / (d + 2)``.
    """

    sigma: float = 0.0
    distribution: NoiseKind = NoiseKind.GAUSSIAN_ISO

    def __post_init__(self):
        object.__setattr__(self, "distribution", NoiseKind(self.distribution))
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def draw(self, dim: int, rng: RngStream) -> np.ndarray:
        if self.sigma == 0.0:
            return np.zeros(dim)
        if self.distribution is NoiseKind.GAUSSIAN_ISO:
            return rng.normals(dim) * (self.sigma / np.sqrt(dim))
        direction = rng.normals(dim)
        nrm = np.linalg.norm(direction)
        if nrm == 0.0:
            return np.zeros(dim)
        radius = self.sigma * rng.uniforms(1)[0] ** (1.0 / dim)
        return direction * (radius / nrm)


class FederatedObjective(ABC):
    """Gradient oracle for ``f = (1/M) sum_i f_i`` plus constants metadata."""

    kind: ObjectiveKind
    M: int
    d: int
    mu: float
    L: float
    a: float
    b: float
    w_star: Optional[ParamVector]
    f_star: Optional[float]
    f_lower: Optional[float]
    ab_certified: bool
    L_certified: bool
    layer_partition = None

    @abstractmethod
    def _client_loss(self, client_id: int, w: np.ndarray) -> float: ...

    @abstractmethod
    def _client_grad(self, client_id: int, w: np.ndarray) -> np.ndarray: ...

    def client_loss(self, client_id: int, w: ParamVector) -> float:
        self._check_client(client_id)
        return self._client_loss(client_id, w.values)

    def client_grad(self, client_id: int, w: ParamVector) -> ParamVector:
        self._check_client(client_id)
        return ParamVector(self._client_grad(client_id, w.values),
                           self.layer_partition, copy=False)

    def loss(self, w: ParamVector) -> float:
        return sum(self._client_loss(i, w.values) for i in range(self.M)) / self.M

    def grad(self, w: ParamVector) -> ParamVector:
        acc = self._grad_mean(w.values)
        return ParamVector(acc, self.layer_partition, copy=False)

    def _grad_mean(self, warr: np.ndarray) -> np.ndarray:
        acc = self._client_grad(0, warr)
        for i in range(1, self.M):
            acc = acc + self._client_grad(i, warr)
        return acc / self.M

    def _check_client(self, client_id: int):
        if not 0 <= client_id < self.M:
            raise ValueError(f"client_id {client_id} out of range for M={self.M}")


class QuadraticObjective(FederatedObjective):
    kind = ObjectiveKind.QUADRATIC

    def __init__(self, centers: np.ndarray):
        self.centers = centers
        self.M, self.d = centers.shape
        cbar = centers.mean(axis=0)
        self.mu = 1.0
        self.L = 1.0
        self.a = float(np.mean(np.sum((centers - cbar) ** 2, axis=1)))
        self.b = 1.0
        self.w_star = ParamVector(cbar, copy=True)
        self.f_star = 0.5 * self.a
        self.f_lower = 0.0
        self.ab_certified = True
        self.L_certified = True

    def _client_loss(self, i, w):
        diff = w - self.centers[i]
        return 0.5 * float(diff @ diff)

    def _client_grad(self, i, w):
        return w - self.centers[i]


class LogisticObjective(FederatedObjective):
    kind = ObjectiveKind.LOGISTIC

    def __init__(self, features: List[np.ndarray], labels: List[np.ndarray], ridge: float):
        self.features = features
        self.labels = labels
        self.ridge = ridge
        self.M = len(features)
        self.d = features[0].shape[1]
        self.mu = ridge
        self.L = ridge + max(
            float(np.linalg.eigvalsh(X.T @ X)[-1]) / (4 * X.shape[0]) for X in features)
        self.L_certified = True
        self.w_star = None
        self.f_star = None
        self.f_lower = 0.0
        self.b = 2.0
        self.a = 0.0          # filled by _estimate_dissimilarity
        self.ab_certified = False
        self._estimate_dissimilarity()

    def _client_loss(self, i, w):
        X, y = self.features[i], self.labels[i]
        margins = (X @ w) * y
        return float(np.logaddexp(0.0, -margins).mean()) + 0.5 * self.ridge * float(w @ w)

    def _client_grad(self, i, w):
        X, y = self.features[i], self.labels[i]
        margins = (X @ w) * y
        weights = y * expit(-margins)
        return -(X.T @ weights) / X.shape[0] + self.ridge * w

    def _estimate_dissimilarity(self):
        """Maximize the implied ``a`` at fixed ``b`` over a probe grid.

        Probes cover random directions at several radii plus a short descent
        path, so the estimate reflects the region trajectories actually visit.
        The result is empirical, not analytic.
        """
        probes = [np.zeros(self.d)]
        rng = derive_stream(0xA11CE, self.M, 0, StreamPurpose.DATA_SHUFFLE)
        for radius in (0.25, 0.5, 1.0, 2.0, 4.0):
            for _ in range(10):
                u = rng.normals(self.d)
                u /= max(np.linalg.norm(u), 1e-12)
                probes.append(radius * u)
        w = np.zeros(self.d)
        for _ in range(40):
            w = w - (1.0 / self.L) * self._grad_mean(w)
            probes.append(w.copy())
        worst = 0.0
        for p in probes:
            mean_sq = np.mean([float(g @ g) for g in
                               (self._client_grad(i, p) for i in range(self.M))])
            gbar = self._grad_mean(p)
            worst = max(worst, mean_sq - self.b * float(gbar @ gbar))
        self.a = max(worst, 0.0) * 1.05  # small headroom over the probe max


class TinyMlpObjective(FederatedObjective):
    kind = ObjectiveKind.TINY_MLP

    def __init__(self, features: List[np.ndarray], targets: List[np.ndarray],
                 d_in: int, hidden: int):
        self.features = features
        self.targets = targets
        self.d_in = d_in
        self.hidden = hidden
        self.M = len(features)
        # parameters: W1 (hidden x d_in), b1, w2, b2
        self._n_w1 = hidden * d_in
        self.d = self._n_w1 + hidden + hidden + 1
        self.layer_partition = (
            (0, self._n_w1),
            (self._n_w1, self._n_w1 + hidden),
            (self._n_w1 + hidden, self._n_w1 + 2 * hidden),
            (self._n_w1 + 2 * hidden, self.d),
        )
        self.mu = 0.0
        self.w_star = None
        self.f_star = None
        self.f_lower = 0.0
        self.b = 2.0
        self.a = 0.0
        self.ab_certified = False
        self.L_certified = False
        self.L = self._estimate_lipschitz()

    def _unpack(self, w):
        h, din = self.hidden, self.d_in
        W1 = w[:self._n_w1].reshape(h, din)
        b1 = w[self._n_w1:self._n_w1 + h]
        w2 = w[self._n_w1 + h:self._n_w1 + 2 * h]
        b2 = w[-1]
        return W1, b1, w2, b2

    def _client_loss(self, i, w):
        W1, b1, w2, b2 = self._unpack(w)
        X, y = self.features[i], self.targets[i]
        hidden = np.tanh(X @ W1.T + b1)
        pred = hidden @ w2 + b2
        return 0.5 * float(np.mean((pred - y) ** 2))

    def _client_grad(self, i, w):
        W1, b1, w2, b2 = self._unpack(w)
        X, y = self.features[i], self.targets[i]
        n = X.shape[0]
        pre = X @ W1.T + b1
        act = np.tanh(pre)
        pred = act @ w2 + b2
        resid = (pred - y) / n
        g_b2 = float(resid.sum())
        g_w2 = act.T @ resid
        back = (resid[:, None] * (1.0 - act ** 2)) * w2[None, :]
        g_b1 = back.sum(axis=0)
        g_W1 = back.T @ X
        return np.concatenate([g_W1.ravel(), g_b1, g_w2, [g_b2]])

    def _estimate_lipschitz(self) -> float:
        """Max gradient-difference ratio over sampled pairs; not a certificate."""
        rng = derive_stream(0xF00D, self.M, 0, StreamPurpose.DATA_SHUFFLE)
        worst = 0.0
        for _ in range(200):
            x = rng.normals(self.d)
            y = x + rng.normals(self.d) * 0.5
            gx, gy = self._grad_mean(x), self._grad_mean(y)
            gap = np.linalg.norm(x - y)
            if gap > 1e-12:
                worst = max(worst, float(np.linalg.norm(gx - gy)) / gap)
        return worst * 1.25


def make_quadratic(M: int, d: int, centers: Sequence[ParamVector]) -> QuadraticObjective:
    """Shifted-quadratic suite ``f_i(w) = 0.5 ||w - c_i||^2``."""
    if not centers:
        raise ValueError("need at least one center")
    if len(centers) != M:
        raise ValueError(f"expected {M} centers, got {len(centers)}")
    arr = np.stack([c.values if isinstance(c, ParamVector) else np.asarray(c, float)
                    for c in centers])
    if arr.shape[1] != d:
        raise ValueError(f"centers have dimension {arr.shape[1]}, expected {d}")
    return QuadraticObjective(arr)


def make_logistic(M: int, d: int, seed: int, samples_per_client: int,
                  ridge: float, heterogeneity: float = 0.5) -> LogisticObjective:
    """Synthetic Gaussian-blob logistic suite.

    Client ``i`` draws labels uniformly from {-1, +1} and features
    ``x = noise + y * mu_i`` where ``mu_i = shared + heterogeneity * own``;
    ``heterogeneity`` therefore dials the gradient dissimilarity across
    clients.  ``ridge >= 0`` adds ``(ridge/2) ||w||^2`` to every client loss.
    """
    if samples_per_client < 1:
        raise ValueError("samples_per_client must be >= 1")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    scale = 2.0 / np.sqrt(d)
    shared = derive_stream(seed, M, 0, StreamPurpose.DATA_SHUFFLE).normals(d) * scale
    features, labels = [], []
    for i in range(M):
        rng = derive_stream(seed, i, 0, StreamPurpose.DATA_SHUFFLE)
        mu_i = shared + heterogeneity * rng.normals(d) * scale
        noise = rng.normals(samples_per_client * d).reshape(samples_per_client, d)
        lab = np.where(rng.uniforms(samples_per_client) < 0.5, -1.0, 1.0)
        features.append(noise + np.outer(lab, mu_i))
        labels.append(lab)
    return LogisticObjective(features, labels, ridge)


def make_tiny_mlp(M: int, d_in: int, hidden: int, seed: int,
                  samples_per_client: int) -> TinyMlpObjective:
    """One-hidden-layer tanh regressor onto +-1 targets from a random teacher."""
    if hidden < 1:
        raise ValueError("hidden must be >= 1")
    if samples_per_client < 1:
        raise ValueError("samples_per_client must be >= 1")
    shared = derive_stream(seed, M, 0, StreamPurpose.DATA_SHUFFLE).normals(d_in)
    features, targets = [], []
    for i in range(M):
        rng = derive_stream(seed, i, 0, StreamPurpose.DATA_SHUFFLE)
        teacher = shared + 0.5 * rng.normals(d_in)
        X = rng.normals(samples_per_client * d_in).reshape(samples_per_client, d_in)
        y = np.where(X @ teacher >= 0.0, 1.0, -1.0)
        features.append(X)
        targets.append(y)
    return TinyMlpObjective(features, targets, d_in, hidden)


def stochastic_gradient(obj: FederatedObjective, client_id: int, w: ParamVector,
                        noise: NoiseModel, rng: RngStream) -> ParamVector:
    """One noisy gradient draw ``grad f_i(w) + xi`` with ``E[xi] = 0``."""
    obj._check_client(client_id)
    g = obj._client_grad(client_id, w.values)
    if noise.sigma > 0.0:
        g = g + noise.draw(obj.d, rng)
    return ParamVector(g, obj.layer_partition, copy=False)


@dataclass(frozen=True)
class H2Report:
    max_violation: float
    worst_point: int


def verify_h2(obj: FederatedObjective, probe_points: Sequence[ParamVector]) -> H2Report:
    """Largest excess of mean-client gradient energy over ``a + b ||grad f||^2``."""
    worst = -np.inf
    worst_idx = -1
    for idx, p in enumerate(probe_points):
        arr = p.values if isinstance(p, ParamVector) else np.asarray(p, float)
        mean_sq = np.mean([float(g @ g) for g in
                           (obj._client_grad(i, arr) for i in range(obj.M))])
        gbar = obj._grad_mean(arr)
        violation = mean_sq - (obj.a + obj.b * float(gbar @ gbar))
        if violation > worst:
            worst, worst_idx = violation, idx
    return H2Report(float(worst), worst_idx)


def save_dataset(path, features: np.ndarray, labels: np.ndarray):
    """Columnar binary dump: magic, d, n, float64 rows, int8 labels."""
    features = np.ascontiguousarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ValueError("features must be (n, d) with one label per row")
    lab8 = labels.astype(np.int8)
    if not np.array_equal(lab8.astype(labels.dtype), labels):
        raise ValueError("labels must fit in int8")
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<II", d, n))
        fh.write(features.astype("<f8").tobytes())
        fh.write(lab8.tobytes())


def load_dataset(path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DATASET_MAGIC:
            raise ValueError(f"bad dataset magic {magic!r}")
        d, n = struct.unpack("<II", fh.read(8))
        features = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d).copy()
        labels = np.frombuffer(fh.read(n), dtype=np.int8).copy()
    return features, labels
