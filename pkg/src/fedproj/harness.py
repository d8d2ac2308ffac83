"""Experiment runner, metrics pipeline, and convergence-bound verifiers.

A run is declarative: :class:`RunConfig` names the objective, algorithm,
noise model, horizon and seeds, and :func:`run` executes every seed's
client/server round loop, recording per-round metrics and exact traffic
counts.  Runs are deterministic per seed (keyed random streams) and seeds are
independent, so parallel execution cannot change any number.

The verifiers re-derive the right-hand sides of the convergence bounds from
the objective's constants and compare them against seed-averaged recorded
metrics.  They are pure functions of recorded metrics: re-running a verifier
on a metrics CSV reproduces its report bit-for-bit.  Where a bound speaks
about a randomly selected output iterate, the verifier evaluates the exact
expectation of the selection rule (a weighted average over the recorded
trajectory) instead of sampling, which is the same quantity with zero added
Monte-Carlo noise; :func:`select_output` remains available for actually
drawing an output point.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .accounting import CostModel, DEFAULT_COST_MODEL, TrafficLedger, downlink_bits, message_bits
from .algorithms import (
    AlgorithmConfig,
    AlgorithmKind,
    assert_mirror,
    client_round,
    diagnostic_tilde_w,
    init_client_state,
    init_server_state,
    server_round,
)
from .compressors import (
    CompressorKind,
    beta_certified,
    delta_certified,
    estimate_beta,
    estimate_delta,
)
from .objectives import (
    FederatedObjective,
    NoiseModel,
    ObjectiveKind,
    make_logistic,
    make_quadratic,
    make_tiny_mlp,
    stochastic_gradient,
)
from .vectors import ParamVector, StreamPurpose, derive_stream

__all__ = [
    "ObjectiveConfig",
    "RunConfig",
    "RoundMetrics",
    "SeedResult",
    "OutputRule",
    "build_objective",
    "run",
    "select_output",
    "locate_optimum",
    "verify_theorem1",
    "verify_theorem2",
    "verify_lemma_error_bound",
    "VerifierReport",
    "VerifierError",
    "theorem1_eta_cap",
    "theorem2_eta_cap",
    "write_metrics_csv",
    "read_metrics_csv",
    "CSV_COLUMNS",
]

DIVERGENCE_THRESHOLD = 1e12

CSV_COLUMNS = [
    "seed", "round", "loss", "loss_gap", "grad_norm_sq", "dist_to_opt_sq",
    "err_mean_sq", "err_norm", "uplink_bits", "downlink_bits",
    "cum_uplink_bits", "cum_downlink_bits", "cum_total_bits",
]


class OutputRule(str, Enum):
    LAST = "last"
    UNIFORM_RANDOM = "uniform"
    GEOMETRIC_WEIGHTED = "geometric"


@dataclass(frozen=True)
class ObjectiveConfig:
    """Declarative objective description (rebuildable inside worker processes)."""

    kind: ObjectiveKind
    d: int = 2
    clients: int = 2
    # quadratic
    centers: str = "axis_pair"       # axis_pair | random
    separation: float = 2.0
    center_scale: float = 1.0
    # logistic / tiny_mlp
    data_seed: int = 7
    samples_per_client: int = 40
    ridge: float = 0.1
    heterogeneity: float = 0.5
    d_in: int = 5
    hidden: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectiveKind(self.kind))


def build_objective(ocfg: ObjectiveConfig) -> FederatedObjective:
    if ocfg.kind is ObjectiveKind.QUADRATIC:
        if ocfg.centers == "axis_pair":
            if ocfg.clients != 2:
                raise ValueError("axis_pair centers require exactly 2 clients")
            c2 = np.zeros(ocfg.d)
            c2[0] = ocfg.separation
            centers = [ParamVector(np.zeros(ocfg.d)), ParamVector(c2)]
        elif ocfg.centers == "random":
            rng = derive_stream(ocfg.data_seed, ocfg.clients, 0, StreamPurpose.DATA_SHUFFLE)
            centers = [ParamVector(rng.normals(ocfg.d) * ocfg.center_scale)
                       for _ in range(ocfg.clients)]
        else:
            raise ValueError(f"unknown centers mode {ocfg.centers!r}")
        return make_quadratic(ocfg.clients, ocfg.d, centers)
    if ocfg.kind is ObjectiveKind.LOGISTIC:
        return make_logistic(ocfg.clients, ocfg.d, ocfg.data_seed,
                             ocfg.samples_per_client, ocfg.ridge, ocfg.heterogeneity)
    return make_tiny_mlp(ocfg.clients, ocfg.d_in, ocfg.hidden, ocfg.data_seed,
                         ocfg.samples_per_client)


@dataclass(frozen=True)
class RunConfig:
    objective: ObjectiveConfig
    algorithm: AlgorithmConfig
    noise: NoiseModel = NoiseModel()
    rounds: int = 100
    seeds: Tuple[int, ...] = (0,)
    cadence: int = 1
    output_rule: OutputRule = OutputRule.LAST
    cost_model: CostModel = DEFAULT_COST_MODEL
    divergence_threshold: float = DIVERGENCE_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "output_rule", OutputRule(self.output_rule))
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    loss: float
    loss_gap: Optional[float]
    grad_norm_sq: float
    dist_to_opt_sq: Optional[float]
    err_mean_sq: Optional[float]
    err_norm: Optional[float]
    uplink_bits: int
    downlink_bits: int
    cum_uplink_bits: int
    cum_downlink_bits: int

    @property
    def cum_total_bits(self) -> int:
        return self.cum_uplink_bits + self.cum_downlink_bits


@dataclass
class SeedResult:
    seed: int
    rows: List[RoundMetrics]
    diverged_at: Optional[int] = None
    w_final: Optional[np.ndarray] = None


def _metrics_row(obj, cfg: RunConfig, t, w_arr, clients, server,
                 up_bits, down_bits, cum_up, cum_down) -> RoundMetrics:
    w = ParamVector(w_arr, obj.layer_partition, copy=True)
    loss = obj.loss(w)
    grad = obj.grad(w).values
    loss_gap = None if obj.f_star is None else loss - obj.f_star
    dist = None
    if obj.w_star is not None:
        diff = w_arr - obj.w_star.values
        dist = float(diff @ diff)
    err_mean_sq = err_norm = None
    if cfg.algorithm.kind in (AlgorithmKind.PROJFL_EF, AlgorithmKind.EF):
        errs = [cs.error for cs in clients]
        err_mean_sq = float(np.mean([e @ e for e in errs]))
        mean_err = np.mean(np.stack(errs), axis=0)
        err_norm = float(np.linalg.norm(mean_err))
    return RoundMetrics(t, loss, loss_gap, float(grad @ grad), dist,
                        err_mean_sq, err_norm, up_bits, down_bits, cum_up, cum_down)


def run_seed(config: RunConfig, obj: FederatedObjective, seed: int) -> SeedResult:
    """One deterministic trajectory; row ``t`` holds the state at ``w_t`` and
    the cumulative traffic spent to reach it."""
    alg = config.algorithm
    M = obj.M
    clients = [init_client_state(alg, obj.d) for _ in range(M)]
    server = init_server_state(alg, ParamVector.zeros(obj.d), M)
    ledger = TrafficLedger()
    rows: List[RoundMetrics] = []
    diverged_at = None

    def record(t, up_bits, down_bits):
        if t % config.cadence == 0 or t == config.rounds:
            cum_up, cum_down, _ = ledger.cumulative()
            rows.append(_metrics_row(obj, config, t, server.w, clients, server,
                                     up_bits, down_bits, cum_up, cum_down))

    record(0, 0, 0)
    for t in range(config.rounds):
        w = ParamVector(server.w, obj.layer_partition, copy=True)
        uploads = []
        new_clients = []
        for i in range(M):
            g = stochastic_gradient(
                obj, i, w, config.noise,
                derive_stream(seed, i, t, StreamPurpose.GRADIENT_NOISE))
            up, st = client_round(
                alg, clients[i], g,
                derive_stream(seed, i, t, StreamPurpose.COMPRESSOR))
            uploads.append(up)
            new_clients.append(st)
        w_prev = server.w
        server = server_round(alg, server, uploads,
                              layer_partition=obj.layer_partition)
        clients = new_clients
        assert_mirror(server, clients)

        up_bits = [message_bits(config.cost_model, up.msg, up.n_scalars)
                   for up in uploads]
        down_per_client = downlink_bits(config.cost_model, w_prev, server.w)
        ledger.record_round(up_bits, down_per_client * M)

        if float(np.linalg.norm(server.w)) > config.divergence_threshold:
            diverged_at = t + 1
            record(t + 1, sum(up_bits), down_per_client * M)
            break
        record(t + 1, sum(up_bits), down_per_client * M)

    return SeedResult(seed, rows, diverged_at, server.w.copy())


def _run_seed_worker(args):
    config, seed = args
    obj = build_objective(config.objective)
    return run_seed(config, obj, seed)


def run(config: RunConfig, jobs: int = 1) -> List[SeedResult]:
    """Execute every seed; results are sorted by seed and independent of ``jobs``."""
    if jobs <= 1 or len(config.seeds) == 1:
        obj = build_objective(config.objective)
        results = [run_seed(config, obj, s) for s in config.seeds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_seed_worker,
                                    [(config, s) for s in config.seeds],
                                    chunksize=max(1, len(config.seeds) // (4 * jobs))))
    return sorted(results, key=lambda r: r.seed)


# --- output-point selection --------------------------------------------------

def _selection_weights(n: int, rule: OutputRule, eta=None, mu=None) -> np.ndarray:
    if rule is OutputRule.LAST:
        w = np.zeros(n)
        w[-1] = 1.0
        return w
    if rule is OutputRule.UNIFORM_RANDOM:
        return np.full(n, 1.0 / n)
    if mu is None or mu <= 0.0:
        raise ValueError("geometric selection requires mu > 0")
    if eta is None or eta <= 0.0:
        raise ValueError("geometric selection requires eta > 0")
    # weights (1 - eta*mu/2)^{-t}, normalized in log space
    log_r = -math.log1p(-eta * mu / 2.0)
    logw = log_r * np.arange(n)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def select_output(trajectory: Sequence, rule: OutputRule, eta: Optional[float] = None,
                  mu: Optional[float] = None, rng=None) -> ParamVector:
    """Pick the output iterate from a trajectory per the named rule."""
    if len(trajectory) == 0:
        raise ValueError("trajectory must be non-empty")
    rule = OutputRule(rule)
    weights = _selection_weights(len(trajectory), rule, eta, mu)
    if rule is OutputRule.LAST:
        idx = len(trajectory) - 1
    else:
        if rng is None:
            raise ValueError("random selection rules need an rng stream")
        u = float(rng.uniforms(1)[0])
        idx = int(np.searchsorted(np.cumsum(weights), u, side="right"))
        idx = min(idx, len(trajectory) - 1)
    point = trajectory[idx]
    if isinstance(point, ParamVector):
        return point
    return ParamVector(np.asarray(point, dtype=np.float64), copy=True)


def locate_optimum(obj: FederatedObjective, tol: float = 1e-12):
    """Numerically minimize ``f``; returns (w_hat, f_hat)."""
    from scipy.optimize import minimize

    def fun(w):
        pv = ParamVector(w, obj.layer_partition, copy=True)
        return obj.loss(pv)

    def jac(w):
        return obj._grad_mean(np.asarray(w, dtype=np.float64))

    res = minimize(fun, np.zeros(obj.d), jac=jac, method="L-BFGS-B",
                   options={"maxiter": 5000, "ftol": tol, "gtol": 1e-10})
    return res.x, float(res.fun)


# --- bound verifiers ---------------------------------------------------------

class VerifierError(ValueError):
    """Misuse of a verifier: wrong algorithm, eta above cap, bad recording."""


@dataclass
class VerifierReport:
    item: str
    status: str                      # PASS | FAIL | SKIPPED
    reason: str
    eta: float
    constants: Dict[str, float]
    caveats: List[str]
    lhs: Optional[float] = None
    rhs: Optional[float] = None
    per_round: Optional[List[Dict[str, float]]] = None
    tail_ok: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "item": self.item,
            "status": self.status,
            "reason": self.reason,
            "eta": self.eta,
            "constants": self.constants,
            "caveats": self.caveats,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "tail_ok": self.tail_ok,
            "per_round": self.per_round,
        }


def theorem1_eta_cap(item: int, obj: FederatedObjective, beta: float, M: int) -> float:
    damp = 1.0 / (1.0 + obj.b * (beta - 1.0) / M)
    if item == 1:
        return damp * 2.0 / (obj.mu + obj.L)
    if item == 2:
        return damp / (2.0 * obj.L)
    return damp / obj.L


def theorem2_eta_cap(item: int, obj: FederatedObjective, delta: float) -> float:
    L, mu, b = obj.L, obj.mu, obj.b
    if item == 1:
        return min(delta / (L * (4 + delta)),
                   delta / math.sqrt(40.0 * (2 * L + mu) * b * L))
    if item == 2:
        return min(delta / (L * (4 + delta)), delta / (math.sqrt(80.0 * b) * L))
    return delta / (4.0 * math.sqrt(2.0 * (b + 1.0)) * L)


def _noise_second_moment(noise: NoiseModel) -> float:
    # H3 constant: both supported distributions satisfy E||xi||^2 <= sigma^2
    return noise.sigma ** 2


def _stack_metric(results: Sequence[SeedResult], attr: str) -> np.ndarray:
    """(seeds, rounds) array of one metric; raises if missing or ragged."""
    rows = []
    for res in results:
        vals = [getattr(r, attr) for r in res.rows]
        if any(v is None for v in vals):
            raise VerifierError(f"metric {attr} was not recorded on this run")
        rows.append(vals)
    lengths = {len(r) for r in rows}
    if len(lengths) != 1:
        raise VerifierError("seeds recorded different numbers of rounds "
                            "(divergence aborted some seeds)")
    return np.asarray(rows, dtype=np.float64)


def _seed_stderr(per_seed: np.ndarray) -> np.ndarray:
    n = per_seed.shape[0]
    if n < 2:
        return np.zeros(per_seed.shape[1:] if per_seed.ndim > 1 else ())
    return per_seed.std(axis=0, ddof=1) / math.sqrt(n)


def _check_divergence(results):
    bad = [r.seed for r in results if r.diverged_at is not None]
    if bad:
        raise VerifierError(f"seeds {bad} diverged; bounds do not apply")


def _require_cadence_one(cfg: RunConfig):
    if cfg.cadence != 1:
        raise VerifierError("verifiers need per-round metrics (cadence=1)")


def _gather_constants(obj, cfg: RunConfig, need_w_star: bool, need_f_star: bool):
    """Objective constants plus numerically located optimum when needed."""
    caveats = []
    if not obj.ab_certified:
        caveats.append("(a, b) are empirical probe-grid estimates, not analytic")
    w_star = None if obj.w_star is None else obj.w_star.values
    f_star = obj.f_star
    if (need_w_star and w_star is None) or (need_f_star and f_star is None):
        w_hat, f_hat = locate_optimum(obj)
        if w_star is None:
            w_star = w_hat
            caveats.append("w* located numerically")
        if f_star is None:
            f_star = f_hat
            caveats.append("f* located numerically")
    return w_star, f_star, caveats


def verify_theorem1(item: int, results: Sequence[SeedResult], obj: FederatedObjective,
                    cfg: RunConfig) -> VerifierReport:
    """Check one regime of the unbiased-compressor convergence bound.

    item 1: strongly convex, per-round distance bound with a noise ball.
    item 2: convex, uniform-output loss-gap bound at the horizon.
    item 3: smooth nonconvex, uniform-output gradient-norm bound.
    """
    if item not in (1, 2, 3):
        raise VerifierError(f"unknown theorem-1 item {item}")
    alg = cfg.algorithm
    if alg.kind is not AlgorithmKind.PROJFL:
        raise VerifierError("theorem-1 verification applies to projfl runs")
    name = f"t1.{item}"
    eta = alg.eta
    spec = alg.compressor

    def skip(reason):
        return VerifierReport(name, "SKIPPED", reason, eta, {}, [])

    if not beta_certified(spec):
        return skip("compressor has no unbiasedness certificate (biased kind)")
    if not obj.L_certified:
        return skip("no certified L for this objective")
    if item == 1 and obj.mu <= 0.0:
        return skip("item 1 needs strong convexity (mu > 0)")
    if item == 1 and obj.w_star is None:
        return skip("item 1 needs a recorded distance-to-optimum metric")

    beta = estimate_beta(spec, obj.d, obj.layer_partition)
    sigma_sq = _noise_second_moment(cfg.noise)
    M = obj.M
    cap = theorem1_eta_cap(item, obj, beta, M)
    if eta > cap * (1 + 1e-12):
        raise VerifierError(f"eta={eta} exceeds the item-{item} cap {cap}")

    _check_divergence(results)
    _require_cadence_one(cfg)
    w_star, f_star, caveats = _gather_constants(
        obj, cfg, need_w_star=(item != 3), need_f_star=(item != 1))
    noise_term = obj.a * (beta - 1.0) + beta * sigma_sq
    constants = {"beta": beta, "sigma_sq": sigma_sq, "a": obj.a, "b": obj.b,
                 "mu": obj.mu, "L": obj.L, "M": M, "eta_cap": cap}

    if item == 1:
        dists = _stack_metric(results, "dist_to_opt_sq")
        lhs = dists.mean(axis=0)
        se = _seed_stderr(dists)
        T = dists.shape[1] - 1
        rate = 1.0 - 2.0 * eta * obj.mu * obj.L / (obj.mu + obj.L)
        ball = eta * (obj.mu + obj.L) / (2.0 * obj.mu * obj.L * M) * noise_term
        d0 = lhs[0]
        rhs = rate ** np.arange(T + 1) * d0 + ball
        ok = lhs <= rhs + 5.0 * se
        tail_n = max(1, (T + 1) // 5)
        tail_mean = lhs[-tail_n:].mean()
        tail_se = _seed_stderr(dists[:, -tail_n:].mean(axis=1))
        # zero-noise runs plateau at the float-arithmetic floor (~1e-32 * d0)
        # rather than exactly at a zero-radius ball; allow that dust.
        dust = 1e-24 * (1.0 + d0)
        tail_ok = bool(tail_mean <= ball + 5.0 * float(tail_se) + dust)
        per_round = [{"t": int(t), "lhs": float(lhs[t]), "rhs": float(rhs[t]),
                      "stderr": float(se[t])} for t in range(T + 1)]
        constants["noise_ball_sq"] = ball
        status = "PASS" if bool(ok.all()) else "FAIL"
        reason = "bound holds at every round" if status == "PASS" else \
            f"violated at rounds {np.nonzero(~ok)[0][:10].tolist()}"
        return VerifierReport(name, status, reason, eta, constants, caveats,
                              lhs=float(lhs[-1]), rhs=float(rhs[-1]),
                              per_round=per_round, tail_ok=tail_ok)

    if item == 2:
        gaps = _stack_metric(results, "loss_gap") if obj.f_star is not None else None
        if gaps is None:
            losses = _stack_metric(results, "loss")
            gaps = losses - f_star
        per_seed = gaps.mean(axis=1)   # uniform output rule, exact expectation
        lhs = float(per_seed.mean())
        se = float(_seed_stderr(per_seed))
        T = gaps.shape[1] - 1
        d0 = float(w_star @ w_star)    # w0 = 0
        rhs = d0 / ((T + 1) * eta) + (eta / M) * noise_term
        status = "PASS" if lhs <= rhs + 5.0 * se else "FAIL"
        return VerifierReport(name, status,
                              "uniform-output loss gap vs horizon bound", eta,
                              constants, caveats, lhs=lhs, rhs=rhs)

    grads = _stack_metric(results, "grad_norm_sq")
    per_seed = grads.mean(axis=1)
    lhs = float(per_seed.mean())
    se = float(_seed_stderr(per_seed))
    T = grads.shape[1] - 1
    f0 = float(_stack_metric(results, "loss")[:, 0].mean())
    rhs = 2.0 * (f0 - f_star) / ((T + 1) * eta) + obj.L * eta / M * noise_term
    min_over_t = float(grads.mean(axis=0).min())
    constants["min_over_t"] = min_over_t
    status = "PASS" if lhs <= rhs + 5.0 * se else "FAIL"
    return VerifierReport(name, status,
                          "uniform-output gradient norm vs horizon bound", eta,
                          constants, caveats, lhs=lhs, rhs=rhs)


def verify_theorem2(item: int, results: Sequence[SeedResult], obj: FederatedObjective,
                    cfg: RunConfig) -> VerifierReport:
    """Check one regime of the contractive-compressor (error feedback) bound."""
    if item not in (1, 2, 3):
        raise VerifierError(f"unknown theorem-2 item {item}")
    alg = cfg.algorithm
    if alg.kind is not AlgorithmKind.PROJFL_EF:
        raise VerifierError("theorem-2 verification applies to projfl_ef runs")
    name = f"t2.{item}"
    eta = alg.eta
    spec = alg.compressor

    def skip(reason):
        return VerifierReport(name, "SKIPPED", reason, eta, {}, [])

    if not delta_certified(spec):
        return skip("compressor has no contraction certificate as applied "
                    "(needs topk or identity)")
    if not obj.L_certified:
        return skip("no certified L for this objective")
    if item == 1 and obj.mu <= 0.0:
        return skip("item 1 needs strong convexity (mu > 0)")

    delta = estimate_delta(spec, obj.d, obj.layer_partition)
    sigma_sq = _noise_second_moment(cfg.noise)
    M = obj.M
    cap = theorem2_eta_cap(item, obj, delta)
    if eta > cap * (1 + 1e-12):
        raise VerifierError(f"eta={eta} exceeds the item-{item} cap {cap}")

    _check_divergence(results)
    _require_cadence_one(cfg)
    w_star, f_star, caveats = _gather_constants(
        obj, cfg, need_w_star=(item != 3), need_f_star=True)
    L, mu, a, b = obj.L, obj.mu, obj.a, obj.b
    constants = {"delta": delta, "sigma_sq": sigma_sq, "a": a, "b": b,
                 "mu": mu, "L": L, "M": M, "eta_cap": cap}
    compression_var = (2.0 * a / delta + sigma_sq)

    gaps = _stack_metric(results, "loss_gap") if obj.f_star is not None else None
    if gaps is None and item != 3:
        losses = _stack_metric(results, "loss")
        gaps = losses - f_star

    if item == 1:
        T = gaps.shape[1] - 1
        weights = _selection_weights(T + 1, OutputRule.GEOMETRIC_WEIGHTED, eta, mu)
        per_seed = gaps @ weights    # exact expectation over the selection rule
        lhs = float(per_seed.mean())
        se = float(_seed_stderr(per_seed))
        d0 = float(w_star @ w_star)
        rhs = (10.0 / eta) * (1.0 - eta * mu / 2.0) ** (T + 1) * d0 \
            + 20.0 * (2 * L + mu) * (1 - delta) * eta ** 2 / delta * compression_var \
            + 10.0 * eta * sigma_sq / M
        status = "PASS" if lhs <= rhs + 5.0 * se else "FAIL"
        return VerifierReport(name, status,
                              "geometric-output loss gap vs horizon bound", eta,
                              constants, caveats, lhs=lhs, rhs=rhs)

    if item == 2:
        T = gaps.shape[1] - 1
        per_seed = gaps.mean(axis=1)
        lhs = float(per_seed.mean())
        se = float(_seed_stderr(per_seed))
        d0 = float(w_star @ w_star)
        rhs = 10.0 * d0 / (eta * (T + 1)) \
            + 80.0 * L * (1 - delta) * eta ** 2 / delta * compression_var \
            + 10.0 * eta * sigma_sq / M
        status = "PASS" if lhs <= rhs + 5.0 * se else "FAIL"
        return VerifierReport(name, status,
                              "uniform-output loss gap vs horizon bound", eta,
                              constants, caveats, lhs=lhs, rhs=rhs)

    grads = _stack_metric(results, "grad_norm_sq")
    T = grads.shape[1] - 1
    per_seed = grads.mean(axis=1)
    lhs = float(per_seed.mean())
    se = float(_seed_stderr(per_seed))
    f0 = float(_stack_metric(results, "loss")[:, 0].mean())
    rhs = 8.0 * (f0 - f_star) / ((T + 1) * eta) \
        + 8.0 * (1 - delta) * eta ** 2 * L ** 2 / delta * compression_var \
        + 8.0 * eta * L * sigma_sq / (2.0 * M)
    status = "PASS" if lhs <= rhs + 5.0 * se else "FAIL"
    return VerifierReport(name, status,
                          "uniform-output gradient norm vs horizon bound", eta,
                          constants, caveats, lhs=lhs, rhs=rhs)


def verify_lemma_error_bound(results: Sequence[SeedResult], obj: FederatedObjective,
                             cfg: RunConfig) -> VerifierReport:
    """Check the accumulated-compression-error bound along recorded runs.

    At every round, the seed-averaged squared error norm must sit below a
    geometrically discounted sum of the recorded gradient energies plus the
    heterogeneity/noise floor.
    """
    alg = cfg.algorithm
    if alg.kind is not AlgorithmKind.PROJFL_EF:
        raise VerifierError("the error-bound lemma applies to projfl_ef runs")
    eta = alg.eta
    spec = alg.compressor

    if not delta_certified(spec):
        return VerifierReport("lemmaA1", "SKIPPED",
                              "compressor has no contraction certificate as applied",
                              eta, {}, [])
    delta = estimate_delta(spec, obj.d, obj.layer_partition)
    sigma_sq = _noise_second_moment(cfg.noise)
    _check_divergence(results)
    _require_cadence_one(cfg)
    caveats = [] if obj.ab_certified else \
        ["(a, b) are empirical probe-grid estimates, not analytic"]

    err = _stack_metric(results, "err_norm") ** 2      # ||mean_i e_i||^2
    grads = _stack_metric(results, "grad_norm_sq")
    mean_err = err.mean(axis=0)
    se = _seed_stderr(err)
    mean_grad = grads.mean(axis=0)
    T = err.shape[1] - 1

    c_sum = 2.0 * (1 - delta) * obj.b * eta ** 2 / delta
    c_floor = 2.0 * (1 - delta) * eta ** 2 / delta * (2.0 * obj.a / delta + sigma_sq)
    factor = 1.0 - delta / 2.0
    running = 0.0
    per_round = [{"t": 0, "lhs": float(mean_err[0]), "rhs": 0.0, "stderr": 0.0}]
    ok = mean_err[0] <= 1e-30  # e_0 = 0 by initialization
    violations = []
    for t in range(T):
        running = running * factor + mean_grad[t]
        rhs_t = c_sum * running + c_floor
        lhs_t = mean_err[t + 1]
        per_round.append({"t": t + 1, "lhs": float(lhs_t), "rhs": float(rhs_t),
                          "stderr": float(se[t + 1])})
        if lhs_t > rhs_t + 5.0 * float(se[t + 1]):
            violations.append(t + 1)
    constants = {"delta": delta, "sigma_sq": sigma_sq, "a": obj.a, "b": obj.b,
                 "eta": eta}
    status = "PASS" if ok and not violations else "FAIL"
    reason = ("error energy below the discounted-gradient bound at every round"
              if status == "PASS" else f"violated at rounds {violations[:10]}")
    worst = max((r["lhs"] / r["rhs"] for r in per_round[1:] if r["rhs"] > 0),
                default=0.0)
    constants["worst_ratio"] = float(worst)
    return VerifierReport("lemmaA1", status, reason, eta, constants, caveats,
                          lhs=float(mean_err[-1]), rhs=float(per_round[-1]["rhs"]),
                          per_round=per_round)


# --- metrics CSV -------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_metrics_csv(path, results: Sequence[SeedResult]):
    """One row per (seed, round); floats at 17 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for res in sorted(results, key=lambda r: r.seed):
            for m in res.rows:
                writer.writerow([
                    res.seed, m.round, _fmt(m.loss), _fmt(m.loss_gap),
                    _fmt(m.grad_norm_sq), _fmt(m.dist_to_opt_sq),
                    _fmt(m.err_mean_sq), _fmt(m.err_norm),
                    m.uplink_bits, m.downlink_bits,
                    m.cum_uplink_bits, m.cum_downlink_bits, m.cum_total_bits,
                ])


def read_metrics_csv(path) -> List[SeedResult]:
    """Rebuild seed results (metrics only) from a CSV written by this module."""
    per_seed: Dict[int, List[RoundMetrics]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_COLUMNS:
            raise ValueError("unrecognized metrics CSV header")
        for row in reader:
            seed = int(row[0])
            opt = lambda s: None if s == "" else float(s)
            m = RoundMetrics(
                round=int(row[1]), loss=float(row[2]), loss_gap=opt(row[3]),
                grad_norm_sq=float(row[4]), dist_to_opt_sq=opt(row[5]),
                err_mean_sq=opt(row[6]), err_norm=opt(row[7]),
                uplink_bits=int(row[8]), downlink_bits=int(row[9]),
                cum_uplink_bits=int(row[10]), cum_downlink_bits=int(row[11]))
            per_seed.setdefault(seed, []).append(m)
    return [SeedResult(seed, rows) for seed, rows in sorted(per_seed.items())]
