"""Command-line front end: run experiments, verify bounds, certify compressors.

Runs are described by a flat ``key = value`` config file (grammar below) so a
fifteen-parameter verifier run is archivable and byte-reproducible.  Outputs
land under ``$FEDPROJ_OUT`` (default ``./runs``) in a subdirectory named by
the config's ``name`` key (default: config file stem).

Config grammar
--------------
* one ``key = value`` pair per line; ``#`` starts a comment; blank lines ok
* unknown keys are rejected with the offending line number
* ``seeds`` accepts ``a:b`` (half-open range) or a comma list
* every omitted key takes its default; the effective values (defaults
  included) are echoed to ``effective_config.cfg`` next to the metrics

Exit codes: ``run`` 0 ok / 1 bad config / 2 divergence; ``verify`` 0 PASS /
3 FAIL / 4 SKIPPED / 1 error; ``certify`` and ``export`` 0 ok / 1 error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .accounting import CostModel, IndexBitsMode
from .algorithms import AlgorithmConfig, AlgorithmKind
from .compressors import (
    CompressorKind,
    CompressorSpec,
    beta_certified,
    compress,
    decode,
    estimate_beta,
    estimate_delta,
    k_eff,
)
from .harness import (
    ObjectiveConfig,
    OutputRule,
    RunConfig,
    VerifierError,
    build_objective,
    read_metrics_csv,
    run,
    select_output,
    theorem1_eta_cap,
    theorem2_eta_cap,
    verify_lemma_error_bound,
    verify_theorem1,
    verify_theorem2,
    write_metrics_csv,
)
from .objectives import NoiseKind, NoiseModel, ObjectiveKind
from .vectors import ParamVector, StreamPurpose, derive_stream

__all__ = ["main", "parse_config_file", "ConfigError", "VERIFY_ITEMS"]

VERIFY_ITEMS = ("t1.1", "t1.2", "t1.3", "t2.1", "t2.2", "t2.3", "lemmaA1")


class ConfigError(ValueError):
    pass


def _parse_seeds(text: str) -> Tuple[int, ...]:
    text = text.strip()
    if ":" in text:
        lo, hi = text.split(":", 1)
        return tuple(range(int(lo), int(hi)))
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


# key -> (parser, default)
_SCHEMA: Dict[str, tuple] = {
    "name": (str, None),
    # objective
    "objective": (str, "quadratic"),
    "dim": (int, 2),
    "clients": (int, 2),
    "centers": (str, "axis_pair"),
    "separation": (float, 2.0),
    "center_scale": (float, 1.0),
    "data_seed": (int, 7),
    "samples_per_client": (int, 40),
    "ridge": (float, 0.1),
    "heterogeneity": (float, 0.5),
    "d_in": (int, 5),
    "hidden": (int, 4),
    # algorithm
    "algorithm": (str, "projfl"),
    "eta": (float, 0.1),
    "history_window": (int, 3),
    "zeta": (float, 0.75),
    "gamma": (float, 0.9),
    "diana_alpha": (float, 0.9),
    "diana_beta": (float, 0.1),
    "projection_layerwise": (_parse_bool, False),
    # compressor
    "compressor": (str, "identity"),
    "k_fraction": (float, 1.0),
    "s_levels": (int, 1),
    "layerwise": (_parse_bool, False),
    # noise
    "noise": (str, "gaussian_iso"),
    "sigma": (float, 0.0),
    # run
    "rounds": (int, 100),
    "seeds": (_parse_seeds, (0,)),
    "cadence": (int, 1),
    "output_rule": (str, "last"),
    "divergence_threshold": (float, 1e12),
    # accounting
    "value_bits": (int, 32),
    "index_bits_mode": (str, "fixed32"),
    "scalar_bits": (int, 32),
    "header_bits": (int, 0),
}

_KEY_ORDER = list(_SCHEMA)


def parse_config_file(path) -> Dict:
    """Parse and validate a config file into a plain key->value dict."""
    values: Dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            parser, _ = _SCHEMA[key]
            try:
                values[key] = parser(val)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    for key, (_, default) in _SCHEMA.items():
        values.setdefault(key, default)
    if values["name"] is None:
        values["name"] = Path(path).stem
    return values


def build_run_config(values: Dict) -> RunConfig:
    try:
        ocfg = ObjectiveConfig(
            kind=ObjectiveKind(values["objective"]),
            d=values["dim"],
            clients=values["clients"],
            centers=values["centers"],
            separation=values["separation"],
            center_scale=values["center_scale"],
            data_seed=values["data_seed"],
            samples_per_client=values["samples_per_client"],
            ridge=values["ridge"],
            heterogeneity=values["heterogeneity"],
            d_in=values["d_in"],
            hidden=values["hidden"],
        )
        alg = AlgorithmConfig(
            kind=AlgorithmKind(values["algorithm"]),
            eta=values["eta"],
            compressor=CompressorSpec(
                kind=CompressorKind(values["compressor"]),
                k_fraction=values["k_fraction"],
                s_levels=values["s_levels"],
                layerwise=values["layerwise"],
            ),
            K=values["history_window"],
            zeta=values["zeta"],
            gamma=values["gamma"],
            diana_alpha=values["diana_alpha"],
            diana_beta=values["diana_beta"],
            projection_layerwise=values["projection_layerwise"],
        )
        return RunConfig(
            objective=ocfg,
            algorithm=alg,
            noise=NoiseModel(values["sigma"], NoiseKind(values["noise"])),
            rounds=values["rounds"],
            seeds=values["seeds"],
            cadence=values["cadence"],
            output_rule=OutputRule(values["output_rule"]),
            cost_model=CostModel(
                value_bits=values["value_bits"],
                index_bits_mode=IndexBitsMode(values["index_bits_mode"]),
                scalar_bits=values["scalar_bits"],
                header_bits=values["header_bits"],
            ),
            divergence_threshold=values["divergence_threshold"],
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _seeds_repr(seeds: Tuple[int, ...]) -> str:
    if len(seeds) > 1 and seeds == tuple(range(seeds[0], seeds[-1] + 1)):
        return f"{seeds[0]}:{seeds[-1] + 1}"
    return ",".join(str(s) for s in seeds)


def write_effective_config(path, values: Dict):
    lines = []
    for key in _KEY_ORDER:
        val = values[key]
        if key == "seeds":
            val = _seeds_repr(val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    Path(path).write_text("\n".join(lines) + "\n")


def _resolve_out_dir(values: Dict, out_flag: Optional[str]) -> Path:
    root = Path(out_flag or os.environ.get("FEDPROJ_OUT", "runs"))
    out = root / values["name"]
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default_jobs(n_seeds: int) -> int:
    return max(1, min(n_seeds, os.cpu_count() or 1))


def _eta_cap_warning(config: RunConfig) -> Optional[str]:
    """Loosest applicable theorem cap, when constants allow computing one."""
    alg = config.algorithm
    try:
        obj = build_objective(config.objective)
    except Exception:
        return None
    try:
        if alg.kind is AlgorithmKind.PROJFL and beta_certified(alg.compressor):
            beta = estimate_beta(alg.compressor, obj.d, obj.layer_partition)
            cap = max(theorem1_eta_cap(i, obj, beta, obj.M) for i in (1, 2, 3)
                      if not (i == 1 and obj.mu <= 0))
        elif alg.kind is AlgorithmKind.PROJFL_EF and \
                alg.compressor.kind in (CompressorKind.TOPK, CompressorKind.IDENTITY):
            delta = estimate_delta(alg.compressor, obj.d, obj.layer_partition)
            cap = max(theorem2_eta_cap(i, obj, delta) for i in (1, 2, 3)
                      if not (i == 1 and obj.mu <= 0))
        else:
            return None
    except Exception:
        return None
    if alg.eta > cap * (1 + 1e-12):
        return (f"warning: eta={alg.eta} exceeds the loosest applicable "
                f"convergence-bound cap {cap:.6g}; running anyway")
    return None


def _summarize(results) -> dict:
    per_seed = []
    for res in results:
        last = res.rows[-1]
        per_seed.append({
            "seed": res.seed,
            "rounds_recorded": len(res.rows),
            "diverged_at": res.diverged_at,
            "final_loss": last.loss,
            "min_loss": min(m.loss for m in res.rows),
            "final_grad_norm_sq": last.grad_norm_sq,
            "cum_uplink_bits": last.cum_uplink_bits,
            "cum_downlink_bits": last.cum_downlink_bits,
            "cum_total_bits": last.cum_total_bits,
        })
    losses = [s["final_loss"] for s in per_seed]
    return {
        "seeds": len(per_seed),
        "mean_final_loss": float(np.mean(losses)),
        "per_seed": per_seed,
    }


def cmd_run(args) -> int:
    try:
        values = parse_config_file(args.config)
        config = build_run_config(values)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    warning = _eta_cap_warning(config)
    if warning:
        print(warning, file=sys.stderr)
    out = _resolve_out_dir(values, args.out)
    jobs = args.jobs or _default_jobs(len(config.seeds))
    results = run(config, jobs=jobs)
    write_metrics_csv(out / "metrics.csv", results)
    write_effective_config(out / "effective_config.cfg", values)
    summary = _summarize(results)
    summary["output_rule"] = config.output_rule.value
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    diverged = [r.seed for r in results if r.diverged_at is not None]
    if diverged:
        print(f"divergence: seeds {diverged} exceeded the iterate-norm guard",
              file=sys.stderr)
        return 2
    print(f"wrote {out / 'metrics.csv'} ({len(results)} seeds x "
          f"{len(results[0].rows)} rows)")
    return 0


def cmd_verify(args) -> int:
    if args.item not in VERIFY_ITEMS:
        print(f"error: unknown item {args.item!r} (choose from {', '.join(VERIFY_ITEMS)})",
              file=sys.stderr)
        return 1
    try:
        values = parse_config_file(args.config)
        config = build_run_config(values)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = _resolve_out_dir(values, args.out)
    obj = build_objective(config.objective)
    try:
        if args.reuse:
            results = read_metrics_csv(args.reuse)
        else:
            jobs = args.jobs or _default_jobs(len(config.seeds))
            results = run(config, jobs=jobs)
            write_metrics_csv(out / "metrics.csv", results)
            write_effective_config(out / "effective_config.cfg", values)
        if args.item.startswith("t1."):
            report = verify_theorem1(int(args.item[-1]), results, obj, config)
        elif args.item.startswith("t2."):
            report = verify_theorem2(int(args.item[-1]), results, obj, config)
        else:
            report = verify_lemma_error_bound(results, obj, config)
    except VerifierError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    report_path = out / f"report_{args.item.replace('.', '_')}.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{args.item}: {report.status} ({report.reason})")
    if report.caveats:
        for caveat in report.caveats:
            print(f"  caveat: {caveat}")
    print(f"wrote {report_path}")
    return {"PASS": 0, "FAIL": 3, "SKIPPED": 4}[report.status]


def _certify_randk(spec: CompressorSpec, dim: int) -> List[str]:
    beta = estimate_beta(spec, dim)
    lines = [f"randk d={dim} k_eff={k_eff(spec.k_fraction, dim)}: beta = {beta:.12g}"]
    rng = np.random.default_rng(0)
    if dim <= 6:
        k = k_eff(spec.k_fraction, dim)
        worst_mean = worst_second = 0.0
        for _ in range(3):
            g = rng.standard_normal(dim)
            subsets = list(itertools.combinations(range(dim), k))
            mean = np.zeros(dim)
            second = 0.0
            for S in subsets:
                v = np.zeros(dim)
                v[list(S)] = (dim / k) * g[list(S)]
                mean += v / len(subsets)
                second += float(v @ v) / len(subsets)
            worst_mean = max(worst_mean, float(np.abs(mean - g).max()))
            worst_second = max(worst_second, abs(second - beta * float(g @ g)))
        lines.append(f"  exhaustive enumeration over all {len(subsets)} subsets: "
                     f"max |E[C(g)] - g| = {worst_mean:.3g}, "
                     f"|E||C(g)||^2 - beta*||g||^2| = {worst_second:.3g}")
    else:
        g = rng.standard_normal(dim)
        n = 10_000
        acc = np.zeros(dim)
        second = 0.0
        for r in range(n):
            v = decode(compress(spec, ParamVector(g),
                                derive_stream(0, 0, r, StreamPurpose.COMPRESSOR))).values
            acc += v / n
            second += float(v @ v) / n
        lines.append(f"  Monte-Carlo ({n} trials): max |mean - g| = "
                     f"{float(np.abs(acc - g).max()):.3g}, "
                     f"E||C(g)||^2 / (beta*||g||^2) = {second / (beta * float(g @ g)):.4f}")
    return lines


def _certify_topk(spec: CompressorSpec, dim: int) -> List[str]:
    delta = estimate_delta(spec, dim)
    k = k_eff(spec.k_fraction, dim)
    lines = [f"topk d={dim} k_eff={k}: delta = {delta:.12g}"]
    witness = ParamVector(np.ones(dim))
    err = decode(compress(spec, witness)).values - witness.values
    lines.append(f"  worst-case witness (all-equal magnitudes): ||C(g)-g||^2 = "
                 f"{float(err @ err):.12g} = (1-delta)*||g||^2 = {(1 - delta) * dim:.12g}")
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(10_000):
        g = rng.standard_normal(dim)
        err = decode(compress(spec, ParamVector(g))).values - g
        worst = max(worst, float(err @ err) / float(g @ g))
    lines.append(f"  10000 random vectors: max ||C(g)-g||^2/||g||^2 = {worst:.6f} "
                 f"<= 1-delta = {1 - delta:.6f}")
    return lines


def _certify_qsgd(spec: CompressorSpec, dim: int) -> List[str]:
    beta = estimate_beta(spec, dim)
    s = spec.s_levels
    lines = [f"qsgd d={dim} s={s}: beta bound = 1 + min(d/s^2, sqrt(d)/s) = {beta:.12g}"]
    rng = np.random.default_rng(2)
    if dim <= 3 and s <= 2:
        worst = 0.0
        for _ in range(3):
            g = rng.standard_normal(dim)
            norm = float(np.linalg.norm(g))
            mean = np.zeros(dim)
            for picks in itertools.product([0, 1], repeat=dim):
                p = 1.0
                v = np.zeros(dim)
                for j, up in enumerate(picks):
                    scaled = abs(g[j]) * s / norm
                    low = min(math.floor(scaled), s - 1)
                    p_low = 1.0 + low - scaled
                    p *= (1.0 - p_low) if up else p_low
                    v[j] = norm * np.sign(g[j]) * (low + up) / s
                mean += p * v
            worst = max(worst, float(np.abs(mean - g).max()))
        lines.append(f"  exact outcome enumeration: max |E[C(g)] - g| = {worst:.3g}")
    g = rng.standard_normal(dim)
    n = 10_000
    second = 0.0
    for r in range(n):
        v = decode(compress(spec, ParamVector(g),
                            derive_stream(0, 0, r, StreamPurpose.COMPRESSOR))).values
        second += float(v @ v) / n
    lines.append(f"  Monte-Carlo ({n} trials): E||C(g)||^2 / (beta*||g||^2) = "
                 f"{second / (beta * float(g @ g)):.4f} (<= 1 expected)")
    return lines


def cmd_certify(args) -> int:
    try:
        spec = CompressorSpec(kind=CompressorKind(args.kind),
                              k_fraction=args.k_fraction,
                              s_levels=args.s_levels,
                              layerwise=args.layerwise)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if spec.kind is CompressorKind.IDENTITY:
        lines = ["identity: beta = 1, delta = 1 (exact, no compression error)"]
    elif spec.kind is CompressorKind.RANDK:
        lines = _certify_randk(spec, args.dim)
        lines.append(f"  implied delta (scaled operator) = {estimate_delta(spec, args.dim):.12g}")
    elif spec.kind is CompressorKind.TOPK:
        lines = _certify_topk(spec, args.dim)
    else:
        lines = _certify_qsgd(spec, args.dim)
    print("\n".join(lines))
    return 0


def cmd_export(args) -> int:
    metrics = Path(args.run_dir) / "metrics.csv"
    if not metrics.exists():
        print(f"error: {metrics} not found", file=sys.stderr)
        return 1
    results = read_metrics_csv(metrics)
    summary = _summarize(results)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text + "\n")
        print(f"wrote {args.output}")
    else:
        print(text)
    return 0


def preset_path(name: str) -> Path:
    """Path of a bundled preset config (without the .cfg suffix)."""
    base = resources.files("fedproj").joinpath("presets")
    candidate = base.joinpath(f"{name}.cfg")
    if not candidate.is_file():
        available = sorted(p.name[:-4] for p in base.iterdir() if p.name.endswith(".cfg"))
        raise FileNotFoundError(f"no preset {name!r}; available: {', '.join(available)}")
    return Path(str(candidate))


def _add_config_arg(sub, kind):
    sub.add_argument("config", help="path to a run config file, or preset:<name>")
    sub.add_argument("--out", default=None,
                     help="output root (default: $FEDPROJ_OUT or ./runs)")
    sub.add_argument("--jobs", type=int, default=None,
                     help="parallel seed workers (default: seeds capped at cores)")


def _resolve_preset(args):
    if args.config.startswith("preset:"):
        args.config = str(preset_path(args.config.split(":", 1)[1]))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedproj",
        description="communication-compressed federated optimization simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a run config and write metrics")
    _add_config_arg(p_run, "run")

    p_verify = sub.add_parser("verify", help="run and check a convergence bound")
    _add_config_arg(p_verify, "verify")
    p_verify.add_argument("--item", required=True,
                          help=f"bound to check: {', '.join(VERIFY_ITEMS)}")
    p_verify.add_argument("--reuse", default=None,
                          help="verify a previously written metrics.csv instead of rerunning")

    p_cert = sub.add_parser("certify", help="print compressor certificates with evidence")
    p_cert.add_argument("--kind", required=True,
                        choices=[k.value for k in CompressorKind])
    p_cert.add_argument("--dim", type=int, required=True)
    p_cert.add_argument("--k-fraction", type=float, default=1.0, dest="k_fraction")
    p_cert.add_argument("--s-levels", type=int, default=1, dest="s_levels")
    p_cert.add_argument("--layerwise", action="store_true")

    p_export = sub.add_parser("export", help="summarize a run directory as JSON")
    p_export.add_argument("run_dir")
    p_export.add_argument("--output", default=None, help="write JSON here instead of stdout")

    args = parser.parse_args(argv)
    if args.command in ("run", "verify"):
        try:
            _resolve_preset(args)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    handler = {"run": cmd_run, "verify": cmd_verify,
               "certify": cmd_certify, "export": cmd_export}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
