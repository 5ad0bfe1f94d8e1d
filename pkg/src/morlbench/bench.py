"""Benchmark orchestration: generate, train, sweep preferences, score, report.

Every stage reads and writes plain files under one output directory, so
stages can run separately (see :mod:`morlbench.cli`) or in one go with
:func:`run_benchmark`. Seeds for training and for every evaluation cell are
derived from the master seed by hashing, so cells can be evaluated in any
order and re-runs are byte-identical.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BASELINE_PREFERENCE, BehaviorCloning, ConservativeQLearning, DoubleDQN
from .cpql import ConservativeParetoQLearning
from .dt import DecisionTransformer
from .env import EnvConfig, generate_dataset, true_policy_value
from .mdp import Dataset, PreferenceVector, concat_datasets, load_dataset, preference_grid, save_dataset, split_dataset
from .ope import OpeEstimate, bootstrap_ci, fit_behavior, fit_fqe, wis_components

log = logging.getLogger("morlbench")

ALGORITHMS = ("bc", "ddqn", "cql", "c_cpql", "ap_cpql", "peda_dt")
METRICS = ("wis", "fqe")
FIXED_PREFERENCE = ("bc", "ddqn", "cql")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    """Flat key/value benchmark settings; ``env_*`` keys map onto :class:`EnvConfig`."""

    seeds: tuple = (0,)
    episodes: int = 2000
    test_fraction: float = 0.2
    gamma: float = 0.99
    sweep_step: float = 0.1
    algorithms: tuple = ALGORITHMS
    metrics: tuple = METRICS
    bootstrap: int = 1000
    level: float = 0.95
    rho_clip: float | None = 20.0
    p_min: float = 1e-3
    behavior_models: int = 1
    eval_epsilon: float = 0.05
    bc_epochs: int = 30
    q_iterations: int = 5000
    cql_alpha: float = 1.0
    cpql_alpha: float = 0.03
    cpql_iterations: int = 5000
    dt_epochs: int = 10
    dt_context_length: int = 10
    dt_embed_dim: int = 64
    target_rtg_scale: float = 1.0
    fqe_iterations: int = 50
    fqe_steps: int = 300
    oracle_rollouts: int = 5000
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.algorithms:
            raise ConfigError("at least one algorithm is required")
        if not self.metrics:
            raise ConfigError("at least one metric is required")
        bad = set(self.algorithms) - set(ALGORITHMS)
        if bad:
            raise ConfigError(f"unknown algorithms {sorted(bad)}; choose from {ALGORITHMS}")
        bad = set(self.metrics) - set(METRICS)
        if bad:
            raise ConfigError(f"unknown metrics {sorted(bad)}; choose from {METRICS}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.bootstrap < 100:
            raise ConfigError("bootstrap must be >= 100")
        if self.behavior_models < 1:
            raise ConfigError("behavior_models must be >= 1")
        try:
            self.sweep
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def sweep(self) -> list[PreferenceVector]:
        return preference_grid(self.sweep_step)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "env":
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        for k, v in self.env.to_dict().items():
            if k != "seed":
                out[f"env_{k}"] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        names = {f.name for f in dataclasses.fields(cls)} - {"env"}
        env_names = {f.name for f in dataclasses.fields(EnvConfig)} - {"seed"}
        kw, env_kw = {}, {}
        for k, v in d.items():
            if k.startswith("env_") and k[4:] in env_names:
                env_kw[k[4:]] = tuple(v) if isinstance(v, list) else v
            elif k in names:
                kw[k] = v
            elif k == "seed":
                kw["seeds"] = [v]
            else:
                raise ConfigError(f"unknown config key {k!r}")
        try:
            return cls(env=EnvConfig(**env_kw), **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def with_(self, **kw) -> "BenchConfig":
        return BenchConfig.from_dict({**self.to_dict(), **kw})

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def load_config(path) -> BenchConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    return BenchConfig.from_dict(raw)


def derive_seed(master: int, *keys) -> int:
    """Stable 32-bit seed from the master seed and any labels."""
    text = "|".join([str(master), *map(str, keys)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


@dataclass(frozen=True)
class ResultRow:
    preference: PreferenceVector
    algorithm: str
    metric: str
    value: float
    ci_lower: float
    ci_upper: float
    ci_width: float
    seed: int

    FIELDS = ("preference", "w_mortality", "algorithm", "metric", "value", "ci_lower", "ci_upper",
              "ci_width", "seed")

    @classmethod
    def from_estimate(cls, est: OpeEstimate, algorithm: str, seed: int) -> "ResultRow":
        return cls(est.preference, algorithm, est.metric, est.value, est.ci_lower, est.ci_upper,
                   est.ci_upper - est.ci_lower, seed)

    @classmethod
    def missing(cls, w: PreferenceVector, algorithm: str, metric: str, seed: int) -> "ResultRow":
        nan = float("nan")
        return cls(w, algorithm, metric, nan, nan, nan, nan, seed)

    @property
    def ok(self) -> bool:
        return math.isfinite(self.value)

    def record(self) -> list[str]:
        def num(x):
            return repr(float(x)) if math.isfinite(x) else "NA"
        return [self.preference.label(), repr(self.preference.w_mortality), self.algorithm, self.metric,
                num(self.value), num(self.ci_lower), num(self.ci_upper), num(self.ci_width), str(self.seed)]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def results_csv(rows: list[ResultRow]) -> str:
    return _csv(ResultRow.FIELDS, [r.record() for r in rows])


def read_results(path) -> list[ResultRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            def num(k):
                return float("nan") if rec[k] == "NA" else float(rec[k])
            out.append(ResultRow(PreferenceVector.from_mortality(float(rec["w_mortality"])), rec["algorithm"],
                                 rec["metric"], num("value"), num("ci_lower"), num("ci_upper"),
                                 num("ci_width"), int(rec["seed"])))
    return out


# ---------------------------------------------------------------- stages


def _seed_dir(out: Path, seed: int) -> Path:
    return Path(out) / f"seed_{seed}"


def generate_stage(cfg: BenchConfig, out, seed: int) -> tuple[Dataset, Dataset]:
    d = generate_dataset(cfg.env.with_(seed=derive_seed(seed, "generate")), cfg.episodes)
    train, test = split_dataset(d, cfg.test_fraction, derive_seed(seed, "split"))
    base = _seed_dir(out, seed) / "data"
    base.mkdir(parents=True, exist_ok=True)
    save_dataset(train, base / "train.jsonl")
    save_dataset(test, base / "test.jsonl")
    log.info("seed %d: %d train / %d test episodes", seed, len(train), len(test))
    return train, test


def load_split(out, seed: int) -> tuple[Dataset, Dataset]:
    base = _seed_dir(out, seed) / "data"
    return load_dataset(base / "train.jsonl"), load_dataset(base / "test.jsonl")


def make_estimator(cfg: BenchConfig, algorithm: str, seed: int):
    s = derive_seed(seed, "train", algorithm)
    if algorithm == "bc":
        return BehaviorCloning(epochs=cfg.bc_epochs, seed=s)
    if algorithm == "ddqn":
        return DoubleDQN(preference=BASELINE_PREFERENCE, gamma=cfg.gamma, iterations=cfg.q_iterations, seed=s)
    if algorithm == "cql":
        return ConservativeQLearning(preference=BASELINE_PREFERENCE, alpha=cfg.cql_alpha, gamma=cfg.gamma,
                                     iterations=cfg.q_iterations, seed=s)
    if algorithm in ("c_cpql", "ap_cpql"):
        variant = "concat" if algorithm == "c_cpql" else "preference_attention"
        return ConservativeParetoQLearning(variant=variant, alpha=cfg.cpql_alpha, gamma=cfg.gamma,
                                           iterations=cfg.cpql_iterations, seed=s)
    if algorithm == "peda_dt":
        return DecisionTransformer(context_length=cfg.dt_context_length, embed_dim=cfg.dt_embed_dim,
                                   epochs=cfg.dt_epochs, seed=s)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


_LOADERS = {"bc": BehaviorCloning, "ddqn": DoubleDQN, "cql": DoubleDQN, "c_cpql": ConservativeParetoQLearning,
            "ap_cpql": ConservativeParetoQLearning, "peda_dt": DecisionTransformer}


def train_stage(cfg: BenchConfig, out, seed: int, train: Dataset) -> dict:
    base = _seed_dir(out, seed) / "models"
    base.mkdir(parents=True, exist_ok=True)
    models = {}
    for alg in cfg.algorithms:
        log.info("seed %d: training %s", seed, alg)
        model = make_estimator(cfg, alg, seed).fit(train)
        model.save(base / f"{alg}.json")
        models[alg] = model
    return models


def load_models(cfg: BenchConfig, out, seed: int) -> dict:
    base = _seed_dir(out, seed) / "models"
    return {alg: _LOADERS[alg].load(base / f"{alg}.json") for alg in cfg.algorithms}


def make_policy(cfg: BenchConfig, algorithm: str, model, w: PreferenceVector):
    """The policy scored at preference ``w``; fixed-preference baselines ignore ``w``."""
    if algorithm == "bc":
        return model.policy()
    if algorithm in ("ddqn", "cql"):
        return model.policy(cfg.eval_epsilon)
    if algorithm in ("c_cpql", "ap_cpql"):
        return model.policy_at(w, cfg.eval_epsilon)
    return model.policy(w, cfg.target_rtg_scale, cfg.eval_epsilon)


def score_cell(cfg: BenchConfig, policy, test: Dataset, behavior, w: PreferenceVector, metric: str,
               seed: int) -> OpeEstimate:
    if metric == "wis":
        comp = wis_components(policy, test, behavior, w, cfg.gamma, cfg.rho_clip)
        comp.check_bounds()
        estimator = comp.value
    else:
        estimator = fit_fqe(policy, test, w, cfg.gamma, cfg.fqe_iterations, seed=seed,
                            steps_per_iteration=cfg.fqe_steps).estimate
    return bootstrap_ci(estimator, len(test), cfg.bootstrap, cfg.level, seed, metric, w)


def evaluate_stage(cfg: BenchConfig, seed: int, test: Dataset, models: dict,
                   logged: Dataset | None = None) -> tuple[list[ResultRow], list[dict]]:
    """Score every (algorithm, preference, metric) cell on ``test``.

    The behavior model is cloned from ``logged`` (all behavior episodes,
    train and test alike) when given, else from ``test``.
    """
    behavior = fit_behavior(logged if logged is not None else test, cfg.p_min,
                            seed=derive_seed(seed, "behavior"), n_models=cfg.behavior_models)
    rows, failures = [], []
    for alg in cfg.algorithms:
        for w in cfg.sweep:
            policy = make_policy(cfg, alg, models[alg], w)
            for metric in cfg.metrics:
                cell_seed = derive_seed(seed, alg, w.label(), metric)
                try:
                    est = score_cell(cfg, policy, test, behavior, w, metric, cell_seed)
                    rows.append(ResultRow.from_estimate(est, alg, seed))
                except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                    log.warning("cell %s %s %s failed: %s", alg, w.label(), metric, exc)
                    failures.append({"seed": seed, "algorithm": alg, "preference": w.label(), "metric": metric,
                                     "error": f"{type(exc).__name__}: {exc}"})
                    rows.append(ResultRow.missing(w, alg, metric, seed))
        log.info("seed %d: evaluated %s", seed, alg)
    return rows, failures


# ---------------------------------------------------------------- reports


def _fmt(x: float) -> str:
    return f"{x:.4f}" if math.isfinite(x) else "NA"


def _aggregate(rows: list[ResultRow], metric: str) -> dict:
    """(w_mortality, algorithm) -> (value, lower, upper) averaged over seeds."""
    cells = {}
    for r in rows:
        if r.metric == metric:
            cells.setdefault((r.preference.w_mortality, r.algorithm), []).append(r)
    out = {}
    for key, rs in cells.items():
        if all(r.ok for r in rs):
            out[key] = tuple(float(np.mean([getattr(r, f) for r in rs])) for f in ("value", "ci_lower", "ci_upper"))
    return out


def emit_table(rows: list[ResultRow], metric: str, algorithms=None, preferences=None) -> str:
    """Preference x algorithm table: value, +/- half-width and full CI width per algorithm.

    The ``max`` column lists every algorithm attaining the row maximum.
    Missing cells are written as NA and logged.
    """
    metric_rows = [r for r in rows if r.metric == metric]
    if algorithms is None:
        algorithms = [a for a in ALGORITHMS if any(r.algorithm == a for r in metric_rows)]
        algorithms += sorted({r.algorithm for r in metric_rows} - set(algorithms))
    if preferences is None:
        preferences = sorted({r.preference for r in metric_rows}, key=lambda p: p.w_mortality)
    cells = _aggregate(rows, metric)
    header = ["preference"]
    for a in algorithms:
        header += [a, f"{a}_pm_half_width", f"{a}_ci_width"]
    header.append("max")
    body = []
    for p in preferences:
        line, vals = [p.label()], {}
        for a in algorithms:
            cell = cells.get((p.w_mortality, a))
            if cell is None:
                log.warning("table %s: missing cell %s %s", metric, p.label(), a)
                line += ["NA", "NA", "NA"]
                continue
            v, lo, hi = cell
            vals[a] = v
            line += [_fmt(v), _fmt((hi - lo) / 2.0), _fmt(hi - lo)]
        best = max(vals.values()) if vals else None
        line.append("|".join(a for a in algorithms if a in vals and vals[a] == best))
        body.append(line)
    return _csv(header, body)


def plot_csv(rows: list[ResultRow], metric: str) -> str:
    """Series per algorithm: x = mortality weight, y = value, with CI bounds."""
    cells = _aggregate(rows, metric)
    order = {a: i for i, a in enumerate(ALGORITHMS)}
    keys = sorted(cells, key=lambda k: (order.get(k[1], len(order)), k[1], k[0]))
    return _csv(["algorithm", "x", "y", "y_lo", "y_hi"],
                [[a, repr(x), *(repr(v) for v in cells[(x, a)])] for x, a in keys])


def calibration_csv(records: list[dict]) -> str:
    """records: dicts with algorithm, preference, metric, ope_value, oracle_value."""
    body, errors = [], {}
    for r in records:
        err = abs(r["ope_value"] - r["oracle_value"])
        errors.setdefault(r["metric"], []).append(err)
        body.append([r["algorithm"], r["preference"], r["metric"], _fmt(r["ope_value"]),
                     _fmt(r["oracle_value"]), _fmt(err)])
    for metric, errs in errors.items():
        body.append(["summary", "", metric, "", "", _fmt(float(np.mean(errs)))])
    return _csv(["algorithm", "preference", "metric", "ope_value", "oracle_value", "absolute_error"], body)


def calibration_records(cfg: BenchConfig, seed: int, models: dict, stats, rows: list[ResultRow],
                        metrics=None) -> list[dict]:
    """Pair each OPE value with the simulator value of the same policy.

    ``metrics`` may include ``"oracle"``, which scores the oracle against
    itself.
    """
    metrics = tuple(metrics or cfg.metrics)
    ope = {(r.algorithm, r.preference.w_mortality, r.metric): r.value for r in rows if r.seed == seed}
    env = cfg.env.with_(seed=derive_seed(seed, "generate"))
    out = []
    for alg in cfg.algorithms:
        for w in cfg.sweep:
            truth = true_policy_value(make_policy(cfg, alg, models[alg], w), w, cfg.gamma, cfg.oracle_rollouts,
                                      seed=derive_seed(seed, "oracle", alg, w.label()), cfg=env, stats=stats).value
            for metric in metrics:
                value = truth if metric == "oracle" else ope.get((alg, w.w_mortality, metric), float("nan"))
                out.append({"algorithm": alg, "preference": w.label(), "metric": metric,
                            "ope_value": value, "oracle_value": truth})
    return out


def calibration_report(cfg: BenchConfig, out=None, metrics=None) -> str:
    """Calibration CSV for a benchmark whose models and results already exist under ``out``."""
    if out is None:
        raise ConfigError("calibration needs the output directory of a trained benchmark")
    rows = read_results(Path(out) / "results.csv") if (Path(out) / "results.csv").exists() else []
    records = []
    for seed in cfg.seeds:
        train, _ = load_split(out, seed)
        records += calibration_records(cfg, seed, load_models(cfg, out, seed), train.normalization_stats, rows,
                                       metrics)
    return calibration_csv(records)


# ---------------------------------------------------------------- driver


def write_file(path: Path, text: str) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def write_reports(cfg: BenchConfig, out, rows: list[ResultRow]) -> dict:
    out = Path(out)
    digests = {}
    for metric in cfg.metrics:
        digests[f"table_{metric}.csv"] = write_file(out / f"table_{metric}.csv", emit_table(rows, metric))
        digests[f"plot_{metric}.csv"] = write_file(out / f"plot_{metric}.csv", plot_csv(rows, metric))
    return digests


def write_manifest(cfg: BenchConfig, out, files: dict, failures: list[dict] | None = None) -> None:
    """Write manifest.json; entries from an earlier stage with the same config are kept."""
    path = Path(out) / "manifest.json"
    merged, prior_failures = {}, []
    if path.exists():
        prior = json.loads(path.read_text())
        if prior.get("config_hash") == cfg.hash():
            merged, prior_failures = prior.get("files", {}), prior.get("failures", [])
    merged.update(files)
    manifest = {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seeds": {str(s): {"generate": derive_seed(s, "generate"), "split": derive_seed(s, "split"),
                           "behavior": derive_seed(s, "behavior"),
                           "train": {a: derive_seed(s, "train", a) for a in cfg.algorithms}}
                  for s in cfg.seeds},
        "files": dict(sorted(merged.items())),
        "failures": prior_failures if failures is None else failures,
    }
    write_file(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@dataclass
class BenchRun:
    rows: list
    failures: list
    out: Path

    @property
    def ok(self) -> bool:
        return not self.failures


def run_benchmark(config, out=None, calibrate: bool = True) -> BenchRun:
    """generate -> split -> train -> sweep x metrics -> results, tables, plots, calibration, manifest."""
    cfg = config if isinstance(config, BenchConfig) else load_config(config)
    out = Path(out if out is not None else "bench_out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").unlink(missing_ok=True)
    write_file(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    rows, failures, cal = [], [], []
    for seed in cfg.seeds:
        train, test = generate_stage(cfg, out, seed)
        models = train_stage(cfg, out, seed, train)
        r, f = evaluate_stage(cfg, seed, test, models, concat_datasets(train, test))
        rows += r
        failures += f
        if calibrate:
            cal += calibration_records(cfg, seed, models, train.normalization_stats, r)
    files = {"results.csv": write_file(out / "results.csv", results_csv(rows))}
    files.update(write_reports(cfg, out, rows))
    if calibrate:
        files["calibration.csv"] = write_file(out / "calibration.csv", calibration_csv(cal))
    write_manifest(cfg, out, files, failures)
    return BenchRun(rows, failures, out)


__all__ = [
    "ALGORITHMS", "BenchConfig", "BenchRun", "ConfigError", "METRICS", "ResultRow", "calibration_csv",
    "calibration_records", "calibration_report", "derive_seed", "emit_table", "evaluate_stage",
    "generate_stage", "load_config", "load_models", "load_split", "make_estimator", "make_policy",
    "plot_csv", "read_results", "results_csv", "run_benchmark", "score_cell", "train_stage", "write_file",
    "write_manifest",
    "write_reports",
]
