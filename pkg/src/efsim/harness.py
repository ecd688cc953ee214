"""Experiment registry, YAML configs, CSV/SVG emission and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import __version__
from .ancilla import AncillaNoiseParams, perturbative_expansion
from .analytics import f_infinity_two_unitary, floor_expansion, limit_state, single_control_guarantee
from .channels import ChannelError, TwoUnitaryModel, make_standard_channel, random_channel
from .engine import EfConfig, run
from .linalg import H, I2, STATE_PRESETS, X, Y, Z, preset_state
from .qram import QramSpec, loglog_slope, qram_ancilla_error_experiment, qram_ef_config, qram_ef_experiment, rows_to_csv

IDEAL_GATES = {"I": I2, "X": X, "Y": Y, "Z": Z, "H": H}
CONFIG_CHANNEL_KINDS = ("identity", "dephasing", "bitflip", "depolarizing", "amplitude_damping")
TOP_LEVEL_KEYS = ("experiment", "seed", "samples", "threads", "output_dir", "params")


class ConfigError(ValueError):
    def __init__(self, issues: list["ConfigIssue"]):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues))


class UnknownExperimentError(KeyError):
    pass


@dataclass(frozen=True)
class ConfigIssue:
    field: str
    message: str
    line: int | None = None

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line is not None else ""
        return f"{where}{self.field}: {self.message}"


# -- parameter schema ------------------------------------------------------------


@dataclass(frozen=True)
class Param:
    """One experiment parameter. ``kind`` is int, float, str, list or dict."""

    name: str
    kind: type
    default: Any
    unit: str = ""
    low: float | None = None
    high: float | None = None
    choices: tuple = ()
    item: type | None = None
    help: str = ""

    def check(self, value: Any) -> list[str]:
        vals = value if self.kind is list else [value]
        if self.kind is list and not isinstance(value, list):
            return [f"expected a list, got {type(value).__name__}"]
        if self.kind is list and not value:
            return ["list must not be empty"]
        want = self.item if self.kind is list else self.kind
        errs = []
        for v in vals:
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            if want is not None and (not isinstance(v, want) or isinstance(v, bool)):
                errs.append(f"expected {want.__name__}, got {v!r}")
                continue
            if self.low is not None and v < self.low:
                errs.append(f"value {v!r} below minimum {self.low}")
            if self.high is not None and v > self.high:
                errs.append(f"value {v!r} above maximum {self.high}")
            if self.choices and v not in self.choices:
                errs.append(f"value {v!r} not one of {list(self.choices)}")
        return errs


def _prob(name: str, default, help: str = "") -> Param:
    return Param(name, float, default, "probability", 0.0, 1.0, help=help)


def _problist(name: str, default, help: str = "") -> Param:
    return Param(name, list, default, "probability", 0.0, 1.0, item=float, help=help)


def _logT_list(default, high: int = 6) -> Param:
    return Param("log_T", list, default, "control qubits", 0, high, item=int, help="log2 of the branch count")


# -- config ------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int
    samples: int
    threads: int = 1
    output_dir: str = ""
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed, "samples": self.samples,
                "threads": self.threads, "output_dir": self.output_dir, "params": self.params}

    def result_dict(self) -> dict:
        """Everything that determines the CSV contents (thread count and output path excluded)."""
        return {"experiment": self.experiment, "seed": self.seed, "samples": self.samples, "params": self.params}

    def config_hash(self) -> str:
        text = json.dumps(self.result_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig(**d)


@dataclass(frozen=True)
class RunOutput:
    tables: dict[str, str]
    plots: dict[str, Callable[[Any], None]]
    summary: list[str]


@dataclass(frozen=True)
class Experiment:
    name: str
    anchor: str
    description: str
    params: tuple[Param, ...]
    runner: Callable[[ExperimentConfig], RunOutput]
    default_samples: int = 0
    budget_s: float = 60.0

    def param(self, name: str) -> Param:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)


def _line_map(text: str) -> dict[str, int]:
    """Map dotted key paths of a YAML mapping document to 1-based line numbers."""
    out: dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                out[path] = k.start_mark.line + 1
                walk(v, path + ".")

    if root is not None:
        walk(root, "")
    return out


def _check_channel(value, issues: list[ConfigIssue], key: str, lines: dict[str, int]) -> None:
    if not isinstance(value, dict):
        issues.append(ConfigIssue(key, "expected a mapping with a 'kind' entry", lines.get(key)))
        return
    kind = value.get("kind")
    if kind not in CONFIG_CHANNEL_KINDS:
        issues.append(ConfigIssue(f"{key}.kind", f"must be one of {list(CONFIG_CHANNEL_KINDS)}", lines.get(f"{key}.kind", lines.get(key))))
        return
    for pname in ("p", "gamma"):
        if pname in value:
            v = value[pname]
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not 0 <= v <= 1:
                issues.append(ConfigIssue(f"{key}.{pname}", f"probability {v!r} outside [0, 1]", lines.get(f"{key}.{pname}")))
                return
    ideal = value.get("ideal", "I")
    if ideal not in IDEAL_GATES:
        issues.append(ConfigIssue(f"{key}.ideal", f"must be one of {list(IDEAL_GATES)}", lines.get(f"{key}.ideal")))
        return
    try:
        _channel_from(value)
    except (ChannelError, TypeError, KeyError, ValueError) as exc:
        issues.append(ConfigIssue(key, f"invalid channel: {exc}", lines.get(key)))


def _channel_from(value: dict):
    params = {k: v for k, v in value.items() if k not in ("kind", "ideal")}
    gate = IDEAL_GATES[value.get("ideal", "I")]
    nq = int(params.get("num_qubits", 1))
    u = gate
    for _ in range(nq - 1):
        u = np.kron(u, gate)
    return make_standard_channel(value["kind"], ideal=u, **params), u


def parse_config(data: Any, text: str = "", overrides: dict | None = None) -> ExperimentConfig:
    """Validate a loaded YAML document and build the config; raises :class:`ConfigError`."""
    lines = _line_map(text) if text else {}
    issues: list[ConfigIssue] = []
    if not isinstance(data, dict):
        raise ConfigError([ConfigIssue("<document>", "top level must be a mapping", 1)])
    for k in data:
        if k not in TOP_LEVEL_KEYS:
            issues.append(ConfigIssue(str(k), "unknown field", lines.get(str(k))))
    name = data.get("experiment")
    if name is None:
        issues.append(ConfigIssue("experiment", "missing required field"))
        raise ConfigError(issues)
    if name not in REGISTRY:
        issues.append(ConfigIssue("experiment", f"unknown experiment {name!r}", lines.get("experiment")))
        raise ConfigError(issues)
    exp = REGISTRY[name]
    overrides = overrides or {}

    seed = overrides.get("seed", data.get("seed"))
    if seed is None:
        issues.append(ConfigIssue("seed", "missing required field (seeds are mandatory)"))
    elif not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**63:
        issues.append(ConfigIssue("seed", f"must be an integer in [0, 2^63), got {seed!r}", lines.get("seed")))
    samples = overrides.get("samples", data.get("samples", exp.default_samples))
    if not isinstance(samples, int) or isinstance(samples, bool) or samples < 0:
        issues.append(ConfigIssue("samples", f"must be a non-negative integer, got {samples!r}", lines.get("samples")))
    threads = overrides.get("threads", data.get("threads", 1))
    if not isinstance(threads, int) or isinstance(threads, bool) or threads < 1:
        issues.append(ConfigIssue("threads", f"must be a positive integer, got {threads!r}", lines.get("threads")))
    out_dir = data.get("output_dir", f"results/{name}")
    if not isinstance(out_dir, str):
        issues.append(ConfigIssue("output_dir", "must be a string", lines.get("output_dir")))

    raw = data.get("params", {}) or {}
    params: dict = {}
    if not isinstance(raw, dict):
        issues.append(ConfigIssue("params", "must be a mapping", lines.get("params")))
        raw = {}
    known = {p.name for p in exp.params}
    for k in raw:
        if k not in known:
            issues.append(ConfigIssue(f"params.{k}", f"unknown parameter for {name}", lines.get(f"params.{k}")))
    for p in exp.params:
        v = raw.get(p.name, p.default)
        key = f"params.{p.name}"
        if p.kind is dict:
            _check_channel(v, issues, key, lines)
        else:
            if p.kind is float and isinstance(v, int) and not isinstance(v, bool):
                v = float(v)
            if p.kind is list and isinstance(v, list) and p.item is float:
                v = [float(x) if isinstance(x, int) and not isinstance(x, bool) else x for x in v]
            for msg in p.check(v):
                issues.append(ConfigIssue(key, msg, lines.get(key)))
        params[p.name] = v
    if issues:
        raise ConfigError(issues)
    return ExperimentConfig(name, seed, samples, threads, out_dir, params)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    issues: tuple[ConfigIssue, ...]
    config: ExperimentConfig | None = None

    def __str__(self) -> str:
        if self.ok:
            return f"ok: {self.config.experiment} (seed {self.config.seed})"
        return "\n".join(str(i) for i in self.issues)


def load_config(path: str | os.PathLike, overrides: dict | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError([ConfigIssue("<document>", f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                                       mark.line + 1 if mark else None)]) from exc
    return parse_config(data, text, overrides)


def validate_config(path: str | os.PathLike) -> ValidationReport:
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        return ValidationReport(False, tuple(exc.issues))
    except OSError as exc:
        return ValidationReport(False, (ConfigIssue("<file>", str(exc)),))
    return ValidationReport(True, (), cfg)


def default_config(name: str, seed: int = 0) -> ExperimentConfig:
    get_experiment(name)
    return parse_config({"experiment": name, "seed": seed})


# -- CSV and plotting helpers ------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10e}"
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _write_atomic(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_svg(path: Path, draw: Callable[[Any], None]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with plt.rc_context({"svg.hashsalt": "efsim", "svg.fonttype": "none"}):
        fig = plt.figure(figsize=(6.4, 4.2))
        try:
            draw(fig)
            fig.tight_layout()
            buf = io.StringIO()
            fig.savefig(buf, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    _write_atomic(path, buf.getvalue())


# -- experiments ---------------------------------------------------------------------


def _run_fig1(cfg: ExperimentConfig) -> RunOutput:
    p = cfg.params
    channel, U = _channel_from(p["channel"])
    nq = channel.num_qubits
    psi = preset_state(p["psi"], nq).amplitudes
    phi = preset_state(p["phi"], nq).amplitudes
    rows, inf0 = [], None
    for log_T in p["log_T"]:
        res = run(EfConfig(log_T, psi, phi, U, channel, backend=p["backend"], trajectory_samples=max(cfg.samples, 1),
                           seed=cfg.seed, threads=cfg.threads))
        if log_T == 0:
            inf0 = res.infidelity
        ratio = res.infidelity / inf0 if inf0 else float("nan")
        rows.append(("fig1_halving", p["channel"]["kind"], log_T, 2**log_T, res.infidelity, res.stat_error or 0.0,
                     res.fail_prob, res.success_err or 0.0, ratio))
    header = ("experiment_id", "channel", "log_T", "T", "infidelity", "infidelity_err", "fail_prob", "fail_prob_err",
              "ratio_to_bare")

    def draw(fig):
        ax = fig.add_subplot(1, 1, 1)
        ts = [r[3] for r in rows]
        ax.loglog(ts, [r[4] for r in rows], "o-", label="simulated")
        if inf0:
            ax.loglog(ts, [inf0 / t for t in ts], "k--", label="(1-F)_0 / T")
        ax.set_xlabel("T")
        ax.set_ylabel("1 - F")
        ax.legend()

    summary = [f"log_T={r[2]}  1-F={r[4]:.4e}  P_fail={r[6]:.4e}  ratio={r[8]:.4f}" for r in rows]
    if 0 not in p["log_T"]:
        summary.append("ratio column is nan: include log_T=0 for the bare reference")
    return RunOutput({"fig1_halving.csv": _csv(header, rows)}, {"fig1_halving.svg": draw}, summary)


def _run_fig3(cfg: ExperimentConfig) -> RunOutput:
    p = cfg.params
    all_rows, slopes = [], []
    for n in p["n"]:
        spec = QramSpec(n, p_dep=p["p_dep"])
        rows = qram_ef_experiment(spec, p["log_T"], max(cfg.samples, 1), cfg.seed, p["backend"], cfg.threads,
                                  experiment_id="fig3_qram")
        all_rows.extend(rows)
        fit = [r for r in rows if r.log_T <= p["fit_max_log_T"]]
        slope = loglog_slope(fit) if len(fit) >= 2 else float("nan")
        slopes.append(("fig3_qram", n, p["p_dep"], " ".join(str(2**r.log_T) for r in fit), slope))

    def draw(fig):
        a, b = fig.subplots(1, 2)
        for n in p["n"]:
            rs = [r for r in all_rows if r.n == n]
            a.errorbar([r.log_T for r in rs], [np.log2(r.infidelity) for r in rs],
                       yerr=[r.infidelity_err / (r.infidelity * np.log(2)) for r in rs], fmt="o-", label=f"n={n}")
            b.errorbar([r.log_T for r in rs], [r.fail_prob for r in rs], yerr=[r.fail_prob_err for r in rs],
                       fmt="s-", label=f"n={n}")
        a.set_xlabel("log2 T")
        a.set_ylabel("log2(1 - F)")
        b.set_xlabel("log2 T")
        b.set_ylabel("P_fail")
        a.legend()
        b.legend()

    summary = [f"n={r.n} log_T={r.log_T}  1-F={r.infidelity:.4e}±{r.infidelity_err:.1e}  "
               f"P_fail={r.fail_prob:.4e}" for r in all_rows]
    summary += [f"n={s[1]} slope over T={s[3]}: {s[4]:.3f}" for s in slopes]
    return RunOutput(
        {"fig3_qram.csv": rows_to_csv(all_rows),
         "fig3_qram_slopes.csv": _csv(("experiment_id", "n", "p_dep", "T_values", "slope"), slopes)},
        {"fig3_qram.svg": draw}, summary)


def _run_anc_err(cfg: ExperimentConfig) -> RunOutput:
    p = cfg.params
    spec = QramSpec(p["n"], p_dep=p["p_dep"])
    rows, loc_rows = [], []
    for pauli in p["paulis"]:
        reports: dict = {}
        rows += qram_ancilla_error_experiment(spec, p["log_T"], p["eps_prime"], pauli, cfg.threads,
                                              experiment_id="sm_anc_err", reports=reports)
        for log_T, rep in sorted(reports.items()):
            for loc, pa, d_inf, d_p in rep.deltas():
                loc_rows.append((log_T, loc, pa, -d_inf, d_p))

    def draw(fig):
        axes = fig.subplots(1, 2)
        for pauli, mark in zip(p["paulis"], "os"):
            rs = [r for r in rows if r.pauli == pauli]
            axes[0].plot([r.log_T for r in rs], [r.infidelity for r in rs], mark + "-", label=f"{pauli} faults")
            axes[1].plot([r.log_T for r in rs], [r.fail_prob for r in rs], mark + "-", label=f"{pauli} faults")
        rs = [r for r in rows if r.pauli == p["paulis"][0]]
        axes[0].plot([r.log_T for r in rs], [r.infidelity_no_ancilla_error for r in rs], "k--", label="no faults")
        axes[1].plot([r.log_T for r in rs], [r.fail_prob_no_ancilla_error for r in rs], "k--", label="no faults")
        axes[0].set_yscale("log")
        for ax, lab in zip(axes, ("1 - F", "P_fail")):
            ax.set_xlabel("log2 T")
            ax.set_ylabel(lab)
            ax.legend()

    summary = [f"{r.pauli} log_T={r.log_T} N_loc={r.n_locations}  1-F={r.infidelity:.5e} "
               f"(no faults {r.infidelity_no_ancilla_error:.5e})  P_fail={r.fail_prob:.5e}" for r in rows]
    return RunOutput(
        {"sm_anc_err.csv": rows_to_csv(rows),
         "sm_anc_err_locations.csv": _csv(("log_T", "location_id", "pauli", "delta_F", "delta_P"), loc_rows)},
        {"sm_anc_err.svg": draw}, summary)


def _run_advantage(cfg: ExperimentConfig) -> RunOutput:
    p = cfg.params
    spec = QramSpec(p["n"], p_dep=p["p_dep"])
    log_Ts = sorted(p["log_T"])
    reports = {}
    base = {}
    for log_T in log_Ts:
        ef = qram_ef_config(spec, log_T, backend="exact")
        if log_T == 0:
            r0 = run(ef)
            base[0] = (r0.infidelity, r0.fail_prob)
        else:
            reports[log_T] = perturbative_expansion(ef, AncillaNoiseParams(eps_prime=0.0), ("X",), threads=cfg.threads)
    rows = []
    grid = np.zeros((len(p["eps_prime"]), len(log_Ts)))
    for i, eps in enumerate(p["eps_prime"]):
        curve = {}
        for j, log_T in enumerate(log_Ts):
            inf, fail = base[0] if log_T == 0 else reports[log_T].at(eps)
            curve[log_T] = (inf, fail)
            grid[i, j] = inf
        best = min(curve, key=lambda k: (curve[k][0], k))
        for j, log_T in enumerate(log_Ts):
            prev = curve[log_Ts[j - 1]][0] if j > 0 else None
            adv = "" if prev is None else int(curve[log_T][0] < prev)
            rows.append(("sm_ef_advantage", eps, log_T, curve[log_T][0], curve[log_T][1], adv, int(log_T == best)))

    def draw(fig):
        a, b = fig.subplots(1, 2)
        im = a.imshow(np.log10(grid), aspect="auto", origin="lower", cmap="viridis")
        fig.colorbar(im, ax=a, label="log10(1 - F)")
        adv = np.full((len(p["eps_prime"]), len(log_Ts) - 1), np.nan)
        for i in range(len(p["eps_prime"])):
            for j in range(1, len(log_Ts)):
                adv[i, j - 1] = float(grid[i, j] < grid[i, j - 1])
        b.imshow(adv, aspect="auto", origin="lower", cmap="RdYlGn", vmin=0, vmax=1)
        labels = [f"{e:.0e}" for e in p["eps_prime"]]
        for ax, xs in ((a, log_Ts), (b, log_Ts[1:])):
            ax.set_xticks(range(len(xs)))
            ax.set_xticklabels(xs)
            ax.set_yticks(range(len(labels)))
            ax.set_yticklabels(labels)
            ax.set_xlabel("log2 T")
        a.set_ylabel("ancilla bit-flip probability")

    summary = []
    for eps in p["eps_prime"]:
        best = [r[2] for r in rows if r[1] == eps and r[6] == 1][0]
        summary.append(f"eps'={eps:.1e}: optimal log_T={best}")
    header = ("experiment_id", "eps_prime", "log_T", "infidelity", "fail_prob", "advantage", "optimal")
    return RunOutput({"sm_ef_advantage.csv": _csv(header, rows)}, {"sm_ef_advantage.svg": draw}, summary)


def _z_phase(theta: float) -> np.ndarray:
    return np.diag([1.0, np.exp(2j * theta)]).astype(complex)


def _run_limit_floor(cfg: ExperimentConfig) -> RunOutput:
    p = cfg.params
    theta = p["theta"]
    psi = STATE_PRESETS["+"]
    phi = STATE_PRESETS["0"]
    rows = []
    for eps in p["epsilon"]:
        # error probability p = eps/2 so that the floor reads 1 - sin^2(theta) eps^2 / 4
        model = TwoUnitaryModel(eps / 2, I2, _z_phase(theta))
        ch = model.to_channel()
        th, nu = model.angles(psi)
        lim = limit_state(ch, psi, phi, I2)
        closed = f_infinity_two_unitary(eps / 2, th, nu)
        approx = floor_expansion(eps, th)
        for log_T in p["log_T"]:
            res = run(EfConfig(log_T, psi, phi, I2, ch))
            rows.append(("sm_limit_floor", eps, th, log_T, res.infidelity, res.fail_prob, 1 - lim.F_infinity,
                         1 - closed, 1 - approx))

    def draw(fig):
        ax = fig.add_subplot(1, 1, 1)
        for eps in p["epsilon"]:
            rs = [r for r in rows if r[1] == eps]
            line, = ax.semilogy([r[3] for r in rs], [r[4] for r in rs], "o-", label=f"eps={eps:g}")
            ax.axhline(rs[0][6], color=line.get_color(), ls="--")
        ax.set_xlabel("log2 T")
        ax.set_ylabel("1 - F")
        ax.legend()

    header = ("experiment_id", "epsilon", "theta", "log_T", "infidelity", "fail_prob", "infidelity_limit",
              "infidelity_limit_closed_form", "infidelity_floor_expansion")
    summary = [f"eps={r[1]:g} log_T={r[3]}  1-F={r[4]:.4e}  floor={r[6]:.4e}" for r in rows]
    return RunOutput({"sm_limit_floor.csv": _csv(header, rows)}, {"sm_limit_floor.svg": draw}, summary)


def _run_guarantee(cfg: ExperimentConfig) -> RunOutput:
    p = cfg.params
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    rows = []
    for i in range(p["n_channels"]):
        strength = float(rng.uniform(0.0, p["strength_max"]))
        ch = random_channel(2, rng, strength, env_dim=p["env_dim"])
        psi = rng.normal(size=2) + 1j * rng.normal(size=2)
        psi /= np.linalg.norm(psi)
        rep = single_control_guarantee(ch, psi, I2)
        rows.append(("sm_guarantee", i, strength, rep.F0, rep.F1, rep.purity, int(rep.improved)))

    def draw(fig):
        ax = fig.add_subplot(1, 1, 1)
        f0 = np.array([r[3] for r in rows])
        gain = np.array([r[4] - r[3] for r in rows])
        order = np.argsort(f0)
        ax.plot(f0[order], gain[order], ".", ms=3)
        ax.axvline(0.5, color="k", ls="--")
        ax.axhline(0.0, color="k", lw=0.5)
        ax.set_xlabel("F_0")
        ax.set_ylabel("F_1 - F_0")

    above = [r for r in rows if r[3] > 0.5]
    summary = [f"{len(rows)} channels, {len(above)} with F0 > 1/2, "
               f"{sum(r[6] for r in above)} of those improved"]
    header = ("experiment_id", "index", "strength", "F0", "F1", "purity", "improved")
    return RunOutput({"sm_guarantee.csv": _csv(header, rows)}, {"sm_guarantee.svg": draw}, summary)


REGISTRY: dict[str, Experiment] = {}


def _register(exp: Experiment) -> None:
    REGISTRY[exp.name] = exp


_register(Experiment(
    "fig1_halving", "Fig. 1", "one control qubit halves the apparatus infidelity",
    (
        Param("channel", dict, {"kind": "dephasing", "p": 0.001}, help="channel kind and parameters"),
        Param("psi", str, "+", choices=tuple(STATE_PRESETS)),
        Param("phi", str, "0", choices=tuple(STATE_PRESETS)),
        _logT_list([0, 1]),
        Param("backend", str, "exact", choices=("exact", "trajectory")),
    ),
    _run_fig1, default_samples=10_000, budget_s=10,
))
_register(Experiment(
    "fig3_qram", "Fig. 3", "EF around a noisy bucket-brigade QRAM: 1/T infidelity and failure plateau",
    (
        Param("n", list, [1, 2], "address qubits", 1, 3, item=int),
        _prob("p_dep", 0.01, "depolarizing probability per qubit per time step"),
        _logT_list([0, 1, 2], high=3),
        Param("fit_max_log_T", int, 2, "control qubits", 0, 3),
        Param("backend", str, "trajectory", choices=("exact", "trajectory")),
    ),
    _run_fig3, default_samples=100_000, budget_s=300,
))
_register(Experiment(
    "sm_anc_err", "Fig. S2", "first-order ancilla X and Z faults around EF-wrapped depth-2 QRAM",
    (
        Param("n", int, 2, "address qubits", 1, 2),
        _prob("p_dep", 0.01, "depolarizing probability per qubit per time step"),
        _prob("eps_prime", 0.001, "fault probability per ancilla location"),
        _logT_list([0, 1, 2, 3], high=3),
        Param("paulis", list, ["X", "Z"], choices=("X", "Z"), item=str),
    ),
    _run_anc_err, budget_s=300,
))
_register(Experiment(
    "sm_ef_advantage", "Fig. S3", "infidelity and EF advantage against ancilla bit-flip probability and T",
    (
        Param("n", int, 2, "address qubits", 1, 2),
        _prob("p_dep", 0.01, "depolarizing probability per qubit per time step"),
        _problist("eps_prime", [1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2]),
        _logT_list([0, 1, 2, 3], high=3),
    ),
    _run_advantage, budget_s=300,
))
_register(Experiment(
    "sm_limit_floor", "SM error floor", "large-T fidelity of the two-unitary model against its limit",
    (
        _problist("epsilon", [0.02, 0.05, 0.1], "twice the error probability"),
        Param("theta", float, float(np.pi / 3), "rad", 0.0, float(np.pi / 2), help="error overlap angle"),
        _logT_list([0, 1, 2, 3, 4, 5, 6]),
    ),
    _run_limit_floor, budget_s=60,
))
_register(Experiment(
    "sm_guarantee", "SM guarantee", "one control qubit with phi = psi improves every channel with F0 > 1/2",
    (
        Param("n_channels", int, 500, "channels", 1, 100_000),
        Param("strength_max", float, 2.0, "dimensionless", 0.0, 10.0),
        Param("env_dim", int, 2, "levels", 1, 8),
    ),
    _run_guarantee, budget_s=30,
))


def list_experiments() -> list[tuple[str, str, str]]:
    """``(name, figure anchor, description)`` in registration order."""
    return [(e.name, e.anchor, e.description) for e in REGISTRY.values()]


def get_experiment(name: str) -> Experiment:
    if name not in REGISTRY:
        raise UnknownExperimentError(f"unknown experiment {name!r}; known: {', '.join(REGISTRY)}")
    return REGISTRY[name]


# -- running -------------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    experiment: str
    config_hash: str
    version: str
    wall_time_s: float
    outputs: tuple[str, ...]
    summary: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "config_hash": self.config_hash, "version": self.version,
                "wall_time_s": self.wall_time_s, "outputs": list(self.outputs), "summary": list(self.summary)}


def run_experiment(name: str, config: ExperimentConfig | None = None, out_dir: str | os.PathLike | None = None,
                   plots: bool = True) -> RunManifest:
    """Run a registered experiment and write CSVs, SVGs, the resolved config and ``manifest.json``."""
    get_experiment(name)
    cfg = config if config is not None else default_config(name)
    if cfg.experiment != name:
        raise ConfigError([ConfigIssue("experiment", f"config is for {cfg.experiment!r}, not {name!r}")])
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    t0 = time.perf_counter()
    result = REGISTRY[name].runner(cfg)
    written = []
    for fname, text in result.tables.items():
        _write_atomic(out / fname, text)
        written.append(fname)
    if plots:
        for fname, draw in result.plots.items():
            _save_svg(out / fname, draw)
            written.append(fname)
    _write_atomic(out / "config.yaml", cfg.dumps())
    written.append("config.yaml")
    manifest = RunManifest(name, cfg.config_hash(), __version__, round(time.perf_counter() - t0, 3),
                           tuple(written), tuple(result.summary))
    _write_atomic(out / "manifest.json", json.dumps(manifest.to_dict(), indent=2) + "\n")
    return manifest
