"""Command-line front end: INI configuration, experiment presets, sweep
and budget modes, and CSV/checkpoint emission.

Grammar: an INI file with sections [run], [target], [adapt], [sweep] and
an optional [meta] block (written by config.echo, ignored on re-parse).
Every key is validated against a closed list, so typos fail loudly.
Command-line flags mirror [run]/[adapt] keys and override the file.
"""

import argparse
import configparser
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__, targets
from .objective import AdaptConfig
from .precond import KINDS
from .sampler import SamplerSettings, run_experiment, save_checkpoint

OBJECTIVES = ("gsm", "esjd", "l2hmc")


class ConfigError(ValueError):
    """Invalid or unknown configuration input: exit code 1 territory."""


@dataclass
class RunConfig:
    """Flat, fully-validated run description; round-trips through INI."""

    target: str
    target_params: dict = field(default_factory=dict)
    objective: str = "gsm"
    precond: str = "diagonal"
    h: float = 0.1
    L: int = 5
    adapt_steps: int = 1000
    sample_steps: int = 1000
    chains: int = 10
    seed: int = 0
    thin: int = 1
    init_scale: float = 1.0
    out: str = "results"
    adapt_budget: int = 0
    sample_budget: int = 0
    rho_theta: float = None
    rho_beta: float = 0.02
    rho_gamma: float = 1e2
    alpha_star: float = 0.67
    penalty_delta: float = 0.75
    delta_prime: float = 0.99
    n_min: int = 3
    lambda_rate: float = 0.05
    sweep_L: tuple = ()

    def effective_steps(self, L=None):
        """(adapt, sample) step counts after applying any gradient budget."""
        L = self.L if L is None else L
        adapt = self.adapt_budget // L if self.adapt_budget > 0 else self.adapt_steps
        sample = self.sample_budget // L if self.sample_budget > 0 else self.sample_steps
        return adapt, sample


def _parse_bool(raw, name):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{name}: expected a boolean, got {raw!r}")


def _parse_int(raw, name):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None


def _parse_float(raw, name):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected a number, got {raw!r}") from None


def _parse_l_values(raw, name):
    raw = raw.strip()
    if not raw:
        return ()
    if ".." in raw:
        lo, _, hi = raw.partition("..")
        lo = _parse_int(lo, name)
        hi = _parse_int(hi, name)
        if hi < lo:
            raise ConfigError(f"{name}: empty range {raw!r}")
        return tuple(range(lo, hi + 1))
    return tuple(_parse_int(tok, name) for tok in raw.split(",") if tok.strip())


# keys accepted in [run] and [adapt], with their parser and RunConfig field
_RUN_KEYS = {
    "target": ("target", str),
    "objective": ("objective", str),
    "precond": ("precond", str),
    "h": ("h", _parse_float),
    "l": ("L", _parse_int),
    "adapt_steps": ("adapt_steps", _parse_int),
    "sample_steps": ("sample_steps", _parse_int),
    "chains": ("chains", _parse_int),
    "seed": ("seed", _parse_int),
    "thin": ("thin", _parse_int),
    "init_scale": ("init_scale", _parse_float),
    "out": ("out", str),
    "adapt_budget": ("adapt_budget", _parse_int),
    "sample_budget": ("sample_budget", _parse_int),
}

_ADAPT_KEYS = {
    "rho_theta": ("rho_theta", _parse_float),
    "rho_beta": ("rho_beta", _parse_float),
    "rho_gamma": ("rho_gamma", _parse_float),
    "alpha_star": ("alpha_star", _parse_float),
    "penalty_delta": ("penalty_delta", _parse_float),
    "delta_prime": ("delta_prime", _parse_float),
    "n_min": ("n_min", _parse_int),
    "lambda_rate": ("lambda_rate", _parse_float),
}

# per-preset target parameters: name -> (parser, default)
PRESET_PARAMS = {
    "gaussian_iso": {"d": (_parse_int, 10), "scale": (_parse_float, 1.0)},
    "anisotropic": {"d": (_parse_int, 100), "c": (_parse_float, 6.0)},
    "correlated": {"grid_points": (_parse_int, 51)},
    "logistic": {
        "csv": (str, ""),
        "n": (_parse_int, 100),
        "d": (_parse_int, 10),
        "data_seed": (_parse_int, 0),
        "intercept": (_parse_bool, True),
        "standardize": (_parse_bool, True),
    },
    "cox": {"n": (_parse_int, 16), "data_seed": (_parse_int, 0)},
    "sv": {"csv": (str, ""), "t": (_parse_int, 100), "data_seed": (_parse_int, 0)},
}

_SECTIONS = ("run", "target", "adapt", "sweep", "meta")


def parse_config(file=None, overrides=None, target_overrides=None):
    """Validate an INI file and/or flag overrides into a RunConfig.

    Unknown sections or keys raise ConfigError naming the offender.  The
    output directory is probed for writability here so a bad path fails
    before any compute starts.
    """
    values = {}
    target_params = {}
    sweep = ()
    if file is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            read = parser.read(file)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {file}: {exc}") from None
        if not read:
            raise ConfigError(f"cannot read config file {file}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
        if parser.has_section("run"):
            for key, raw in parser.items("run"):
                if key not in _RUN_KEYS:
                    raise ConfigError(f"unknown key run.{key}")
                name, conv = _RUN_KEYS[key]
                values[name] = conv(raw, f"run.{key}") if conv is not str else raw.strip()
        if parser.has_section("adapt"):
            for key, raw in parser.items("adapt"):
                if key not in _ADAPT_KEYS:
                    raise ConfigError(f"unknown key adapt.{key}")
                name, conv = _ADAPT_KEYS[key]
                values[name] = conv(raw, f"adapt.{key}")
        if parser.has_section("target"):
            target_params = dict(parser.items("target"))
        if parser.has_section("sweep"):
            for key, raw in parser.items("sweep"):
                if key != "l_values":
                    raise ConfigError(f"unknown key sweep.{key}")
                sweep = _parse_l_values(raw, "sweep.l_values")
    if overrides:
        for key, val in overrides.items():
            values[key] = val
    if target_overrides:
        target_params.update(target_overrides)
    if "target" not in values or not values["target"]:
        raise ConfigError("target: required field is missing")
    name = values["target"]
    if name not in PRESET_PARAMS:
        known = ", ".join(sorted(PRESET_PARAMS))
        raise ConfigError(f"target: unknown preset {name!r} (choose from {known})")
    parsed_params = {}
    schema = PRESET_PARAMS[name]
    for key, raw in target_params.items():
        key = key.lower()
        if key not in schema:
            raise ConfigError(f"unknown key target.{key} for preset {name!r}")
        conv, _ = schema[key]
        if isinstance(raw, str) and conv is not str:
            parsed_params[key] = conv(raw, f"target.{key}")
        elif conv is str:
            parsed_params[key] = str(raw).strip()
        else:
            parsed_params[key] = raw
    for key, (_, default) in schema.items():
        parsed_params.setdefault(key, default)
    if sweep and "sweep_L" not in values:
        values["sweep_L"] = sweep
    config = RunConfig(target=name, target_params=parsed_params, **{
        k: v for k, v in values.items() if k != "target"
    })
    _validate(config)
    return config


def _validate(config):
    if config.objective not in OBJECTIVES:
        raise ConfigError(
            f"objective: must be one of {', '.join(OBJECTIVES)}, got {config.objective!r}"
        )
    if config.precond not in KINDS:
        raise ConfigError(
            f"precond: must be one of {', '.join(KINDS)}, got {config.precond!r}"
        )
    if config.h <= 0:
        raise ConfigError(f"h: must be positive, got {config.h}")
    if config.L < 1:
        raise ConfigError(f"L: must be a positive integer, got {config.L}")
    for fieldname in ("adapt_steps", "sample_steps", "adapt_budget", "sample_budget"):
        if getattr(config, fieldname) < 0:
            raise ConfigError(f"{fieldname}: must be nonnegative")
    if config.chains < 1:
        raise ConfigError(f"chains: must be at least 1, got {config.chains}")
    if config.thin < 1:
        raise ConfigError(f"thin: must be at least 1, got {config.thin}")
    if not 0 < config.alpha_star < 1:
        raise ConfigError(f"alpha_star: must lie in (0, 1), got {config.alpha_star}")
    if not 0 < config.delta_prime < 1:
        raise ConfigError(f"delta_prime: must lie in (0, 1), got {config.delta_prime}")
    if config.penalty_delta <= 0:
        raise ConfigError(f"penalty_delta: must be positive, got {config.penalty_delta}")
    if config.n_min < 1:
        raise ConfigError(f"n_min: must be at least 1, got {config.n_min}")
    if any(l < 1 for l in config.sweep_L):
        raise ConfigError("sweep.l_values: entries must be positive integers")
    _check_writable(config.out)


def _check_writable(path):
    # probe the nearest existing ancestor without creating anything
    probe = os.path.abspath(path)
    while not os.path.exists(probe):
        parent = os.path.dirname(probe)
        if parent == probe:
            break
        probe = parent
    if os.path.exists(probe) and not os.path.isdir(probe):
        raise ConfigError(f"out: {path!r} collides with a non-directory")
    if not os.access(probe, os.W_OK):
        raise ConfigError(f"out: directory {path!r} is not writable")


def build_model(config):
    """Instantiate the preset target for a validated config."""
    p = config.target_params
    name = config.target
    if name == "gaussian_iso":
        cov = np.full(p["d"], p["scale"] ** 2)
        return targets.gaussian_target(covariance=cov, name=f"gaussian_iso(d={p['d']})")
    if name == "anisotropic":
        return targets.anisotropic_gaussian(p["d"], p["c"])
    if name == "correlated":
        return targets.correlated_gaussian(p["grid_points"])
    if name == "logistic":
        if p["csv"]:
            X, y = targets.load_logistic_csv(p["csv"], intercept=p["intercept"],
                                             standardize=p["standardize"])
        else:
            X, y = targets.simulate_logistic_data(p["n"], p["d"], seed=p["data_seed"])
            if p["standardize"]:
                std = X.std(axis=0)
                X = np.where(std > 0, (X - X.mean(axis=0)) / np.where(std > 0, std, 1.0), 0.0)
            if p["intercept"]:
                X = np.column_stack([X, np.ones(len(X))])
        return targets.logistic_target(X, y)
    if name == "cox":
        _, y = targets.simulate_cox_data(p["n"], seed=p["data_seed"])
        return targets.cox_target(p["n"], y)
    if name == "sv":
        if p["csv"]:
            returns = targets.load_returns_csv(p["csv"])
        else:
            returns = targets.simulate_sv_data(p["t"], seed=p["data_seed"])
        return targets.sv_target(returns)
    raise ConfigError(f"target: unknown preset {name!r}")


def to_settings(config, model=None, L=None):
    """Map a RunConfig onto SamplerSettings for one run."""
    if model is None:
        model = build_model(config)
    L = config.L if L is None else L
    adapt_steps, sample_steps = config.effective_steps(L)
    rho = config.rho_theta
    if rho is None:
        rho = 1e-2 if config.precond == "diagonal" else 1e-3
    adapt_cfg = AdaptConfig(
        rho_theta=rho,
        rho_beta=config.rho_beta,
        rho_gamma=config.rho_gamma,
        alpha_star=config.alpha_star,
        penalty_delta=config.penalty_delta,
        delta_prime=config.delta_prime,
        n_min=config.n_min,
        lambda_rate=config.lambda_rate,
    )
    init = None
    if config.target == "cox":
        init = np.full(model.dim, model.extras["mu"])
    return SamplerSettings(
        model=model,
        kind=config.precond,
        h=config.h,
        L=L,
        objective=config.objective,
        adapt_steps=adapt_steps,
        sample_steps=sample_steps,
        chains=config.chains,
        seed=config.seed,
        thin=config.thin,
        init=init,
        init_scale=config.init_scale,
        adapt_config=adapt_cfg,
    )


# -- emission -------------------------------------------------------------


def _fmt(x):
    if x is None:
        return "NA"
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if not np.isfinite(x):
        return "NA"
    return format(x, ".17g")


SUMMARY_COLUMNS = (
    "version", "seed", "target", "objective", "precond", "h", "L",
    "adapt_steps", "sample_steps", "chains", "min_ess", "mean_ess",
    "median_ess", "max_rhat", "median_rhat", "acceptance", "divergences",
    "cond_number", "wall_seconds",
)


def summary_row(report, config, L=None):
    L = config.L if L is None else L
    adapt_steps, sample_steps = config.effective_steps(L)
    vals = {
        "version": __version__,
        "seed": config.seed,
        "target": config.target,
        "objective": config.objective,
        "precond": config.precond,
        "h": config.h,
        "L": L,
        "adapt_steps": adapt_steps,
        "sample_steps": sample_steps,
        "chains": config.chains,
        "min_ess": report.min_ess,
        "mean_ess": report.mean_ess,
        "median_ess": report.median_ess,
        "max_rhat": report.max_rhat,
        "median_rhat": report.median_rhat,
        "acceptance": report.acceptance_rate,
        "divergences": report.divergences,
        "cond_number": report.cond_number,
        "wall_seconds": report.wall_seconds,
    }
    return [_fmt(vals[c]) for c in SUMMARY_COLUMNS]


def _provenance(config):
    return f"# ehmc={__version__} seed={config.seed}\n"


def emit_report(report, out_dir, config, sweep_rows=None):
    """Write summary.csv, per_dim.csv, mu_trace.csv, config.echo and the
    final checkpoint under out_dir.  Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    path = os.path.join(out_dir, "summary.csv")
    rows = sweep_rows if sweep_rows is not None else [summary_row(report, config)]
    with open(path, "w") as fh:
        fh.write(_provenance(config))
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    paths.append(path)

    path = os.path.join(out_dir, "per_dim.csv")
    with open(path, "w") as fh:
        fh.write(_provenance(config))
        fh.write("dim,ess,split_rhat,degenerate\n")
        for j in range(report.ess_per_dim.size):
            fh.write(
                f"{j},{_fmt(report.ess_per_dim[j])},"
                f"{_fmt(report.split_rhat_per_dim[j])},"
                f"{int(report.degenerate_dims[j])}\n"
            )
    paths.append(path)

    path = os.path.join(out_dir, "mu_trace.csv")
    with open(path, "w") as fh:
        fh.write(_provenance(config))
        fh.write("step,mu_abs_mean\n")
        for i, val in enumerate(report.mu_trace):
            fh.write(f"{i},{_fmt(val)}\n")
    paths.append(path)

    path = os.path.join(out_dir, "config.echo")
    with open(path, "w") as fh:
        fh.write(render_config(config))
    paths.append(path)

    state = report.extras.get("adapt_state")
    chains = report.extras.get("chains")
    if state is not None and chains is not None:
        path = os.path.join(out_dir, "checkpoint.npz")
        save_checkpoint(path, chains, state, report.extras.get("h_final", config.h),
                        meta={"version": __version__, "seed": config.seed,
                              "target": config.target})
        paths.append(path)
    return paths


def render_config(config):
    """Serialize a RunConfig as INI text that parse_config accepts back."""
    lines = ["[run]"]
    lines.append(f"target = {config.target}")
    lines.append(f"objective = {config.objective}")
    lines.append(f"precond = {config.precond}")
    lines.append(f"h = {_fmt(config.h)}")
    lines.append(f"l = {config.L}")
    lines.append(f"adapt_steps = {config.adapt_steps}")
    lines.append(f"sample_steps = {config.sample_steps}")
    lines.append(f"chains = {config.chains}")
    lines.append(f"seed = {config.seed}")
    lines.append(f"thin = {config.thin}")
    lines.append(f"init_scale = {_fmt(config.init_scale)}")
    lines.append(f"out = {config.out}")
    lines.append(f"adapt_budget = {config.adapt_budget}")
    lines.append(f"sample_budget = {config.sample_budget}")
    lines.append("")
    lines.append("[target]")
    for key, val in sorted(config.target_params.items()):
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = _fmt(val)
        lines.append(f"{key} = {val}")
    lines.append("")
    lines.append("[adapt]")
    if config.rho_theta is not None:
        lines.append(f"rho_theta = {_fmt(config.rho_theta)}")
    lines.append(f"rho_beta = {_fmt(config.rho_beta)}")
    lines.append(f"rho_gamma = {_fmt(config.rho_gamma)}")
    lines.append(f"alpha_star = {_fmt(config.alpha_star)}")
    lines.append(f"penalty_delta = {_fmt(config.penalty_delta)}")
    lines.append(f"delta_prime = {_fmt(config.delta_prime)}")
    lines.append(f"n_min = {config.n_min}")
    lines.append(f"lambda_rate = {_fmt(config.lambda_rate)}")
    lines.append("")
    if config.sweep_L:
        lines.append("[sweep]")
        lines.append("l_values = " + ",".join(str(l) for l in config.sweep_L))
        lines.append("")
    lines.append("[meta]")
    lines.append(f"version = {__version__}")
    lines.append("")
    return "\n".join(lines)


# -- entry point ----------------------------------------------------------


def _add_flags(parser):
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--target", help="target preset name")
    parser.add_argument("--objective", choices=OBJECTIVES)
    parser.add_argument("--precond", choices=KINDS)
    parser.add_argument("--h", type=float, dest="h")
    parser.add_argument("--L", type=int, dest="L")
    parser.add_argument("--adapt-steps", type=int, dest="adapt_steps")
    parser.add_argument("--sample-steps", type=int, dest="sample_steps")
    parser.add_argument("--chains", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--thin", type=int)
    parser.add_argument("--init-scale", type=float, dest="init_scale")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--adapt-budget", type=int, dest="adapt_budget",
                        help="gradient-evaluation budget; adapt steps = budget // L")
    parser.add_argument("--sample-budget", type=int, dest="sample_budget")
    parser.add_argument("--rho-theta", type=float, dest="rho_theta")
    parser.add_argument("--rho-beta", type=float, dest="rho_beta")
    parser.add_argument("--rho-gamma", type=float, dest="rho_gamma")
    parser.add_argument("--alpha-star", type=float, dest="alpha_star")
    parser.add_argument("--penalty-delta", type=float, dest="penalty_delta")
    parser.add_argument("--delta-prime", type=float, dest="delta_prime")
    parser.add_argument("--n-min", type=int, dest="n_min")
    parser.add_argument("--lambda-rate", type=float, dest="lambda_rate")
    parser.add_argument("--sweep-L", dest="sweep_L",
                        help="comma list or lo..hi range of L values")
    parser.add_argument("--param", action="append", default=[],
                        metavar="KEY=VALUE", help="target parameter override")
    parser.add_argument("--list-presets", action="store_true")


_OVERRIDE_FIELDS = (
    "target", "objective", "precond", "h", "L", "adapt_steps", "sample_steps",
    "chains", "seed", "thin", "init_scale", "out", "adapt_budget",
    "sample_budget", "rho_theta", "rho_beta", "rho_gamma", "alpha_star",
    "penalty_delta", "delta_prime", "n_min", "lambda_rate",
)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="ehmc",
        description="Adaptive HMC with entropy-guided mass-matrix learning",
    )
    _add_flags(parser)
    args = parser.parse_args(argv)
    if args.list_presets:
        for name in sorted(PRESET_PARAMS):
            keys = ", ".join(sorted(PRESET_PARAMS[name]))
            print(f"{name}: {keys}")
        return 0
    overrides = {}
    for name in _OVERRIDE_FIELDS:
        val = getattr(args, name)
        if val is not None:
            overrides[name] = val
    if args.sweep_L is not None:
        try:
            overrides["sweep_L"] = _parse_l_values(args.sweep_L, "sweep_L")
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    target_overrides = {}
    for item in args.param:
        key, sep, val = item.partition("=")
        if not sep:
            print(f"error: --param expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 1
        target_overrides[key.strip().lower()] = val.strip()
    try:
        config = parse_config(args.config, overrides, target_overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        model = build_model(config)
    except (targets.IngestionError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        if config.sweep_L:
            rows = []
            last = None
            for L in config.sweep_L:
                report = run_experiment(to_settings(config, model, L=L))
                rows.append(summary_row(report, config, L=L))
                emit_report(report, os.path.join(config.out, f"L{L}"), config)
                last = report
            emit_report(last, config.out, config, sweep_rows=rows)
        else:
            report = run_experiment(to_settings(config, model))
            emit_report(report, config.out, config)
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    print(f"wrote results to {config.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
