"""Command-line entry point: couple, spectral, certify, sample and bias.

Exit codes: 0 ok, 2 usage or input error, 3 every run diverged, 4 certificate failed.
Flags override values from a versioned JSON config given with --config.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contraction import (
    constants_for,
    certify,
    coupled_run,
    coupled_run_sg,
)
from .core import ModifiedNorm, NoiseStream, PhaseState
from .diagnostics import (
    EstimatorConfig,
    Reference,
    bias_table,
    format_block_table,
    rows_to_csv,
    rows_to_json,
)
from .integrators import KINETIC_SCHEMES, IntegratorParams, SchemeId, parse_scheme
from .potentials import (
    GaussianSumPotential,
    IdxError,
    StochasticGradient,
    blr_potential,
    gaussian_potential,
    load_idx,
    synth_dataset,
)
from .spectral import contour_grid, fmt_number

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_CERT_FAIL = 0, 2, 3, 4
CONFIG_VERSION = 1

GRAD_KINDS = {"full": "full", "sg": "subsampled", "vrsg": "variance-reduced"}

DEFAULTS = {
    "common": {"seed": 0, "format": "csv", "out": None, "target": "gaussian", "m": 1.0, "M": 10.0,
               "N": 500, "d": 20, "separation": 2.0, "prior_variance": 1.0, "data_seed": 0,
               "digits": "3,5", "mnist_images": None, "mnist_labels": None, "n_terms": 20, "spread": 0.5},
    "couple": {"steps": 1000, "pairs": 8, "grad": "full", "batch": None, "replicas": 64, "cg_samples": 200},
    "spectral": {"h_points": 50, "gamma_points": 50, "lyapunov_N": 10000, "replicas": 8},
    "certify": {"lambda_points": 2048, "u_points": 256, "extended": False},
    "sample": {"iterations": 20000, "burn_in": 2000, "replicas": 16, "grad": "full", "batch": None,
               "reference": None},
    "bias": {"iterations": 20000, "burn_in": 2000, "replicas": 16, "grad": "full", "batch": None,
             "reference": None, "standard_grid": False, "block_layout": False},
}
REQUIRED = {
    "couple": ("scheme", "gamma", "h"),
    "spectral": ("scheme", "h_min", "h_max", "gamma_min", "gamma_max"),
    "certify": ("scheme", "gamma", "h"),
    "sample": ("scheme", "gamma", "h"),
    "bias": ("scheme",),
}


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    """A command plus its options; serializes to the versioned JSON config format."""

    command: str
    options: dict = field(default_factory=dict)
    version: int = CONFIG_VERSION

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "command": self.command, **self.options}, indent=1,
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
        version = raw.pop("version", None)
        if version != CONFIG_VERSION:
            raise UsageError(f"config version must be {CONFIG_VERSION}, got {version!r}")
        command = raw.pop("command", None)
        return cls(command, {k.replace("-", "_"): v for k, v in raw.items()}, version)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="langevin-kit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", default=S, help="JSON config with \"version\": 1")
        sp.add_argument("--scheme", default=S, help="scheme tag, comma list, or 'all'")
        sp.add_argument("--seed", type=int, default=S)
        sp.add_argument("--out", default=S, help="output path (stdout if omitted)")
        sp.add_argument("--format", choices=["csv", "json"], default=S)
        sp.add_argument("--m", type=float, default=S)
        sp.add_argument("--M", type=float, default=S)

    def target(sp):
        sp.add_argument("--target", choices=["gaussian", "blr-synth", "blr-idx"], default=S)
        sp.add_argument("--N", type=int, default=S, help="synthetic dataset rows")
        sp.add_argument("--d", type=int, default=S, help="synthetic dataset features")
        sp.add_argument("--separation", type=float, default=S)
        sp.add_argument("--prior-variance", type=float, default=S)
        sp.add_argument("--data-seed", type=int, default=S)
        sp.add_argument("--mnist-images", default=S)
        sp.add_argument("--mnist-labels", default=S)
        sp.add_argument("--digits", default=S, help="two digits kept from IDX data, e.g. 3,5")
        sp.add_argument("--n-terms", type=int, default=S, help="terms of the finite-sum Gaussian (sg on gaussian)")
        sp.add_argument("--spread", type=float, default=S)
        sp.add_argument("--grad", choices=sorted(GRAD_KINDS), default=S)
        sp.add_argument("--batch", type=int, default=S)

    c = sub.add_parser("couple", help="synchronously coupled distance trajectories")
    common(c)
    target(c)
    c.add_argument("--gamma", type=float, default=S)
    c.add_argument("--h", type=float, default=S)
    c.add_argument("--steps", type=int, default=S)
    c.add_argument("--pairs", type=int, default=S)
    c.add_argument("--replicas", type=int, default=S, help="replicas for stochastic gradients")
    c.add_argument("--cg-samples", type=int, default=S)

    s = sub.add_parser("spectral", help="spectral-gap contour grid")
    common(s)
    for name in ("h-min", "h-max", "gamma-min", "gamma-max"):
        s.add_argument(f"--{name}", type=float, default=S)
    s.add_argument("--h-points", type=int, default=S)
    s.add_argument("--gamma-points", type=int, default=S)
    s.add_argument("--lyapunov-N", type=int, default=S)
    s.add_argument("--replicas", type=int, default=S)

    k = sub.add_parser("certify", help="grid certificate for the contraction conditions")
    common(k)
    k.add_argument("--gamma", type=float, default=S)
    k.add_argument("--h", type=float, default=S)
    k.add_argument("--lambda-points", type=int, default=S)
    k.add_argument("--u-points", type=int, default=S)
    k.add_argument("--extended", action="store_true", default=S)

    for name, text in (("sample", "one sampler cell with bias against a reference"),
                       ("bias", "bias table over schemes, stepsizes and frictions")):
        b = sub.add_parser(name, help=text)
        common(b)
        target(b)
        b.add_argument("--gamma", default=S, help="friction, or comma list for bias")
        b.add_argument("--h", default=S, help="stepsize, or comma list for bias")
        b.add_argument("--iterations", type=int, default=S)
        b.add_argument("--burn-in", type=int, default=S)
        b.add_argument("--replicas", type=int, default=S)
        b.add_argument("--reference", type=float, default=S, help="reference mean of the test function")
        if name == "bias":
            b.add_argument("--standard-grid", action="store_true", default=S,
                           help="h in {2,1,1/2,1/4}/sqrt(M), gamma in {sqrt(M), sqrt(m)} from minimizer Hessian")
            b.add_argument("--block-layout", action="store_true", default=S,
                           help="also print scheme x stepsize blocks to stderr")
    return p


def resolve(argv) -> ExperimentConfig:
    args = vars(_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    opts = dict(DEFAULTS["common"])
    opts.update(DEFAULTS[command])
    if config_path is not None:
        try:
            cfg = ExperimentConfig.from_json(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}")
        if cfg.command not in (None, command):
            raise UsageError(f"config is for command {cfg.command!r}, not {command!r}")
        unknown = set(cfg.options) - set(opts) - set(REQUIRED[command]) - _extra_keys(command)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        opts.update(cfg.options)
    opts.update(args)
    missing = [k for k in REQUIRED[command] if opts.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return ExperimentConfig(command, opts)


def _extra_keys(command):
    return {"gamma", "h", "h_min", "h_max", "gamma_min", "gamma_max", "scheme"}


def _schemes(spec, allow_overdamped=False):
    items = [t.strip() for t in str(spec).split(",") if t.strip()]
    if items == ["all"]:
        return list(KINETIC_SCHEMES)
    out = []
    for t in items:
        try:
            s = parse_scheme(t)
        except ValueError as exc:
            raise UsageError(str(exc))
        if not s.kinetic and not allow_overdamped:
            raise UsageError(f"{s} is overdamped; valid tags: {', '.join(x.value for x in KINETIC_SCHEMES)}")
        out.append(s)
    if not out:
        raise UsageError("no scheme given")
    return out


def _floats(spec):
    if isinstance(spec, (int, float)):
        return [float(spec)]
    if isinstance(spec, list):
        return [float(x) for x in spec]
    try:
        return [float(t) for t in str(spec).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"not a number list: {spec!r}")


def _positive(opts, *names):
    for n in names:
        v = opts.get(n)
        if v is not None and not (isinstance(v, (int, float)) and v > 0):
            raise UsageError(f"--{n.replace('_', '-')} must be positive, got {v!r}")


def _build_target(opts, need_finite_sum=False):
    """Potential plus the (m, M) used for constants."""
    kind = opts["target"]
    if kind == "gaussian":
        _positive(opts, "m", "M")
        if opts["m"] > opts["M"]:
            raise UsageError("need m <= M")
        if need_finite_sum:
            pot = GaussianSumPotential([opts["m"], opts["M"]], opts["n_terms"], opts["spread"], opts["data_seed"])
        else:
            pot = gaussian_potential([opts["m"], opts["M"]])
        return pot, pot.m, pot.M
    if kind == "blr-synth":
        _positive(opts, "N", "d", "prior_variance")
        ds = synth_dataset(opts["data_seed"], opts["N"], opts["d"], opts["separation"], opts["prior_variance"])
    else:
        if not opts.get("mnist_images") or not opts.get("mnist_labels"):
            raise UsageError("blr-idx needs --mnist-images and --mnist-labels")
        digits = [int(t) for t in str(opts["digits"]).split(",")]
        try:
            ds = load_idx(opts["mnist_images"], opts["mnist_labels"], digits, opts["prior_variance"])
        except OSError as exc:
            raise UsageError(str(exc))
        except IdxError as exc:
            raise UsageError(f"IDX parse failure: {exc}")
    pot = blr_potential(ds)
    return pot, pot.m, pot.M


def _estimator(opts, pot, stream):
    kind = GRAD_KINDS[opts["grad"]]
    if kind == "full":
        return None
    if not hasattr(pot, "term_grads"):
        raise UsageError("stochastic gradients need a finite-sum target")
    batch = opts["batch"]
    if batch is None:
        raise UsageError("--batch is required with --grad sg/vrsg")
    if not 1 <= batch <= pot.n_terms:
        raise UsageError(f"--batch must be in [1, {pot.n_terms}]")
    anchor = _anchor(pot) if kind == "variance-reduced" else None
    return StochasticGradient(pot, kind, batch, anchor, stream)


def _anchor(pot):
    return pot.minimizer() if hasattr(pot, "minimizer") else np.zeros(pot.dim)


def _write(text: str, out):
    if not text.endswith("\n"):
        text += "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else fmt_number(v) for v in r])
    return buf.getvalue()


def _json_text(header, rows) -> str:
    def clean(v):
        if isinstance(v, str):
            return v
        if isinstance(v, (int, np.integer)):
            return int(v)
        v = float(v)
        return v if math.isfinite(v) else None
    return json.dumps({"columns": list(header), "rows": [[clean(v) for v in r] for r in rows]}, indent=1)


def _emit(opts, header, rows):
    text = _csv_text(header, rows) if opts["format"] == "csv" else _json_text(header, rows)
    _write(text, opts["out"])


def _norm_for(k, M):
    if k.norm_valid:
        return k.norm
    print(f"warning: {k.scheme} at gamma={k.gamma}, h={k.h} is outside its contraction region; "
          "reporting distances in the a=1/M, b=0 norm", file=sys.stderr)
    return ModifiedNorm(1.0 / M, 0.0)


def cmd_couple(opts) -> int:
    schemes = _schemes(opts["scheme"])
    _positive(opts, "gamma", "h", "steps", "pairs", "replicas")
    grad_kind = opts["grad"]
    if grad_kind not in GRAD_KINDS:
        raise UsageError(f"--grad must be one of {sorted(GRAD_KINDS)}")
    pot, m, M = _build_target(opts, need_finite_sum=grad_kind != "full")
    gamma, h, K, seed = opts["gamma"], opts["h"], opts["steps"], opts["seed"]
    params = IntegratorParams(h, gamma)
    rows, runs, diverged = [], 0, 0
    for si, s in enumerate(schemes):
        k = constants_for(s, m, M, gamma, h)
        norm = _norm_for(k, M)
        if grad_kind == "full":
            for p in range(opts["pairs"]):
                init = NoiseStream(seed, 2 * p + 1)
                z0 = PhaseState(init.normal((pot.dim,)), init.normal((pot.dim,)))
                z1 = PhaseState(init.normal((pot.dim,)), init.normal((pot.dim,)))
                tr = coupled_run(s, pot, norm, z0, z1, params, K, NoiseStream(seed, 2 * p))
                runs += 1
                diverged += tr.divergent
                rows += [(str(s), p, j, d) for j, d in enumerate(tr.distance)]
            header = ("scheme", "pair", "k", "distance")
        else:
            est = _estimator(opts, pot, NoiseStream(seed, 10**6 + si))
            init = NoiseStream(seed, 1)
            z0 = PhaseState(init.normal((pot.dim,)), init.normal((pot.dim,)))
            z1 = PhaseState(init.normal((pot.dim,)), init.normal((pot.dim,)))
            tr = coupled_run_sg(s, pot, est, norm, z0, z1, params, K, opts["replicas"], NoiseStream(seed, 0))
            runs += 1
            diverged += tr.divergent
            rows += [(str(s), j, mu, se) for j, (mu, se) in enumerate(zip(tr.mean_sq, tr.se))]
            header = ("scheme", "k", "mean_sq_distance", "se")
    if len(schemes) == 1:
        header, rows = header[1:], [r[1:] for r in rows]
    _emit(opts, header, rows)
    if diverged == runs:
        print("all runs diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_spectral(opts) -> int:
    schemes = _schemes(opts["scheme"])
    if len(schemes) != 1:
        raise UsageError("spectral takes exactly one scheme")
    _positive(opts, "m", "M", "h_min", "h_max", "gamma_min", "gamma_max", "h_points", "gamma_points",
              "lyapunov_N", "replicas")
    if opts["h_min"] > opts["h_max"] or opts["gamma_min"] > opts["gamma_max"]:
        raise UsageError("inverted range: need --h-min <= --h-max and --gamma-min <= --gamma-max")
    if opts["m"] > opts["M"]:
        raise UsageError("need m <= M")
    if schemes[0] is SchemeId.ROABAO and (opts["lyapunov_N"] < 1000 or opts["replicas"] < 2):
        raise UsageError("rOABAO needs --lyapunov-N >= 1000 and --replicas >= 2")
    grid = contour_grid(schemes[0], opts["m"], opts["M"], (opts["h_min"], opts["h_max"]),
                        (opts["gamma_min"], opts["gamma_max"]), (opts["gamma_points"], opts["h_points"]),
                        opts["lyapunov_N"], opts["replicas"], opts["seed"])
    _write(grid.to_csv() if opts["format"] == "csv" else grid.to_json(), opts["out"])
    if np.all(grid.divergent):
        print("every cell is unstable", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_certify(opts) -> int:
    schemes = _schemes(opts["scheme"])
    if len(schemes) != 1:
        raise UsageError("certify takes exactly one scheme")
    _positive(opts, "m", "M", "gamma", "h", "lambda_points", "u_points")
    if opts["m"] > opts["M"]:
        raise UsageError("need m <= M")
    try:
        rep = certify(schemes[0], opts["m"], opts["M"], opts["gamma"], opts["h"], opts["lambda_points"],
                      opts["u_points"], extended=bool(opts["extended"]))
    except ValueError as exc:
        raise UsageError(str(exc))
    k = constants_for(schemes[0], opts["m"], opts["M"], opts["gamma"], opts["h"])
    body = rep.to_dict()
    body["in_region"] = k.in_region
    body["h0"] = k.h0
    body["gamma0"] = k.gamma0
    _write(json.dumps(body, indent=1), opts["out"])
    if not rep.passed:
        where = "inside" if k.in_region else "outside"
        print(f"certificate failed; (gamma, h) is {where} the scheme's stated region", file=sys.stderr)
        return EXIT_CERT_FAIL
    return EXIT_OK


def _standard_grid(pot):
    q = _anchor(pot)
    if hasattr(pot, "hessian_extremes"):
        m_h, M_h = pot.hessian_extremes(q)
    else:
        m_h, M_h = pot.m, pot.M
    hs = [c / math.sqrt(M_h) for c in (2.0, 1.0, 0.5, 0.25)]
    return hs, [math.sqrt(M_h), math.sqrt(m_h)]


def _run_bias(opts, single: bool) -> int:
    schemes = _schemes(opts["scheme"], allow_overdamped=True)
    _positive(opts, "iterations", "replicas")
    if opts["grad"] not in GRAD_KINDS:
        raise UsageError(f"--grad must be one of {sorted(GRAD_KINDS)}")
    pot, m, M = _build_target(opts, need_finite_sum=opts["grad"] != "full")
    if not single and opts.get("standard_grid"):
        hs, gammas = _standard_grid(pot)
        configs = [EstimatorConfig("full")]
    else:
        if opts.get("h") is None or opts.get("gamma") is None:
            raise UsageError("missing required option(s): --h, --gamma")
        hs, gammas = _floats(opts["h"]), _floats(opts["gamma"])
        if single and (len(hs) != 1 or len(gammas) != 1 or len(schemes) != 1):
            raise UsageError("sample takes one scheme, one --h and one --gamma; use bias for grids")
        kind = GRAD_KINDS[opts["grad"]]
        if kind != "full" and opts["batch"] is None:
            raise UsageError("--batch is required with --grad sg/vrsg")
        configs = [EstimatorConfig(kind, opts["batch"])]
    if any(h <= 0 for h in hs) or any(g <= 0 for g in gammas):
        raise UsageError("stepsizes and frictions must be positive")
    if not 0 <= opts["burn_in"] < opts["iterations"] or opts["iterations"] - opts["burn_in"] < 100:
        raise UsageError("need 0 <= --burn-in < --iterations with at least 100 retained iterations")
    if opts["replicas"] < 2:
        raise UsageError("--replicas must be >= 2")
    if opts["reference"] is not None:
        ref = Reference(float(opts["reference"]), 0.0, "supplied")
    elif opts["target"] == "gaussian":
        ref = Reference(0.5 * pot.dim, 0.0, "exact Gaussian mean of U")
    else:
        ref = None
    anchor = _anchor(pot) if any(c.kind == "variance-reduced" for c in configs) else None
    rows, ref = bias_table(schemes, pot, configs, hs, gammas, ref, opts["replicas"], opts["iterations"],
                           opts["burn_in"], opts["seed"], anchor)
    if not single and opts.get("standard_grid"):
        extra, _ = bias_table([SchemeId.BAOAB], pot, [EstimatorConfig("variance-reduced", min(100, pot.n_terms))],
                              hs, gammas, ref, opts["replicas"], opts["iterations"], opts["burn_in"],
                              opts["seed"] + 1, _anchor(pot))
        rows += extra
    if opts["format"] == "csv":
        _write(rows_to_csv(rows), opts["out"])
    else:
        _write(rows_to_json(rows, ref), opts["out"])
    if opts.get("block_layout"):
        print(format_block_table(rows), file=sys.stderr)
    if all(r.status != "ok" for r in rows):
        print("every cell diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sample(opts) -> int:
    return _run_bias(opts, single=True)


def cmd_bias(opts) -> int:
    return _run_bias(opts, single=False)


COMMANDS = {"couple": cmd_couple, "spectral": cmd_spectral, "certify": cmd_certify, "sample": cmd_sample,
            "bias": cmd_bias}


def main(argv=None) -> int:
    try:
        cfg = resolve(argv)
        return COMMANDS[cfg.command](cfg.options)
    except UsageError as exc:
        print(f"langevin-kit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
