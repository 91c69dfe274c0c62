"""Command line front end: config parsing, suite orchestration, CSV/JSON
output.

Config files are flat UTF-8 ``key = value`` lines (documented keys only,
``#`` comments allowed).  Records go to a stable-schema CSV, run summary
and wall-clock timings to a JSON file, and the resolved manifest to a
third file so any run can be reproduced from its output directory alone.

Exit codes: 0 all requested suites pass or are legitimately skipped,
1 suite failure, 2 configuration error, 3 capacity error.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

from . import __version__, verify
from .disorder import DisorderLaw, ModelParams
from .verify import ExperimentConfig

CSV_HEADER = "experiment,dim,law,beta,N,M,u,statistic,std_error,threshold,pass,seconds"

SUITE_ORDER = ("pi", "l2check", "moments", "martingale", "conc",
               "qn", "qnm", "llt", "diffusion")

# hard ceiling on the projected number of cone sites a run may touch
MAX_CONE_SITES = 200_000_000

_INT_KEYS = ("dim", "n", "m", "samples", "seed", "khorizon", "threads")
_FLOAT_KEYS = ("beta", "umax", "alpha", "bigA")
_STR_KEYS = ("law", "out")
_ALL_KEYS = _INT_KEYS + _FLOAT_KEYS + _STR_KEYS


class ConfigError(Exception):
    """Invalid configuration (unknown key, bad value, broken invariant)."""


class CapacityError(Exception):
    """Requested run exceeds the resource envelope of this machine."""


# ---------------------------------------------------------------------------
# configuration

def _read_kv(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    keys = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in _ALL_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            keys[key] = _coerce(key, value)
    return keys


def _coerce(key, value):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r}")
    return str(value)


def build_config(keys):
    """ExperimentConfig from a dict of documented keys; defaults applied."""
    for key in keys:
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
    d = int(keys.get("dim", 3))
    try:
        law = DisorderLaw(str(keys.get("law", "gaussian")))
    except ValueError as exc:
        raise ConfigError(f"config key 'law': {exc}")
    if "beta" in keys:
        beta = float(keys["beta"])
    elif d >= 3:
        beta = verify.default_beta(law, d)
    else:
        beta = 0.3
    n = int(keys.get("n", 24))
    m = int(keys.get("m", 8))
    if m > n:
        raise ConfigError(f"config key 'm': m = {m} must be <= n = {n}")
    grid = tuple(sorted({m, (m + n) // 2, n}))
    umax = float(keys.get("umax", 2.0))
    if umax <= 0:
        raise ConfigError("config key 'umax': must be > 0")
    u_grid = tuple(umax * k / 4.0 for k in (1, 2, 3, 4))
    try:
        params = ModelParams.create(d, beta, law)
        return ExperimentConfig(
            params=params,
            N_grid=grid,
            samples=int(keys.get("samples", 2000)),
            master_seed=int(keys.get("seed", 0)),
            u_grid=u_grid,
            A=float(keys.get("bigA", 5.0)),
            l_exponent=float(keys.get("alpha", 0.3)),
            K=int(keys.get("khorizon", 32)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def resolved_keys(config):
    """The documented key = value form of a resolved config (round-trips
    through build_config to an equal config)."""
    p = config.params
    return {
        "dim": p.d,
        "law": p.law.kind,
        "beta": repr(p.beta),
        "n": config.N_grid[-1],
        "m": config.N_grid[0],
        "samples": config.samples,
        "seed": config.master_seed,
        "umax": repr(config.u_grid[-1]),
        "alpha": repr(config.l_exponent),
        "bigA": repr(config.A),
        "khorizon": config.K,
    }


def format_config(config):
    return "".join(f"{k} = {v}\n" for k, v in resolved_keys(config).items())


def parse_config(path):
    """Read and validate a config file; echo the resolved key = value
    lines (defaults included) and return the ExperimentConfig."""
    config = build_config(_read_kv(path))
    sys.stdout.write(format_config(config))
    return config


# ---------------------------------------------------------------------------
# manifest

@dataclass
class RunManifest:
    """Everything needed to reproduce a run, plus per-suite outcomes."""

    config_path: str
    config: ExperimentConfig
    master_seed: int
    version: str
    out_dir: str
    suites: tuple
    threads: int = 1
    gate_skips: bool = False    # multi-suite run: failed gate skips dependents
    suite_status: dict = field(default_factory=dict)
    outputs: tuple = ()

    def identity(self):
        """The run-defining part of the manifest (threads and paths do
        not change results, so they stay out of the hash)."""
        return {
            "version": self.version,
            "master_seed": self.master_seed,
            "suites": list(self.suites),
            "config": {k: str(v) for k, v in resolved_keys(self.config).items()},
        }

    def hash(self):
        blob = json.dumps(self.identity(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _check_capacity(config, suites):
    """Refuse runs whose cone windows would not fit this machine."""
    p = config.params
    span = 3 * max(max(config.N_grid), config.K)
    sites = 0.0
    for t in range(span + 1):
        sites += (t + 1) ** p.d    # upper bound on one parity class
        if sites * config.samples > 1e16 or sites > MAX_CONE_SITES:
            raise CapacityError(
                f"projected window of ~{sites:.3g} sites (d={p.d}, span={span}) "
                f"exceeds the capacity limit of {MAX_CONE_SITES} sites")


# ---------------------------------------------------------------------------
# suites

def _pi_records(config):
    t0 = time.perf_counter()
    est = verify.reference_collision(config.params.d)
    if est.recurrent_flag:
        recs = [verify._rec(config, "pi_d", statistic=1.0, threshold=1.0,
                            status="pass")]
    else:
        width = est.pi_high - est.pi_low
        recs = [
            verify._rec(config, "pi_d", statistic=est.pi_d,
                        std_error=0.5 * width, threshold=1.0,
                        status="pass" if 0.0 < est.pi_d < 1.0 else "fail"),
            verify._rec(config, "pi_width", statistic=width, threshold=0.01,
                        status="pass" if width < 0.01 else "fail"),
        ]
    return verify._stamp(recs, t0)


def _l2_records(config, gate_skips):
    recs = verify.l2_record(config)
    if gate_skips and recs[0].status == "fail":
        # in a multi-suite run an out-of-region parameter point is the
        # gate that legitimizes downstream skips, not a failure
        recs[0].status = "skip"
    return recs


def _moments_records(config, reason_out):
    p = config.params
    if p.law.kind != "rademacher":
        reason_out.append("needs the Rademacher law")
        return verify._skip_records(config, "moments", 0.0)
    if p.d > 2:
        reason_out.append("exact enumeration infeasible above d = 2")
        return verify._skip_records(config, "moments", 0.0)
    return verify.second_moment_suite(p, 2)


def _dispatch(name, manifest, reason_out):
    config = manifest.config
    threads = manifest.threads
    if name == "pi":
        return _pi_records(config)
    if name == "l2check":
        return _l2_records(config, manifest.gate_skips)
    if name == "moments":
        return _moments_records(config, reason_out)
    if name == "martingale":
        return verify.martingale_suite(config, threads)
    if name == "conc":
        if not config.params.law.bounded:
            reason_out.append("needs a bounded disorder law")
            return verify._skip_records(config, "conc", 0.0)
        return verify.concentration_suite(config, threads)
    if name == "qn":
        return verify.qn_convergence_suite(config, threads)
    if name == "qnm":
        return verify.qnm_convergence_suite(config, threads)
    if name == "llt":
        return verify.llt_decay_suite(config, threads)
    if name == "diffusion":
        return verify.diffusivity_suite(config, threads)
    raise ConfigError(f"unknown suite {name!r}")


# ---------------------------------------------------------------------------
# output

def _cell(value):
    if value is None or value == "":
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, int):
        return str(value)
    x = float(value)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _csv_text(records):
    lines = [CSV_HEADER]
    for r in records:
        # the seconds column is pinned to 0 so identical manifests give
        # byte-identical CSVs; wall-clock timings live in the summary JSON
        lines.append(",".join([
            r.experiment, str(r.dim), r.law, _cell(r.beta), _cell(r.N),
            _cell(r.M), _cell(r.u), _cell(r.statistic), _cell(r.std_error),
            _cell(r.threshold), r.status, "0",
        ]))
    return "\n".join(lines) + "\n"


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def run(manifest):
    """Execute the manifest's suites in dependency order and write the
    records CSV, summary JSON, and resolved manifest. Returns the exit
    status."""
    config = manifest.config
    try:
        _check_capacity(config, manifest.suites)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return 3
    os.makedirs(manifest.out_dir, exist_ok=True)
    ordered = [s for s in SUITE_ORDER if s in manifest.suites]
    all_records = []
    summary_suites = {}
    status = 0
    for name in ordered:
        reasons = []
        try:
            recs = _dispatch(name, manifest, reasons)
        except verify.DiagnosticError as exc:
            recs = [verify._rec(config, name + "_diagnostic",
                                statistic=float("nan"), threshold=0.0,
                                status="fail")]
            reasons.append(str(exc))
        except MemoryError:
            print(f"capacity error: suite {name} exhausted memory",
                  file=sys.stderr)
            return 3
        failed = [r.experiment for r in recs if r.status == "fail"]
        skipped = all(r.status == "skip" for r in recs)
        suite_status = "fail" if failed else ("skip" if skipped else "pass")
        manifest.suite_status[name] = suite_status
        if failed:
            status = 1
        all_records.extend(recs)
        summary_suites[name] = {
            "status": suite_status,
            "records": len(recs),
            "failures": failed,
            "seconds": round(max(r.seconds for r in recs), 3),
        }
        note = f" ({'; '.join(reasons)})" if reasons else ""
        print(f"[{suite_status}] {name}: {len(recs)} records{note}")
        _report_headline(name, recs)

    csv_path = os.path.join(manifest.out_dir, "records.csv")
    summary_path = os.path.join(manifest.out_dir, "summary.json")
    manifest_path = os.path.join(manifest.out_dir, "manifest.json")
    manifest.outputs = ("records.csv", "summary.json", "manifest.json")
    _write(csv_path, _csv_text(all_records))
    summary = {
        "version": manifest.version,
        "manifest_hash": manifest.hash(),
        "suites": summary_suites,
        "exit_status": status,
        "outputs": list(manifest.outputs),
    }
    _write(summary_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    doc = manifest.identity()
    doc.update({
        "config_path": manifest.config_path,
        "out_dir": manifest.out_dir,
        "threads": manifest.threads,
        "suite_status": manifest.suite_status,
        "outputs": list(manifest.outputs),
        "manifest_hash": manifest.hash(),
    })
    _write(manifest_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return status


def _report_headline(name, recs):
    if name == "pi":
        r = recs[0]
        if r.statistic >= 1.0:
            print(f"  pi_{r.dim} = 1 (recurrent)")
        else:
            lo = r.statistic - r.std_error
            hi = r.statistic + r.std_error
            print(f"  pi_{r.dim} = {r.statistic:.6f} in [{lo:.6f}, {hi:.6f}]")
    elif name == "l2check":
        r = recs[0]
        print(f"  L2 margin log(1/pi_d) - gamma = {r.statistic:.6f} "
              f"({'inside' if r.statistic > 0 else 'outside'} the L2 region)")


# ---------------------------------------------------------------------------
# entry point

def _make_parser():
    parser = argparse.ArgumentParser(
        prog="polymerlab",
        description="Transfer-matrix and Monte Carlo checks for directed "
                    "polymers in random environment.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUITE_ORDER + ("all",):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--dim", type=int, default=None)
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--law", default=None)
        p.add_argument("--n", type=int, default=None)
        p.add_argument("--m", type=int, default=None)
        p.add_argument("--samples", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--umax", type=float, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--bigA", type=float, default=None)
        p.add_argument("--khorizon", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--threads", type=int, default=None)
    return parser


_FLAG_KEYS = {"dim": "dim", "beta": "beta", "law": "law", "n": "n", "m": "m",
              "samples": "samples", "seed": "seed", "umax": "umax",
              "alpha": "alpha", "bigA": "bigA", "khorizon": "khorizon",
              "out": "out", "threads": "threads"}


def _merge_keys(args):
    """Defaults, then flags, then the config file (config wins, with a
    warning on each conflict)."""
    keys = {}
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr)
        if value is not None:
            keys[key] = _coerce(key, str(value))
    if args.config:
        file_keys = _read_kv(args.config)
        for key, value in file_keys.items():
            if key in keys and keys[key] != value:
                print(f"warning: config file overrides --{key} "
                      f"({keys[key]!r} -> {value!r})", file=sys.stderr)
            keys[key] = value
    return keys


def main(argv=None):
    args = _make_parser().parse_args(argv)
    try:
        keys = _merge_keys(args)
        out_dir = str(keys.pop("out", "polymerlab_out"))
        threads = keys.pop("threads", None)
        if threads is None:
            threads = int(os.environ.get("POLYMERLAB_THREADS", "1"))
        if threads < 1:
            raise ConfigError("config key 'threads': must be >= 1")
        config = build_config(keys)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(format_config(config))
    suites = SUITE_ORDER if args.command == "all" else (args.command,)
    manifest = RunManifest(
        config_path=args.config or "",
        config=config,
        master_seed=config.master_seed,
        version=__version__,
        out_dir=out_dir,
        suites=tuple(suites),
        threads=threads,
        gate_skips=len(suites) > 1,
    )
    return run(manifest)


if __name__ == "__main__":
    sys.exit(main())
