"""Command-line runner for the benchmark pipelines.

Usage: ``occp <subcommand> [--config FILE] [--out-dir DIR] [--threads N]
[--replications R] [--seed S] [--set key=value ...]``.

The config file is flat ``key = value`` text.  A key may carry a subcommand
prefix (``copula.n = 500``); prefixed keys for other subcommands are ignored.
Lists are comma separated.  Flags override file values.

Exit codes: 0 success, 1 invalid input, 2 failure during computation (files
written before the failure are kept).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def parse_config_text(text: str, subcommand: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            ns, key = key.split(".", 1)
            if ns != subcommand:
                continue
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(raw, default, key):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def build_config(cls, values: dict, skip=("extra",)):
    """Instantiate dataclass ``cls`` from string values, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    base = cls()
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kw = {k: _coerce(v, getattr(base, k), k) if isinstance(v, str) else v for k, v in values.items()}
    return dataclasses.replace(base, **kw)


def _positive(cfg, *names):
    for n in names:
        if getattr(cfg, n) <= 0:
            raise ConfigError(f"{n} must be positive")


def _check_alphas(alphas):
    if not alphas or any(not a > 0 for a in alphas):
        raise ConfigError("alphas must be positive")


def _prepare_out_dir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}") from None


def _emit(report, out_dir: Path, stem: str):
    from .report import emit_report

    report.config.pop("threads", None)  # results do not depend on it
    emit_report(report, "csv", out_dir / f"{stem}.csv")
    emit_report(report, "json", out_dir / f"{stem}.json")
    print(f"wrote {out_dir / (stem + '.csv')}")


# ---------------------------------------------------------------------------


def _divergence_check(args, values):
    from .oracles import ORACLE_ALPHAS, divergence_oracle_suite

    cfg = {"instances": 50, "alphas": ORACLE_ALPHAS, "tol": 1e-6, "seed": 0}
    for k, v in values.items():
        if k not in cfg:
            raise ConfigError(f"unknown config keys: {k}")
        cfg[k] = _coerce(v, cfg[k], k) if isinstance(v, str) else v
    _check_alphas(cfg["alphas"])
    if cfg["instances"] < 1:
        raise ConfigError("instances must be positive")

    def run():
        res = divergence_oracle_suite(cfg["instances"], cfg["alphas"], cfg["seed"])
        worst = {}
        for (family, alpha), err in res.items():
            print(f"{family:14s} alpha={alpha:<6g} max_rel_err={err:.3e}")
            worst[family] = max(worst.get(family, 0.0), err)
        for family, err in worst.items():
            print(f"{family:14s} max relative error {err:.3e}")
        if max(worst.values()) > cfg["tol"]:
            print(f"tolerance {cfg['tol']:g} exceeded", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_OK

    return run


def _biased_means(args, values):
    from .biased_means import PRIORS, Table1Config, contour_grid, run_table1

    grid = int(values.pop("grid_size", 60))
    cfg = build_config(Table1Config, values)
    _check_alphas(cfg.alphas)
    _positive(cfg, "n1", "n2", "vb", "replications")
    if any(p not in PRIORS for p in cfg.priors):
        raise ConfigError(f"priors must be among {sorted(PRIORS)}")

    def run():
        _emit(run_table1(cfg), args.out_dir, "table1")
        _emit(contour_grid(cfg, grid), args.out_dir, "contours")
        return EXIT_OK

    return run


def _gp_confound(args, values):
    from .gp_confound import GPStudyConfig, Stage1Config, ingest_star_csv, run_gp_study, run_star

    star = values.pop("star_csv", None) or args.star_csv
    gamma = float(values.pop("gamma", 0.5))
    cfg = build_config(GPStudyConfig, values)
    _check_alphas(cfg.alphas)
    _positive(cfg, "n1", "n2", "M", "draws", "grid_n", "replications", "max_iter")
    if cfg.solver not in ("bfgs", "lbfgs", "adam"):
        raise ConfigError("solver must be bfgs, lbfgs or adam")
    if star is not None and not Path(star).is_file():
        raise ConfigError(f"STAR csv not found: {star}")

    def run():
        table, grid_rep = run_gp_study(cfg)
        _emit(table, args.out_dir, "gp_table")
        _emit(grid_rep, args.out_dir, "gp_grid")
        if star is not None:
            ing = ingest_star_csv(star, gamma, cfg.seed)
            rep = run_star(ing.data, cfg.alphas, cfg.M, cfg.draws, cfg.seed,
                           Stage1Config(M=cfg.M, max_iter=cfg.max_iter, solver=cfg.solver))
            rep.config = {"star_csv": str(star), "gamma": gamma, "dropped_rows": ing.dropped_rows}
            _emit(rep, args.out_dir, "star_table")
        return EXIT_OK

    return run


def _copula(args, values):
    from .copula import CopulaStudyConfig, run_copula_study

    cfg = build_config(CopulaStudyConfig, values)
    _check_alphas(cfg.alphas)
    _positive(cfg, "n", "M", "replications", "band_draws", "prior_var_eta", "max_iter")
    if cfg.mc_samples < 100:
        raise ConfigError("mc_samples must be at least 100")
    if cfg.n < 4:
        raise ConfigError("n must be at least 4")
    if cfg.bin_padding < 0:
        raise ConfigError("bin_padding must be nonnegative")
    if cfg.stage2_solver not in ("bfgs", "adam"):
        raise ConfigError("stage2_solver must be bfgs or adam")

    def run():
        table, curves = run_copula_study(cfg)
        _emit(table, args.out_dir, "copula_table")
        _emit(curves, args.out_dir, "marginal_fit")
        return EXIT_OK

    return run


COMMANDS = {
    "divergence-check": _divergence_check,
    "biased-means": _biased_means,
    "gp-confound": _gp_confound,
    "copula": _copula,
}


def build_parser():
    p = _Parser(prog="occp", description="Optimization-centric cut posteriors: benchmark runner.")
    p.add_argument("subcommand", choices=sorted(COMMANDS) + ["version"])
    p.add_argument("--config", type=Path, help="flat key = value file")
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--replications", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--star-csv", type=Path, help="gp-confound only: STAR-schema CSV")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.subcommand == "version":
            print(__version__)
            return EXIT_OK
        values = {}
        if args.config is not None:
            try:
                values.update(parse_config_text(args.config.read_text(), args.subcommand))
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from None
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
        if args.subcommand != "divergence-check":
            threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
            if threads < 1:
                raise ConfigError("threads must be positive")
            values["threads"] = threads
            if args.replications is not None:
                values["replications"] = args.replications
        if args.seed is not None:
            values["seed"] = args.seed
        if args.star_csv is not None and args.subcommand != "gp-confound":
            raise ConfigError("--star-csv applies to gp-confound only")
        run = COMMANDS[args.subcommand](args, values)
        if args.subcommand != "divergence-check":
            _prepare_out_dir(args.out_dir)
    except ConfigError as exc:
        print(f"occp: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return run()
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"occp: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
