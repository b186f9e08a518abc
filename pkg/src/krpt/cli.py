"""Command-line experiment driver.

Subcommands: simulate, moments, match-width, compare, snapshot.  Every CSV
starts with ``# key = value`` comment lines holding the resolved
configuration, so an output file can be fed back in as ``--config``.
Exit status is 0 on success, 1 for solver errors and 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine, eulerian, kernels, moments
from .core import (CONFIG_KEYS, ConfigError, KernelSpec, KrptError, SimConfig, damkohler,
                   log_grid, step_grid, validate_config)

log = logging.getLogger("krpt")

_INT_KEYS = {"dim", "n_delta", "n_g", "seed", "n_realizations"}
RATIOS = (0.9, 0.5, 0.3, 0.1)
OMEGAS = (1.0, 2.0, 4.0, 8.0, 16.0)


class UsageError(Exception):
    """Bad config file or option combination; maps to exit status 2."""


# ---------------------------------------------------------------------------
# configuration files


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Read flat ``key = value`` lines; ``#`` starts a comment.

    Lines of the form ``# key = value`` whose key is a config field are
    also accepted, so CSV headers written by this tool can be re-read; for
    such files (first line ``# krpt ...``) reading stops at the data.
    """
    lines = text.splitlines()
    if lines and lines[0].startswith("# krpt "):
        lines = [line for line in lines if line.startswith("#")]
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            key = body.split("=", 1)[0].strip()
            if "=" not in body or key not in CONFIG_KEYS:
                continue
            line = body
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value, f"{source}:{lineno}")
    return out


def _convert(key, value, where):
    try:
        if key in _INT_KEYS:
            return int(float(value)) if "e" in value.lower() else int(value)
        return float(value)
    except ValueError:
        raise UsageError(f"{where}: cannot parse {key} = {value!r}") from None


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def resolve_config(args, base: SimConfig | None = None) -> SimConfig:
    """Defaults, then config file, then explicit flags."""
    values = (base or SimConfig()).as_dict()
    if args.config is not None:
        values.update(load_config(args.config))
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return validate_config(SimConfig(**values))


# ---------------------------------------------------------------------------
# kernels


def least_squares_grid(config: SimConfig, n: int = 100) -> np.ndarray:
    return log_grid(1e-2, config.t_final, n)


def resolve_kernel(config: SimConfig, kind: str, match: str, width=None,
                   t_star=None) -> KernelSpec:
    """Turn the kernel/matching options into a concrete KernelSpec."""
    if kind == "dirac":
        return KernelSpec.dirac()
    if kind == "variable" or match == "variable":
        return KernelSpec.variable()
    if width is not None:
        return KernelSpec.fixed(width)
    if match == "t-star":
        if t_star is None:
            raise UsageError("--match t-star needs --t-star")
        return KernelSpec.fixed(kernels.width_at_time(
            t_star, config.n_g, config.n_delta, config.diffusion, config.omega, config.dim))
    if match == "least-squares":
        return KernelSpec.fixed(kernels.least_squares_width(least_squares_grid(config), config))
    raise UsageError("a gaussian kernel needs --width or --match")


def report_width(kernel: KernelSpec, config: SimConfig, stream=None):
    stream = stream or sys.stderr
    if kernel.variant == "variable":
        print("width = variable", file=stream)
        return
    print(f"width = {kernel.width:.10g}", file=stream)
    if kernel.width / config.omega > kernels.DOMAIN_RATIO_LIMIT:
        print(f"warning: width/omega = {kernel.width / config.omega:.4f} exceeds "
              f"{kernels.DOMAIN_RATIO_LIMIT}; expect domain effects", file=stream)


# ---------------------------------------------------------------------------
# output


def header_lines(command: str, config: SimConfig, extra: dict | None = None) -> list:
    lines = [f"krpt {command}"]
    lines += [f"{key} = {value!r}" for key, value in config.as_dict().items()]
    if config.diffusion > 0:
        lines.append(f"damkohler = {damkohler(config, config.n_delta)!r}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    return lines


def write_csv(target, header: list, columns: dict):
    """Write ``# header`` lines, a name row, then %.17g numeric rows."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    own = target not in (None, "-")
    fh = open(target, "w", newline="") if own else sys.stdout
    try:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, data, fmt="%.17g", delimiter=",")
    finally:
        if own:
            fh.close()


def read_csv(path):
    """Return (header dict, column dict) from a file written by write_csv."""
    header, names, rows = {}, None, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, value = (p.strip() for p in body.split("=", 1))
                    header[key] = value
            elif names is None:
                names = line.strip().split(",")
            elif line.strip():
                rows.append([float(v) for v in line.split(",")])
    data = np.array(rows).reshape(-1, len(names or []))
    return header, {name: data[:, i] for i, name in enumerate(names or [])}


# ---------------------------------------------------------------------------
# recipes


@dataclass(frozen=True)
class ExperimentRecipe:
    """A named experiment family: sweep axes plus a matching strategy."""

    name: str
    base: SimConfig
    ratios: tuple = (0.1,)
    omegas: tuple = (1.0,)
    match: str = "least-squares"
    t_star: float | None = None
    with_eulerian: bool = False
    output_dir: str = "."

    def __post_init__(self):
        if not self.ratios or not self.omegas:
            raise UsageError(f"recipe {self.name!r} has an empty sweep axis")

    def points(self):
        """Configs for each sweep point; N scales with omega to keep Da fixed."""
        for omega in self.omegas:
            n_delta = int(round(self.base.n_delta * omega / self.base.omega))
            for ratio in self.ratios:
                n_g = max(1, int(round(ratio * n_delta)))
                yield self.base.replace(omega=omega, n_delta=n_delta, n_g=n_g)


def make_recipe(name: str, base: SimConfig, output_dir=".") -> ExperimentRecipe:
    presets = {
        "base": dict(),
        "tstar100": dict(ratios=RATIOS, match="t-star", t_star=100.0),
        "tstar1000": dict(ratios=RATIOS, match="t-star", t_star=1000.0),
        "least-squares": dict(ratios=RATIOS),
        "variable": dict(ratios=RATIOS, match="variable"),
        "omega-sweep": dict(omegas=OMEGAS, match="t-star", t_star=1000.0),
        "eulerian-compare": dict(with_eulerian=True),
    }
    if name not in presets:
        raise UsageError(f"unknown recipe {name!r}; choose from {', '.join(presets)}")
    return ExperimentRecipe(name, base, output_dir=str(output_dir), **presets[name])


RECIPES = ("base", "tstar100", "tstar1000", "least-squares", "variable",
           "omega-sweep", "eulerian-compare")


# ---------------------------------------------------------------------------
# subcommands


def _run_kwargs(args):
    return dict(cell_list=args.cell_list, boundary=args.boundary)


def cmd_simulate(args) -> int:
    config = resolve_config(args)
    kernel = resolve_kernel(config, args.kernel, args.match, args.width, args.t_star)
    report_width(kernel, config)
    grid = step_grid(config, args.points)
    trace = engine.run_ensemble(config, kernel, grid, **_run_kwargs(args))
    extra = {"kernel": kernel.label(), "boundary": args.boundary}
    write_csv(args.output, header_lines("simulate", config, extra),
              {"time": trace.times, "cbar_mean": trace.mean, "cbar_std": trace.std})
    return 0


def cmd_moments(args) -> int:
    config = resolve_config(args)
    kernel = resolve_kernel(config, "gaussian", args.match, args.width, args.t_star)
    if kernel.variant == "variable":
        raise UsageError("the moment equation needs a fixed kernel width")
    report_width(kernel, config)
    grid = log_grid(args.t_min or config.dt, config.t_final, args.points)
    dirac = moments.solve_mean_concentration(KernelSpec.dirac(), config, grid)
    gauss = moments.solve_mean_concentration(kernel, config, grid)
    wm = moments.well_mixed(grid, config.c0, config.rate)
    pos = grid > 0
    if config.rate > 0 and config.diffusion > 0 and not np.all(dirac.cbar[pos] > wm[pos]):
        raise KrptError("Dirac moment solution fell to or below the well-mixed solution")
    delta = 1.0 / config.n_g - 1.0 / config.n_delta
    bound = moments.error_bound(grid, delta, config, kernel.width, t_stop=config.t_final)
    cols = {"time": grid}
    for tag, sol in (("dirac", dirac), ("gaussian", gauss)):
        cols[f"cbar_{tag}"] = sol.cbar
        cols[f"g_{tag}"] = sol.g
        cols[f"integral_cbar_{tag}"] = sol.integral
    cols.update({"well_mixed": wm, "abs_diff": np.abs(dirac.cbar - gauss.cbar),
                 "bound_g": bound.g_bound,
                 "bound_cbar": np.broadcast_to(bound.cbar_bound, grid.shape),
                 "bound_cbar_full": bound.cbar_bound_full})
    extra = {"kernel": kernel.label(), "bound_window_start": moments.bound_window_start(config)}
    write_csv(args.output, header_lines("moments", config, extra), cols)
    return 0


def cmd_match_width(args) -> int:
    config = resolve_config(args)
    out = sys.stdout
    tau = kernels.max_matching_time(config.n_g, config.n_delta, config.diffusion,
                                    config.omega, config.dim)
    if args.strategy == "t-star":
        if args.t_star is None:
            raise UsageError("--strategy t-star needs --t-star")
        width = kernels.width_at_time(args.t_star, config.n_g, config.n_delta,
                                      config.diffusion, config.omega, config.dim)
    elif args.strategy == "variable":
        width = kernels.variable_width(args.t if args.t is not None else config.dt, config)
    else:
        width = kernels.least_squares_width(least_squares_grid(config), config)
    print(f"strategy = {args.strategy}", file=out)
    print(f"width = {width:.10g}", file=out)
    print(f"tau_star = {tau:.10g}", file=out)
    print(f"width_over_omega = {width / config.omega:.6g}", file=out)
    if width / config.omega > kernels.DOMAIN_RATIO_LIMIT:
        print("warning: width/omega exceeds 0.12; expect domain effects", file=sys.stderr)
    return 0


def compare_bundle(config: SimConfig, kernel: KernelSpec, grid, with_eulerian=False,
                   dirac_trace=None, **run_kwargs) -> dict:
    """Columns for one comparison: particles, moments, well-mixed and optional FD."""
    if dirac_trace is None:
        dirac_trace = engine.run_ensemble(config, KernelSpec.dirac(), grid, **run_kwargs)
    gauss_trace = engine.run_ensemble(config, kernel, grid, **run_kwargs)
    dirac_m = moments.solve_mean_concentration(KernelSpec.dirac(), config, grid).cbar
    if kernel.variant == "variable":
        gauss_m = np.full(grid.size, np.nan)
    else:
        gauss_m = moments.solve_mean_concentration(kernel, config, grid).cbar
    cols = {
        "time": grid,
        "well_mixed": moments.well_mixed(grid, config.c0, config.rate),
        "dirac_particle": dirac_trace.mean, "dirac_particle_std": dirac_trace.std,
        "gaussian_particle": gauss_trace.mean, "gaussian_particle_std": gauss_trace.std,
        "dirac_moment": dirac_m, "gaussian_moment": gauss_m,
    }
    if with_eulerian:
        cols["eulerian"] = eulerian.fd_ensemble(config, None, grid).mean
    cols["particle_discrepancy"] = np.abs(dirac_trace.mean - gauss_trace.mean)
    cols["width_over_omega"] = np.full(grid.size, kernel.width / config.omega)
    return cols


def cmd_compare(args) -> int:
    config = resolve_config(args)
    if args.recipe:
        recipe = make_recipe(args.recipe, config, args.output_dir)
        points = list(recipe.points())
        match, t_star = recipe.match, recipe.t_star
        with_fd = args.with_eulerian or recipe.with_eulerian
        name = recipe.name
    else:
        points, match, t_star = [config], args.match, args.t_star
        with_fd, name = args.with_eulerian, "compare"
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    dirac_cache = {}
    for cfg in points:
        kernel = resolve_kernel(cfg, "gaussian", match, args.width, t_star)
        report_width(kernel, cfg)
        grid = step_grid(cfg, args.points)
        key = (cfg.omega, cfg.n_delta)
        if key not in dirac_cache:
            dirac_cache[key] = engine.run_ensemble(cfg, KernelSpec.dirac(), grid, **_run_kwargs(args))
        cols = compare_bundle(cfg, kernel, grid, with_fd, dirac_cache[key], **_run_kwargs(args))
        disc = cols["particle_discrepancy"]
        extra = {"kernel": kernel.label(), "match": match, "boundary": args.boundary,
                 "max_discrepancy": float(disc.max()), "final_discrepancy": float(disc[-1])}
        path = outdir / f"{name}_omega{cfg.omega:g}_ng{cfg.n_g}.csv"
        write_csv(path, header_lines("compare", cfg, extra), cols)
        print(f"{path}: max discrepancy {disc.max():.4g}, final {disc[-1]:.4g}")
    return 0


def cmd_snapshot(args) -> int:
    config = resolve_config(args)
    kernel = resolve_kernel(config, args.kernel, args.match, args.width, args.t_star)
    report_width(kernel, config)
    times = np.asarray(args.times if args.times else [config.t_final], dtype=float)
    real = engine.run_realization(config, kernel, engine.realization_seed(config.seed, args.realization),
                                  np.array([config.t_final]), snapshot_times=times,
                                  threshold=args.threshold, **_run_kwargs(args))
    parts = {"time": [], "species": [], "mass": []}
    pos = []
    for snap in real.snapshots:
        parts["time"].append(np.full(snap.mass.size, snap.time))
        parts["species"].append(snap.species)
        parts["mass"].append(snap.mass)
        pos.append(snap.position)
        print(f"t = {snap.time:g}: {snap.mass.size} particles, "
              f"{engine.segregated_blocks(snap)} single-species blocks", file=sys.stderr)
    cols = {"time": np.concatenate(parts["time"])}
    cols["species"] = np.concatenate(parts["species"])
    coords = np.concatenate(pos)
    if config.dim == 1:
        cols["position"] = coords[:, 0]
    else:
        for axis in range(config.dim):
            cols[f"position_{axis}"] = coords[:, axis]
    cols["mass"] = np.concatenate(parts["mass"])
    extra = {"kernel": kernel.label(), "realization": args.realization,
             "threshold": real.snapshots[0].threshold if real.snapshots else args.threshold}
    write_csv(args.output, header_lines("snapshot", config, extra), cols)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _config_flags(p):
    p.add_argument("--config", type=Path, help="key = value config file (or a CSV written by krpt)")
    for field in dataclasses.fields(SimConfig):
        if field.name not in CONFIG_KEYS:
            continue
        kind = int if field.name in _INT_KEYS else float
        p.add_argument("--" + field.name.replace("_", "-"), dest=field.name, type=kind,
                       default=None, help=f"override {field.name}")


def _kernel_flags(p, default_kind="dirac"):
    p.add_argument("--kernel", choices=("dirac", "gaussian", "variable"), default=default_kind)
    p.add_argument("--match", choices=("least-squares", "t-star", "variable"), default="least-squares")
    p.add_argument("--width", type=float, help="fixed gaussian half-width (skips matching)")
    p.add_argument("--t-star", type=float, help="matching time for --match t-star")


def _run_flags(p):
    p.add_argument("--cell-list", action="store_true", help="use the 1-D cell-list pair search")
    p.add_argument("--boundary", choices=(engine.PERIODIC, engine.REFLECTING), default=engine.PERIODIC)
    p.add_argument("--points", type=int, default=200, help="output grid size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="krpt", description="Kernel-based reactive particle tracking")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="particle ensemble trace")
    _config_flags(p)
    _kernel_flags(p)
    _run_flags(p)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("moments", help="moment-equation traces and error bounds")
    _config_flags(p)
    p.add_argument("--match", choices=("least-squares", "t-star"), default="least-squares")
    p.add_argument("--width", type=float)
    p.add_argument("--t-star", type=float)
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--t-min", type=float, help="first grid time (default dt)")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("match-width", help="report a matched kernel half-width")
    _config_flags(p)
    p.add_argument("--strategy", choices=("t-star", "least-squares", "variable"), default="least-squares")
    p.add_argument("--t-star", type=float)
    p.add_argument("--t", type=float, help="time for the variable strategy")
    p.set_defaults(func=cmd_match_width)

    p = sub.add_parser("compare", help="Dirac vs Gaussian bundles, optionally from a recipe")
    _config_flags(p)
    p.add_argument("--recipe", choices=RECIPES)
    p.add_argument("--match", choices=("least-squares", "t-star", "variable"), default="least-squares")
    p.add_argument("--width", type=float)
    p.add_argument("--t-star", type=float)
    p.add_argument("--with-eulerian", action="store_true")
    p.add_argument("--output-dir", default=".")
    _run_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("snapshot", help="particle positions above a mass threshold")
    _config_flags(p)
    _kernel_flags(p)
    _run_flags(p)
    p.add_argument("--times", type=float, nargs="+")
    p.add_argument("--threshold", type=float)
    p.add_argument("--realization", type=int, default=0)
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_snapshot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="krpt: %(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"krpt: error: {exc}", file=sys.stderr)
        return 2
    except kernels.InfeasibleMatchTime as exc:
        print(f"krpt: InfeasibleMatchTime: {exc} (tau* = {exc.tau_star:.10g})", file=sys.stderr)
        return 1
    except (KrptError, OSError, FloatingPointError) as exc:
        print(f"krpt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
