"""Configuration-driven entry points: theory sweeps, spectra, simulation, compare.

Numpy is imported lazily so that the entry point can pin BLAS threading
before any numeric module loads; per-cell work is deterministic and output
rows are written in cell order by the main thread, so identical
(config, seed) produce byte-identical CSVs at any --threads value.
"""

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_GATE = 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------
_SCHEMA = {
    "model": {
        "k": int, "k0": int, "loss": str, "r00": list, "seed": int,
        "noise_sigma": float,
    },
    "theory": {
        "alpha": list, "lambda": list, "quadrature": str, "nodes_per_dim": int,
        "count": int, "tol": float,
    },
    "spectrum": {
        "alpha": float, "lambda": float, "grid_lo": float, "grid_hi": float,
        "grid_step": float, "gamma": float, "compress_resolution": float,
        "nodes_per_dim": int,
    },
    "simulate": {
        "d": int, "alpha": list, "lambda": list, "trials": int,
        "newton_tol": float, "newton_max_iter": int, "test_size": int,
    },
    "compare": {
        "theory_csv": str, "sim_csv": str, "eigs_csv": str, "density_csv": str,
        "gate": bool, "tol_train": float, "tol_test": float, "tol_class": float,
        "tol_est": float, "tol_w1": float,
    },
}
_REQUIRED = {"model": ["k", "k0", "loss", "r00", "seed"]}


def _check_type(value, expected, path):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected {expected.__name__}, got bool")
    if not isinstance(value, expected):
        raise ConfigError(
            f"{path}: expected {expected.__name__}, got {type(value).__name__}"
        )
    return value


def validate_config(raw):
    """Validate the parsed TOML dict; unknown keys are rejected with field paths."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    cfg = {}
    for section, content in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"[{section}] must be a table")
        cfg[section] = {}
        for key, value in content.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            cfg[section][key] = _check_type(value, _SCHEMA[section][key], f"{section}.{key}")
    for section, keys in _REQUIRED.items():
        if section not in cfg:
            raise ConfigError(f"missing required section [{section}]")
        for key in keys:
            if key not in cfg[section]:
                raise ConfigError(f"missing required key {section}.{key}")
    model = cfg["model"]
    rows = model["r00"]
    if len(rows) != model["k0"] or any(
        not isinstance(r, list) or len(r) != model["k0"] for r in rows
    ):
        raise ConfigError("model.r00: must be a k0 x k0 row-by-row matrix")
    if model["loss"] not in ("multinomial", "quadratic"):
        raise ConfigError(f"model.loss: unknown family {model['loss']!r}")
    for section in ("theory", "simulate"):
        if section in cfg:
            for key in ("alpha", "lambda"):
                vals = cfg[section].get(key)
                if vals is not None and len(vals) == 0:
                    raise ConfigError(f"{section}.{key}: empty list")
    return cfg


def load_config(path):
    import tomli

    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}")
    return validate_config(raw)


def config_hash(cfg, seed):
    payload = json.dumps({"cfg": cfg, "seed": seed}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _meta_line(cfg, seed):
    from . import __version__

    return f"#meta config={config_hash(cfg, seed)} seed={seed} version={__version__}\n"


def _fmt(x):
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    return repr(float(x))  # shortest round-trip decimal, deterministic


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_theory(cfg, out_dir, seed, threads):
    import numpy as np

    from .asymptotics import (IndeterminateError, SolverError, default_rule,
                              predicted_observables, solve_critical_point)
    from .simulator import loss_from_tag

    model = cfg["model"]
    th = cfg.get("theory", {})
    alphas = th.get("alpha", [])
    lams = th.get("lambda", [])
    if not alphas or not lams:
        raise ConfigError("theory.alpha and theory.lambda must be nonempty")
    loss = loss_from_tag(model["loss"], model["k"], model.get("noise_sigma", 0.0))
    r00 = np.asarray(model["r00"], dtype=float)
    rule = default_rule(
        loss,
        nodes_per_dim=th.get("nodes_per_dim", 24),
        count=th.get("count", 2**16),
        seed=seed,
        kind=th.get("quadrature", "auto"),
    )
    cells = [(a, l) for a in alphas for l in lams]

    def solve_cell(cell):
        a, l = cell
        opts = {"tol": th.get("tol")} if th.get("tol") else None
        try:
            sol = solve_critical_point(loss, a, l, r00, rule=rule, options=opts)
        except IndeterminateError as exc:
            return dict(alpha=a, lam=l, error=str(exc))
        if sol.diverged:
            return dict(alpha=a, lam=l, sol=sol, obs=None)
        obs = predicted_observables(loss, sol, a, l, rule=rule)
        return dict(alpha=a, lam=l, sol=sol, obs=obs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_cell, cells))
    else:
        results = [solve_cell(c) for c in cells]

    path = os.path.join(out_dir, "theory.csv")
    failed = False
    with open(path, "w") as fh:
        fh.write(_meta_line(cfg, seed))
        fh.write("alpha,lambda,train_loss,test_loss,class_error,est_error,"
                 "resid1,resid2,converged,diverged\n")
        for r in results:
            if "error" in r:
                failed = True
                fh.write(f"{_fmt(r['alpha'])},{_fmt(r['lam'])}" + ",nan" * 6 + ",0,0\n")
                continue
            sol, obs = r["sol"], r["obs"]
            if sol.diverged:
                fh.write(
                    f"{_fmt(r['alpha'])},{_fmt(r['lam'])}" + ",nan" * 4
                    + f",{_fmt(sol.residual1)},{_fmt(sol.residual2)},0,1\n"
                )
            else:
                fh.write(
                    f"{_fmt(r['alpha'])},{_fmt(r['lam'])},{_fmt(obs.train_loss)},"
                    f"{_fmt(obs.test_loss)},{_fmt(obs.classification_error)},"
                    f"{_fmt(obs.estimation_error)},{_fmt(sol.residual1)},"
                    f"{_fmt(sol.residual2)},1,0\n"
                )
    sidecar = {
        "rule_kind": rule.kind, "rule_count": int(rule.count), "seed": seed,
        "r00": [list(map(float, row)) for row in r00],
        "loss": model["loss"], "k": model["k"], "k0": model["k0"],
    }
    with open(os.path.join(out_dir, "theory_meta.json"), "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
    print(f"wrote {path} ({len(results)} cells)")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_spectrum(cfg, out_dir, seed, threads):
    import numpy as np

    from .asymptotics import default_rule, predicted_spectrum, solve_critical_point
    from .simulator import loss_from_tag

    model = cfg["model"]
    sp = cfg.get("spectrum")
    if not sp:
        raise ConfigError("missing [spectrum] section")
    loss = loss_from_tag(model["loss"], model["k"], model.get("noise_sigma", 0.0))
    r00 = np.asarray(model["r00"], dtype=float)
    alpha = sp["alpha"]
    lam = sp.get("lambda", 0.0)
    rule = default_rule(loss, nodes_per_dim=sp.get("nodes_per_dim", 24), seed=seed)
    sol = solve_critical_point(loss, alpha, lam, r00, rule=rule)
    if sol.diverged:
        raise ConfigError("spectrum: the asymptotic system diverges at this cell")
    grid = np.arange(sp["grid_lo"], sp["grid_hi"], sp["grid_step"])
    dens = predicted_spectrum(
        loss, sol, alpha, lam, grid, gamma=sp.get("gamma", 1e-3), rule=rule,
        compress_resolution=sp.get("compress_resolution", 0.002),
    )
    path = os.path.join(out_dir, "density.csv")
    with open(path, "w") as fh:
        fh.write(_meta_line(cfg, seed))
        dens.to_csv(fh)
    print(f"wrote {path} (mass={dens.mass:.6f})")
    return EXIT_OK


def cmd_simulate(cfg, out_dir, seed, threads):
    import numpy as np

    from .simulator import ExperimentConfig, aggregate, run_experiment

    model = cfg["model"]
    sim = cfg.get("simulate")
    if not sim:
        raise ConfigError("missing [simulate] section")
    alphas = sim.get("alpha", [])
    lams = sim.get("lambda", [])
    if not alphas or not lams:
        raise ConfigError("simulate.alpha and simulate.lambda must be nonempty")
    d = sim["d"]
    cells = [(a, l) for a in alphas for l in lams]
    summaries = []
    for idx, (a, l) in enumerate(cells):
        cell_seed = int(
            np.random.SeedSequence(entropy=seed, spawn_key=(idx,)).generate_state(1)[0]
        )
        ecfg = ExperimentConfig(
            n=int(round(a * d)), d=d, k=model["k"], k0=model["k0"], lam=l,
            r00=np.asarray(model["r00"], dtype=float), loss=model["loss"],
            trials=sim.get("trials", 1), seed=cell_seed,
            newton_tol=sim.get("newton_tol", 1e-8),
            newton_max_iter=sim.get("newton_max_iter", 100),
            test_size=sim.get("test_size", 0),
            noise_sigma=model.get("noise_sigma", 0.0),
        )
        metrics = run_experiment(ecfg, threads=threads)
        mpath = os.path.join(out_dir, f"sim_metrics_{idx}.csv")
        with open(mpath, "w") as fh:
            fh.write(_meta_line(cfg, seed))
            fh.write("trial,train_loss,test_loss,class_error,est_error,"
                     "grad_norm,newton_iters\n")
            for m in metrics:
                fh.write(
                    f"{m.trial},{_fmt(m.train_loss)},{_fmt(m.test_loss)},"
                    f"{_fmt(m.class_error)},{_fmt(m.est_error)},{_fmt(m.grad_norm)},"
                    f"{m.newton_iters}\n"
                )
        epath = os.path.join(out_dir, f"sim_eigs_{idx}.csv")
        with open(epath, "w") as fh:
            fh.write(_meta_line(cfg, seed))
            fh.write("trial,eig\n")
            for m in metrics:
                if m.nonexistent:
                    continue
                for e in m.eigenvalues:
                    fh.write(f"{m.trial},{_fmt(float(e))}\n")
        agg = aggregate(metrics)
        summaries.append((a, l, agg))
    spath = os.path.join(out_dir, "sim_summary.csv")
    with open(spath, "w") as fh:
        fh.write(_meta_line(cfg, seed))
        fh.write("alpha,lambda,train_loss,test_loss,class_error,est_error,"
                 "train_std,test_std,class_std,est_std,n_trials,n_nonexistent\n")
        for a, l, agg in summaries:
            fh.write(
                f"{_fmt(a)},{_fmt(l)},{_fmt(agg.means['train_loss'])},"
                f"{_fmt(agg.means['test_loss'])},{_fmt(agg.means['class_error'])},"
                f"{_fmt(agg.means['est_error'])},{_fmt(agg.stds['train_loss'])},"
                f"{_fmt(agg.stds['test_loss'])},{_fmt(agg.stds['class_error'])},"
                f"{_fmt(agg.stds['est_error'])},{agg.n_trials},{agg.n_nonexistent}\n"
            )
    print(f"wrote {spath} ({len(cells)} cells)")
    return EXIT_OK


def _read_csv(path):
    import numpy as np

    with open(path) as fh:
        lines = [l.rstrip("\n") for l in fh if not l.startswith("#")]
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        if line:
            rows.append([float(tok) if tok not in ("", "nan") else float("nan")
                         for tok in line.split(",")])
    return header, np.asarray(rows, dtype=float)


def cmd_compare(cfg, out_dir, seed, threads):
    import numpy as np

    cmp_cfg = cfg.get("compare")
    if not cmp_cfg:
        raise ConfigError("missing [compare] section")
    for key in ("theory_csv", "sim_csv"):
        if key not in cmp_cfg:
            raise ConfigError(f"compare.{key} is required")
        if not os.path.exists(cmp_cfg[key]):
            raise ConfigError(f"compare.{key}: no such file {cmp_cfg[key]!r}")
    th_head, th = _read_csv(cmp_cfg["theory_csv"])
    sm_head, sm = _read_csv(cmp_cfg["sim_csv"])

    def col(head, name, arr):
        if name not in head:
            raise ConfigError(f"column {name!r} missing in input csv")
        return arr[:, head.index(name)]

    w1s = None
    if "eigs_csv" in cmp_cfg and "density_csv" in cmp_cfg:
        w1s = _w1_from_files(cmp_cfg["eigs_csv"], cmp_cfg["density_csv"])
    rows = []
    warned = 0
    for i in range(len(sm)):
        a, l = col(sm_head, "alpha", sm)[i], col(sm_head, "lambda", sm)[i]
        match = np.where(
            np.isclose(col(th_head, "alpha", th), a, rtol=1e-12)
            & np.isclose(col(th_head, "lambda", th), l, rtol=1e-12)
        )[0]
        if len(match) == 0:
            warned += 1
            print(f"warning: no theory row for alpha={a}, lambda={l}", file=sys.stderr)
            continue
        j = match[0]
        tv = {name: col(th_head, name, th)[j]
              for name in ("train_loss", "test_loss", "class_error", "est_error")}
        sv = {name: col(sm_head, name, sm)[i]
              for name in ("train_loss", "test_loss", "class_error", "est_error")}
        rows.append({
            "alpha": a, "lambda": l,
            "rel_err_train": abs(sv["train_loss"] - tv["train_loss"]) / abs(tv["train_loss"]),
            "rel_err_test": abs(sv["test_loss"] - tv["test_loss"]) / abs(tv["test_loss"]),
            "abs_err_class": abs(sv["class_error"] - tv["class_error"]),
            "rel_err_est": abs(sv["est_error"] - tv["est_error"]) / abs(tv["est_error"]),
            "w1_spectrum": w1s if w1s is not None else float("nan"),
        })
    path = os.path.join(out_dir, "compare.csv")
    with open(path, "w") as fh:
        fh.write(_meta_line(cfg, seed))
        cols = ["alpha", "lambda", "rel_err_train", "rel_err_test", "abs_err_class",
                "rel_err_est", "w1_spectrum"]
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in cols) + "\n")
    print(f"wrote {path} ({len(rows)} joined rows, {warned} unmatched)")
    if cmp_cfg.get("gate", False):
        gates = [("rel_err_train", cmp_cfg.get("tol_train", 0.03)),
                 ("rel_err_test", cmp_cfg.get("tol_test", 0.03)),
                 ("abs_err_class", cmp_cfg.get("tol_class", 0.01)),
                 ("rel_err_est", cmp_cfg.get("tol_est", 0.05))]
        if w1s is not None:
            gates.append(("w1_spectrum", cmp_cfg.get("tol_w1", 0.05)))
        for name, tol in gates:
            worst = max((r[name] for r in rows), default=0.0)
            if worst > tol:
                print(f"gate violation: {name} = {worst:.4g} > {tol}", file=sys.stderr)
                return EXIT_GATE
    return EXIT_OK


def _w1_from_files(eigs_csv, density_csv):
    import numpy as np

    head_e, eig_rows = _read_csv(eigs_csv)
    sample = eig_rows[:, head_e.index("eig")]
    head_d, dens_rows = _read_csv(density_csv)
    xs = dens_rows[:, head_d.index("x")]
    dens = dens_rows[:, head_d.index("density")]
    return w1_distance(sample, xs, dens)


def w1_distance(sample, xs, dens, grid_points=8001):
    """W1 between an eigenvalue sample and a gridded density (CDF area metric)."""
    import numpy as np

    lo = min(float(sample.min()), float(xs[0]))
    hi = max(float(sample.max()), float(xs[-1]))
    grid = np.linspace(lo, hi, grid_points)
    fs = np.searchsorted(np.sort(sample), grid, side="right") / len(sample)
    dc = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
    dc = dc / dc[-1]
    fd = np.interp(grid, xs, dc, left=0.0, right=1.0)
    return float(np.trapezoid(np.abs(fs - fd), grid))


def main(argv=None):
    # pin BLAS threading before numpy loads: reductions inside one cell are
    # then independent of the --threads orchestration level
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")
    parser = argparse.ArgumentParser(prog="hderm",
                                     description="asymptotics/simulation toolkit")
    parser.add_argument("command", choices=["theory", "spectrum", "simulate", "compare"])
    parser.add_argument("--config", required=True, help="TOML config path")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seed", type=int, default=None, help="override model.seed")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg["model"]["seed"]
    handler = {"theory": cmd_theory, "spectrum": cmd_spectrum,
               "simulate": cmd_simulate, "compare": cmd_compare}[args.command]
    try:
        return handler(cfg, args.out, seed, max(args.threads, 1))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # numerical failures
        from .asymptotics import SolverError
        from .simulator import IngestError, TrialError
        from .spectrum import StieltjesConvergenceError

        if isinstance(exc, (SolverError, TrialError, StieltjesConvergenceError,
                            IngestError, FloatingPointError)):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
