"""Render sweep curves and spectral histograms from the toolkit's CSVs.

Three figure kinds:
  error_vs_lambda  four panels (train/test log-loss, estimation error,
                   classification error) against lambda; theory rows as
                   continuous lines, simulation summaries as points with
                   std/sqrt(trials) error bars
  error_vs_alpha   the same panels against alpha
  esd_overlay      pooled-eigenvalue histogram (unit mass) with the
                   predicted density as an overlay line

This package is a pure file-to-file transform over the CSV schemas of the
numerical toolkit; it computes nothing beyond binning and error bars.
"""

import argparse
import json
import sys
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("error_vs_lambda", "error_vs_alpha", "esd_overlay")

PANELS = [
    ("train_loss", "train log-loss"),
    ("test_loss", "test log-loss"),
    ("est_error", "estimation error"),
    ("class_error", "classification error"),
]


class RenderError(ValueError):
    pass


@dataclass
class FigureSpec:
    kind: str
    inputs: dict
    output: str
    x_scale: str = "log"
    labels: dict = field(default_factory=dict)
    bin_width: float | None = None

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        known = {"kind", "inputs", "output", "x_scale", "labels", "bin_width"}
        extra = set(raw) - known
        if extra:
            raise RenderError(f"unknown spec keys: {sorted(extra)}")
        if raw.get("kind") not in KINDS:
            raise RenderError(f"kind must be one of {KINDS}, got {raw.get('kind')!r}")
        if "output" not in raw or "inputs" not in raw:
            raise RenderError("spec needs 'inputs' and 'output'")
        return cls(**raw)


def read_csv(path):
    """Parse a toolkit CSV: optional #meta lines, then a header row."""
    with open(path) as fh:
        lines = [l.rstrip("\n") for l in fh if not l.startswith("#")]
    if not lines:
        raise RenderError(f"{path}: empty file")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        if line:
            rows.append([float(tok) if tok else float("nan") for tok in line.split(",")])
    if not rows:
        raise RenderError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    return {name: data[:, i] for i, name in enumerate(header)}


def _require(table, cols, path):
    missing = [c for c in cols if c not in table]
    if missing:
        raise RenderError(f"{path}: missing columns {missing}")


def freedman_diaconis_width(values):
    iqr = float(np.subtract(*np.percentile(values, [75, 25])))
    if iqr <= 0:
        return max((values.max() - values.min()) / 50.0, 1e-6)
    return 2.0 * iqr / len(values) ** (1.0 / 3.0)


def binned_mass(edges, eigenvalues):
    """Histogram mass vector of a pooled eigenvalue sample (unit total)."""
    counts, _ = np.histogram(eigenvalues, bins=edges)
    return counts / len(eigenvalues)


def density_binned_mass(edges, xs, density):
    """Mass of a gridded density inside each bin (trapezoid on a fine grid)."""
    cdf_inc = np.concatenate(
        [[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(xs))]
    )
    at = np.interp(edges, xs, cdf_inc, left=0.0, right=cdf_inc[-1])
    return np.diff(at)


def _sweep_figure(spec, x_col):
    theory = sim = None
    if "theory_csv" in spec.inputs:
        theory = read_csv(spec.inputs["theory_csv"])
        _require(theory, [x_col] + [c for c, _ in PANELS], spec.inputs["theory_csv"])
    if "sim_csv" in spec.inputs:
        sim = read_csv(spec.inputs["sim_csv"])
        _require(sim, [x_col, "n_trials"] + [c for c, _ in PANELS],
                 spec.inputs["sim_csv"])
    if theory is None and sim is None:
        raise RenderError("need theory_csv and/or sim_csv")
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    series_label = spec.labels.get("series", "")
    for ax, (col, title) in zip(axes.ravel(), PANELS):
        if theory is not None:
            order = np.argsort(theory[x_col])
            keep = ~np.isnan(theory[col][order])
            ax.plot(theory[x_col][order][keep], theory[col][order][keep], "-",
                    label=f"theory {series_label}".strip())
        if sim is not None:
            order = np.argsort(sim[x_col])
            err_col = {"train_loss": "train_std", "test_loss": "test_std",
                       "class_error": "class_std", "est_error": "est_std"}[col]
            yerr = None
            if err_col in sim:
                yerr = sim[err_col][order] / np.sqrt(np.maximum(sim["n_trials"][order], 1))
            ax.errorbar(sim[x_col][order], sim[col][order], yerr=yerr, fmt="o",
                        ms=4, capsize=2, label=f"simulation {series_label}".strip())
        ax.set_xlabel(spec.labels.get("x", x_col))
        ax.set_title(title)
        if spec.x_scale == "log":
            ax.set_xscale("log")
        ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _esd_figure(spec):
    for key in ("eigs_csv", "density_csv"):
        if key not in spec.inputs:
            raise RenderError(f"esd_overlay needs inputs.{key}")
    eigs_tab = read_csv(spec.inputs["eigs_csv"])
    _require(eigs_tab, ["eig"], spec.inputs["eigs_csv"])
    dens_tab = read_csv(spec.inputs["density_csv"])
    _require(dens_tab, ["x", "density"], spec.inputs["density_csv"])
    eigs = eigs_tab["eig"]
    if len(eigs) == 0:
        raise RenderError("empty eigenvalue series")
    width = spec.bin_width or freedman_diaconis_width(eigs)
    edges = np.arange(eigs.min(), eigs.max() + width, width)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(eigs, bins=edges, density=True, alpha=0.55, color="tab:gray",
            label=spec.labels.get("hist", "empirical spectrum"))
    ax.plot(dens_tab["x"], dens_tab["density"], "-", color="tab:blue",
            label=spec.labels.get("density", "predicted density"))
    ax.set_xlabel(spec.labels.get("x", "eigenvalue"))
    ax.set_ylabel("density")
    if spec.x_scale == "log":
        ax.set_xscale("log")
    ax.legend(fontsize=9)
    fig.tight_layout()
    return fig


def render(spec):
    """Render one figure; returns the output path."""
    if isinstance(spec, (str, bytes)):
        spec = FigureSpec.from_json(spec)
    if spec.kind == "error_vs_lambda":
        fig = _sweep_figure(spec, "lambda")
    elif spec.kind == "error_vs_alpha":
        fig = _sweep_figure(spec, "alpha")
    elif spec.kind == "esd_overlay":
        fig = _esd_figure(spec)
    else:
        raise RenderError(f"unknown kind {spec.kind!r}")
    fig.savefig(spec.output, dpi=150)
    plt.close(fig)
    return spec.output


def main(argv=None):
    parser = argparse.ArgumentParser(prog="ermplots")
    parser.add_argument("command", choices=["render"])
    parser.add_argument("--spec", required=True, help="figure spec JSON path")
    args = parser.parse_args(argv)
    try:
        out = render(args.spec)
    except (RenderError, FileNotFoundError) as exc:
        print(f"render error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
