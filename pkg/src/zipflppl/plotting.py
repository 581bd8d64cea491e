"""Static figures written next to the CSV outputs.

Figures are built on a bare :class:`matplotlib.figure.Figure` (no pyplot
state) and saved as SVG with a fixed hash salt and no date stamp, so equal
inputs give byte-identical files.
"""

from __future__ import annotations

import csv

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from .calibration import JLS, ZIPF
from .lppl_core import lppl_log_price

matplotlib.rcParams["svg.hashsalt"] = "zipflppl"

COLORS = {JLS: "tab:blue", ZIPF: "tab:red"}
LABELS = {JLS: "JLS", ZIPF: "JLS + Zipf"}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def fit_curves(ensemble):
    """Model log-price of every kept fit, sampled at each window day."""
    s = ensemble.window.series
    return [lppl_log_price(s.t, r.nl, r.lin, s.zeta) for r in ensemble.results]


def write_plot_data(path, series, ensembles) -> None:
    """CSV with observed ln p, zeta and one column per kept fit (``jls_1``, ``zipf_3``...)."""
    columns, names = [], []
    for model in (JLS, ZIPF):
        ens = ensembles.get(model)
        if ens is None:
            continue
        for k, curve in enumerate(fit_curves(ens), 1):
            names.append(f"{model}_{k}")
            columns.append(curve)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "date", "ln_p", "zeta"] + names)
        for i in range(len(series)):
            w.writerow([int(series.t[i]), series.dates[i], repr(float(series.ln_p[i])),
                        repr(float(series.zeta[i]))] + [repr(float(c[i])) for c in columns])


def plot_fit(path, series, ensembles, title=None) -> None:
    """Observed log-price with every kept fit per model (top) and zeta (bottom)."""
    fig = Figure(figsize=(8, 6))
    ax, az = fig.subplots(2, 1, sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    ax.plot(series.t, series.ln_p, color="black", lw=1.0, label="ln p")
    for model in (JLS, ZIPF):
        ens = ensembles.get(model)
        if ens is None:
            continue
        for k, curve in enumerate(fit_curves(ens)):
            ax.plot(series.t, curve, color=COLORS[model], lw=0.6, alpha=0.7,
                    label=LABELS[model] if k == 0 else None)
        tc = [r.nl.tc for r in ens.results]
        ax.axvline(float(np.median(tc)), color=COLORS[model], ls="--", lw=0.8)
    ax.set_ylabel("log price")
    ax.legend(loc="upper left", frameon=False)
    if title:
        ax.set_title(title)
    az.plot(series.t, series.zeta, color="tab:green", lw=1.0)
    az.axhline(0.0, color="grey", lw=0.5)
    az.set_ylabel("zeta")
    az.set_xlabel("trading day")
    fig.tight_layout()
    _save(fig, path)


def plot_scan(path, result) -> None:
    """Histograms of predicted critical times per model and of the Zipf loading."""
    fig = Figure(figsize=(9, 3.5))
    ax_tc, ax_g = fig.subplots(1, 2)
    for model in (JLS, ZIPF):
        tc = result.values(model, "tc")
        if tc.size:
            ax_tc.hist(tc, bins=30, histtype="step", color=COLORS[model], label=LABELS[model])
    ax_tc.set_xlabel("predicted tc (trading day)")
    ax_tc.set_ylabel("fits")
    ax_tc.legend(frameon=False)
    g = result.values(ZIPF, "gamma")
    if g.size:
        ax_g.hist(g, bins=30, color=COLORS[ZIPF], alpha=0.7)
    ax_g.set_xlabel("gamma")
    fig.tight_layout()
    _save(fig, path)
