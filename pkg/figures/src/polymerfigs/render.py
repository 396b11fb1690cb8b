"""Render the five standard figure kinds from a run directory.

Inputs (schemas owned by the simulation package):
  diagnostics.csv   t,M,E,D,mass,m1,m2,m4,clamped_mass,leakage
  snapshots/*.txt   header "t=.. L=.. N=.. d=.. beta=.. kernel=.." + samples
  ledger.csv        term,value,stderr
  msd.csv           T,m2_over_T,stderr,deviation

Each render writes <kind>.png plus a <kind>.data.json sidecar holding the
plotted arrays, so charts can be checked against their sources numerically.
Rendering is read-only on the run directory and deterministic for fixed CSVs.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURE_KINDS = ("moments", "maxdecay", "profiles", "residuals", "msd")


class RenderError(RuntimeError):
    """Missing/empty input or a schema mismatch; no image is produced."""


def read_csv_columns(path: Path, required: list) -> dict:
    if not path.exists():
        raise RenderError(f"missing input file: {path}")
    with open(path) as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise RenderError(f"empty CSV: {path}")
        for col in required:
            if col not in reader.fieldnames:
                raise RenderError(f"{path.name}: missing column {col!r}")
        rows = list(reader)
    if not rows:
        raise RenderError(f"{path.name}: no data rows")
    out = {}
    for col in required:
        vals = []
        for r in rows:
            try:
                vals.append(float(r[col]))
            except ValueError:
                vals.append(math.nan)
        out[col] = np.array(vals)
    out["_raw"] = rows
    return out


def read_snapshot(path: Path):
    with open(path) as f:
        header = f.readline().strip()
        meta = {}
        for tok in header.split():
            k, _, v = tok.partition("=")
            meta[k] = v
        values = np.array([float(line) for line in f])
    for key in ("t", "L", "N", "d"):
        if key not in meta:
            raise RenderError(f"{path.name}: snapshot header lacks {key!r}")
    return meta, values


def _sidecar(out: Path, kind: str, data: dict):
    payload = json.dumps(data, indent=2, sort_keys=True)
    (out / f"{kind}.data.json").write_text(payload + "\n")


def render_moments(run_dir: Path, out: Path) -> Path:
    cols = read_csv_columns(run_dir / "diagnostics.csv", ["t", "m1", "m2", "m4"])
    t = cols["t"]
    keep = t > 0
    fig, ax = plt.subplots(figsize=(6, 4.5))
    data = {"t": t[keep].tolist()}
    for p, color in ((1, "tab:blue"), (2, "tab:orange"), (4, "tab:green")):
        y = cols[f"m{p}"][keep]
        ax.loglog(t[keep], y, color=color, lw=1.2, label=f"$m_{p}(t)$")
        # reference slope 2p/3 anchored at the last point
        ref = y[-1] * (t[keep] / t[keep][-1]) ** (2 * p / 3)
        ax.loglog(t[keep], ref, color=color, ls="--", lw=0.8,
                  label=f"slope {2 * p / 3:.3g}")
        data[f"m{p}"] = y.tolist()
        data[f"ref{p}"] = ref.tolist()
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\int |x|^p g(t,x)\,dx$")
    ax.set_title("moment growth against the 2p/3 reference slopes")
    ax.legend(fontsize=8)
    fig.tight_layout()
    target = out / "moments.png"
    fig.savefig(target, dpi=130)
    plt.close(fig)
    _sidecar(out, "moments", data)
    return target


def render_maxdecay(run_dir: Path, out: Path) -> Path:
    cols = read_csv_columns(run_dir / "diagnostics.csv", ["t", "M"])
    t, M = cols["t"], cols["M"]
    keep = t >= 1.0
    if not keep.any():
        raise RenderError("diagnostics.csv has no rows with t >= 1")
    y = t[keep] ** (2.0 / 3.0) * M[keep]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogx(t[keep], y, lw=1.2)
    ax.axhline(8.66, color="tab:red", ls="--", lw=0.8, label="traced envelope 8.66")
    ax.set_xlabel("t")
    ax.set_ylabel(r"$t^{2/3} \max_x g(t,x)$")
    ax.set_title("decay plateau of the rescaled maximum")
    ax.legend(fontsize=8)
    fig.tight_layout()
    target = out / "maxdecay.png"
    fig.savefig(target, dpi=130)
    plt.close(fig)
    _sidecar(out, "maxdecay", {"t": t[keep].tolist(), "t23M": y.tolist()})
    return target


def render_profiles(run_dir: Path, out: Path) -> Path:
    snap_dir = run_dir / "snapshots"
    if not snap_dir.is_dir():
        raise RenderError(f"missing snapshot directory: {snap_dir}")
    snaps = sorted(snap_dir.glob("*.txt"))
    if not snaps:
        raise RenderError(f"no snapshots in {snap_dir}")
    fig, ax = plt.subplots(figsize=(6, 4.5))
    data = {}
    for path in snaps:
        meta, values = read_snapshot(path)
        t = float(meta["t"])
        if t < 1.0 or int(meta["d"]) != 1:
            continue
        L, N = float(meta["L"]), int(meta["N"])
        x = -L + (2 * L / N) * np.arange(N)
        scale = t ** (2.0 / 3.0)
        y = x / scale
        sel = np.abs(y) <= 4.0
        ax.plot(y[sel], scale * values[sel], lw=1.0, label=f"t={t:g}")
        data[f"t={t:g}"] = {
            "y": y[sel].tolist(),
            "profile": (scale * values[sel]).tolist(),
        }
    if not data:
        raise RenderError("no d=1 snapshots with t >= 1 to overlay")
    ax.set_xlabel(r"$x / t^{2/3}$")
    ax.set_ylabel(r"$t^{2/3} g(t, t^{2/3} y)$")
    ax.set_title("rescaled profile overlay")
    ax.legend(fontsize=8)
    fig.tight_layout()
    target = out / "profiles.png"
    fig.savefig(target, dpi=130)
    plt.close(fig)
    _sidecar(out, "profiles", data)
    return target


def render_residuals(run_dir: Path, out: Path) -> Path:
    cols = read_csv_columns(run_dir / "ledger.csv", ["term", "value", "stderr"])
    terms = [r["term"] for r in cols["_raw"]]
    values = cols["value"]
    stderrs = cols["stderr"]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    xs = np.arange(len(terms))
    ax.bar(xs, values, yerr=stderrs, capsize=3, color="tab:blue", alpha=0.8)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xticks(xs)
    ax.set_xticklabels(terms, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("term value")
    ax.set_title("weak-identity ledger with standard errors")
    fig.tight_layout()
    target = out / "residuals.png"
    fig.savefig(target, dpi=130)
    plt.close(fig)
    _sidecar(
        out,
        "residuals",
        {"terms": terms, "values": values.tolist(), "stderrs": stderrs.tolist()},
    )
    return target


def render_msd(run_dir: Path, out: Path) -> Path:
    cols = read_csv_columns(run_dir / "msd.csv", ["T", "m2_over_T", "stderr", "deviation"])
    T = cols["T"]
    dev = cols["deviation"]
    se = cols["stderr"]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(T, dev, yerr=se, marker="o", lw=1.0, capsize=3)
    ax.set_xscale("log")
    if (dev > 0).all():
        ax.set_yscale("log")
    ax.set_xlabel("T")
    ax.set_ylabel(r"$|m_2(T)/T - d|$")
    ax.set_title("mean-square-displacement deviation trend")
    fig.tight_layout()
    target = out / "msd.png"
    fig.savefig(target, dpi=130)
    plt.close(fig)
    _sidecar(
        out,
        "msd",
        {"T": T.tolist(), "deviation": dev.tolist(), "stderr": se.tolist(),
         "m2_over_T": cols["m2_over_T"].tolist()},
    )
    return target


RENDERERS = {
    "moments": render_moments,
    "maxdecay": render_maxdecay,
    "profiles": render_profiles,
    "residuals": render_residuals,
    "msd": render_msd,
}


def render(run_dir, kind: str, out_dir) -> list:
    """Render one figure kind (or 'all') from run_dir into out_dir."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    if not run_dir.is_dir():
        raise RenderError(f"run directory not found: {run_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    kinds = FIGURE_KINDS if kind == "all" else (kind,)
    produced = []
    for k in kinds:
        if k not in RENDERERS:
            raise RenderError(f"unknown figure kind {k!r}; choose from {FIGURE_KINDS}")
        produced.append(RENDERERS[k](run_dir, out_dir))
    return produced
