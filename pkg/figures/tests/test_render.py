import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from polymerfigs import FIGURE_KINDS, RenderError, render
from polymerfigs.cli import main as cli_main


def fmt(x):
    return format(x, ".17g")


@pytest.fixture()
def run_dir(tmp_path):
    """Synthesize a run directory following the documented schemas."""
    rd = tmp_path / "run"
    rd.mkdir()
    # diagnostics.csv: a clean power-law series
    rows = ["t,M,E,D,mass,m1,m2,m4,clamped_mass,leakage"]
    import math

    for i in range(40):
        t = 10 ** (i / 10.0)
        M = 0.5 * t ** (-2 / 3)
        rows.append(
            ",".join(
                fmt(v)
                for v in (
                    t, M, 0.8 * M, 0.1 * M, 1.0,
                    0.9 * t ** (2 / 3), 1.2 * t ** (4 / 3), 4.0 * t ** (8 / 3),
                    0.0, 0.0,
                )
            )
        )
    (rd / "diagnostics.csv").write_text("\n".join(rows) + "\n")
    # snapshots
    snaps = rd / "snapshots"
    snaps.mkdir()
    N, L = 64, 30.0
    for t in (1.0, 10.0):
        lines = [f"t={fmt(t)} L={fmt(L)} N={N} d=1 beta=1 kernel=dirac"]
        scale = t ** (2 / 3)
        for j in range(N):
            x = -L + 2 * L / N * j
            lines.append(fmt(math.exp(-((x / scale) ** 2)) / scale))
        (snaps / f"g_t{t:g}.txt").write_text("\n".join(lines) + "\n")
    # ledger.csv
    (rd / "ledger.csv").write_text(
        "term,value,stderr\n"
        "boundary_T,0.6952,0.0011\n"
        "initial,0.9701,0\n"
        "drift,-0.2717,0.0009\n"
        "beta2_k1,-0.0256,3.5e-05\n"
        "beta2_k2,0.02378,3.2e-05\n"
        "residual,0.00012,0.00049\n"
    )
    # msd.csv
    (rd / "msd.csv").write_text(
        "T,m2_over_T,stderr,deviation\n"
        "1,6.79,0.007,3.79\n"
        "2,4.9,0.0065,1.9\n"
        "4,3.95,0.0048,0.95\n"
        "8,3.48,0.004,0.48\n"
    )
    return rd


def test_renders_all_five_kinds(run_dir, tmp_path):
    out = tmp_path / "figs"
    produced = render(run_dir, "all", out)
    assert len(produced) == len(FIGURE_KINDS) == 5
    for kind in FIGURE_KINDS:
        assert (out / f"{kind}.png").stat().st_size > 0
        assert (out / f"{kind}.data.json").exists()


def test_residual_roundtrip_matches_csv(run_dir, tmp_path):
    out = tmp_path / "figs"
    render(run_dir, "residuals", out)
    data = json.loads((out / "residuals.data.json").read_text())
    # error bars in the chart data must be the stderr column, bit for bit
    src = (run_dir / "ledger.csv").read_text().splitlines()[1:]
    stderrs = [float(line.split(",")[2]) for line in src]
    terms = [line.split(",")[0] for line in src]
    assert data["stderrs"] == stderrs
    assert data["terms"] == terms


def test_rendering_is_deterministic(run_dir, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    render(run_dir, "all", out1)
    render(run_dir, "all", out2)
    for kind in FIGURE_KINDS:
        a = (out1 / f"{kind}.data.json").read_bytes()
        b = (out2 / f"{kind}.data.json").read_bytes()
        assert a == b


def test_empty_csv_errors_without_image(run_dir, tmp_path):
    (run_dir / "ledger.csv").write_text("term,value,stderr\n")
    out = tmp_path / "figs"
    with pytest.raises(RenderError):
        render(run_dir, "residuals", out)
    assert not (out / "residuals.png").exists()


def test_missing_column_names_it(run_dir, tmp_path):
    (run_dir / "msd.csv").write_text("T,m2_over_T\n1,6.79\n")
    with pytest.raises(RenderError) as err:
        render(run_dir, "msd", tmp_path / "figs")
    assert "stderr" in str(err.value)


def test_missing_run_dir_errors(tmp_path):
    with pytest.raises(RenderError):
        render(tmp_path / "nope", "moments", tmp_path / "o")


def test_cli_exit_codes(run_dir, tmp_path, capsys):
    assert cli_main([str(run_dir), "moments", str(tmp_path / "f")]) == 0
    assert cli_main([str(tmp_path / "missing"), "moments", str(tmp_path / "f")]) == 1
    err = capsys.readouterr().err
    assert "missing" in err


@pytest.mark.skipif(
    shutil.which("polymerlab") is None, reason="simulation CLI not installed"
)
def test_end_to_end_from_real_run(tmp_path):
    # consume the simulation package strictly through its CLI artifacts
    out = tmp_path / "runs"
    subprocess.run(
        [
            "polymerlab", "rd-scaling", "--t-max", "200",
            "--set", f"out.dir={out}",
            "--set", "grid.L=400", "--set", "grid.N=2048",
            "--set", "model.beta=1.0", "--set", "rd.cadence=4",
            "--set", "scaling.fit_lo=20",
        ],
        check=False,
        capture_output=True,
    )
    run = next(out.iterdir())
    figs = tmp_path / "figs"
    for kind in ("moments", "maxdecay", "profiles"):
        render(run, kind, figs)
        assert (figs / f"{kind}.png").exists()
