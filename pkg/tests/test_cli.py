from __future__ import annotations

import csv
import json

import pytest

from rydstab.cli import ConfigError, RunConfig, load_config, main


def run(*argv) -> int:
    return main([str(a) for a in argv])


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize(
    "bad",
    [
        ["--protocols", "SIM", "--blockade", "all-to-all"],
        ["--protocols", "FOO"],
        ["--distances", "4"],
        ["--gammas=-1e-3"],
        ["--bases", "Y"],
        ["--shots", "0"],
        ["--blockade", "nearest"],
    ],
)
def test_bad_configs_exit_2(bad, tmp_path):
    assert run("simulate", "--output", tmp_path, *bad) == 2


def test_config_file_errors(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("protocols: [NH]\nshots: 10\nunknown_key: 3\n")
    assert run("simulate", "--config", cfg) == 2
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"), {})


def test_config_hash_ignores_execution_details():
    a = RunConfig(workers=1, output="x").validate()
    b = RunConfig(workers=4, output="y").validate()
    assert a.hash() == b.hash()
    assert a.hash() != RunConfig(seed=1).validate().hash()


def test_zero_decay_gives_zero_failures(tmp_path, cache_dir):
    out = tmp_path / "zero"
    assert run("simulate", "--protocols", "NH", "--gammas", "0", "--shots", 20000, "--output", out,
               "--cache", cache_dir) == 0
    assert all(int(r["failures"]) == 0 for r in rows(out / "simulate.csv"))


def test_simulate_is_resumable_and_worker_independent(tmp_path, cache_dir, capsys):
    common = ["simulate", "--protocols", "NH", "TO", "--gammas", 2e-3, "--shots", 140000,
              "--cache", cache_dir, "--seed", 3]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(*common, "--output", a, "--workers", 1) == 0
    first = (a / "simulate.csv").read_text()
    capsys.readouterr()
    assert run(*common, "--output", a) == 0
    assert "(0 computed)" in capsys.readouterr().out
    assert (a / "simulate.csv").read_text() == first
    assert run(*common, "--output", b, "--workers", 3) == 0
    assert (b / "simulate.csv").read_text() == first
    manifest = json.loads((a / "manifest.json").read_text())
    assert set(manifest) >= {"config", "config_hash", "code_version", "channel_hashes", "seeds", "csv_sha256"}


def _fake_rows(path):
    """Synthetic simulate CSV following p_L = c (gamma/gamma_th)^(alpha d)."""
    lines = ["protocol,blockade,basis,d,gamma,shots,failures,p_L,ci_low,ci_high,seed"]
    for proto, (alpha, gth, c) in {"NH": (0.55, 3.9e-3, 0.036), "SIM": (0.38, 6.8e-3, 0.044)}.items():
        for d in (3, 5, 7):
            for g in (5e-4, 7e-4, 1e-3, 1.4e-3, 2e-3):
                p = c * (g / gth) ** (alpha * d)
                shots = 10**9
                f = round(p * shots)
                for basis in "XZ":
                    lines.append(f"{proto},data-ancilla,{basis},{d},{g!r},{shots},{f},{f / shots!r},"
                                 f"{f / shots * 0.99!r},{f / shots * 1.01!r},0")
    path.write_text("\n".join(lines) + "\n")


def test_fit_crossover_and_plotdata(tmp_path, capsys):
    sim = tmp_path / "simulate.csv"
    _fake_rows(sim)
    fits = tmp_path / "fits"
    assert run("fit", sim, "--window", 5e-4, 2e-3, "--output", fits) == 0
    scaling = {r["protocol"]: r for r in rows(fits / "fits_scaling.csv")}
    assert abs(float(scaling["NH"]["alpha"]) - 0.55) < 1e-3
    assert abs(float(scaling["SIM"]["gamma_th"]) / 6.8e-3 - 1) < 1e-2
    assert len(rows(fits / "fits_per_d.csv")) == 6 and (fits / "fits.txt").exists()
    capsys.readouterr()
    assert run("crossover", "--scaling", fits / "fits_scaling.csv", "--pair", "NH", "SIM", "--d", 3,
               "--output", tmp_path / "x.txt") == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert first.startswith("asymptotic") and abs(float(first.split()[1]) / 1.1256e-3 - 1) < 0.02
    assert run("crossover", "--fit", 0.5, 1e-3, 0.1, "--other", 0.5, 2e-3, 0.1) == 2
    assert run("crossover") == 2
    plots = tmp_path / "plots"
    assert run("plotdata", sim, "--window", 5e-4, 2e-3, "--output", plots) == 0
    assert len(rows(plots / "da_nh_sim.csv")) == 30 and len(rows(plots / "fits_da_nh_sim.csv")) == 6


def test_synthesize_and_extract(tmp_path, cache_dir, capsys):
    assert run("synthesize", "NH", "--cache", cache_dir) == 0
    out = capsys.readouterr().out
    assert "rydberg_time" in out
    assert run("synthesize", "SIM", "--blockade", "all-to-all") == 2
    assert run("extract", "--protocols", "NP", "--blockade", "all-to-all", "--gammas", 1e-4,
               "--output", tmp_path, "--cache", cache_dir) == 0
    assert len(list((tmp_path / "channels").glob("*.json"))) == 2


def test_verify_passes():
    assert run("verify") == 0
