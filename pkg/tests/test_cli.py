import csv
import json
import shutil
import subprocess
import sys

import pytest

from dbnrl.cli import main, stream_seed
from dbnrl.experiment import FermentationScenario
from dbnrl.kinetics import STATE_INDEX
from dbnrl.model import PolicyParams

TINY = {"R": 8, "macro_reps": 2, "rollouts": 5,
        "gibbs": {"n_draws": 6, "burn_in": 10, "thinning": 1},
        "optimizer": {"iterations": 5, "draws_per_iteration": 3},
        "benchmark": {"horizons": [4, 6], "repeats": 2}}


def write_config(path, **changes):
    doc = {**TINY, **changes}
    path.write_text(json.dumps(doc))
    return path


def run(cfg, out, *args):
    return main(["--config", str(cfg), "--out", str(out), *args])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base / "tiny.json")
    out = base / "out"
    for command in ("simulate", "fit", "optimize"):
        assert run(cfg, out, command) == 0
    return cfg, out


def test_simulate_writes_dataset_and_manifest(staged):
    cfg, out = staged
    rows = read_rows(out / "dataset.csv")
    assert len(rows) == 8 * 36
    manifest = json.loads((out / "dataset_manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["R"] == 8 and len(manifest["config_hash"]) == 16


def test_fit_writes_one_document_per_draw(staged):
    _, out = staged
    manifest = json.loads((out / "draws" / "manifest.json").read_text())
    assert len(manifest["draws"]) == 6
    assert manifest["seed"] == 0 and manifest["burn_in"] == 10
    assert len(list((out / "draws").glob("draw_*.json"))) == 6


def test_optimize_output_is_feasible_and_reproducible(staged, tmp_path):
    cfg, out = staged
    bundle = json.loads((out / "policy.json").read_text())
    policy = PolicyParams.from_dict(bundle["policy"])
    assert policy.feasible() and policy.vartheta.shape == (35, 5, 1)
    assert len(read_rows(out / "trace.csv")) == 5
    assert run(cfg, tmp_path, "optimize", "--draws", str(out / "draws"),
               "--scaler", str(out / "scaler.json")) == 0
    assert (tmp_path / "policy.json").read_bytes() == (out / "policy.json").read_bytes()
    assert (tmp_path / "trace.csv").read_bytes() == (out / "trace.csv").read_bytes()


def test_evaluate_policy_file(staged, tmp_path):
    cfg, out = staged
    assert run(cfg, tmp_path, "evaluate", "--policy", str(out / "policy.json")) == 0
    rows = read_rows(tmp_path / "evaluation.csv")
    assert {r["policy"] for r in rows} == {"dbn-rl", "initial", "reference"}
    assert {r["metric"] for r in rows} == {"reward", "titer"}


def test_noise_free_profiles_have_zero_width(staged, tmp_path):
    cfg, out = staged
    det = write_config(tmp_path / "det.json", kappa="inf")
    assert run(det, tmp_path, "profiles", "--policy", str(out / "policy.json")) == 0
    rows = read_rows(tmp_path / "profiles.csv")
    assert len(rows) == 3 * 35
    for r in rows:
        assert float(r["ci_high"]) - float(r["mean"]) == pytest.approx(1.96 * float(r["se"]))
        assert float(r["se"]) == pytest.approx(0.0, abs=1e-12)


def test_shapley_file_satisfies_efficiency(staged):
    cfg, out = staged
    assert run(cfg, out, "shapley") == 0
    rows = read_rows(out / "attribution.csv")
    assert {r["h"] for r in rows} == {"15"} and {r["t"] for r in rows} == {"35"}
    for coord in ("X_f", "C", "S", "N", "V"):
        sub = [r for r in rows if r["output_coordinate"] == coord]
        assert len(sub) == 6
        total = sum(float(r["contribution"]) for r in sub)
        gap = float(sub[0]["conditioned_value"]) - float(sub[0]["baseline"])
        assert total == pytest.approx(gap, rel=1e-9, abs=1e-9)


def test_low_substrate_observation_lowers_predicted_titer(tmp_path):
    # a batch at 60 h whose substrate has run low, otherwise on the reference run
    cfg = write_config(tmp_path / "cfg.json", R=50,
                       gibbs={"n_draws": 100, "burn_in": 500, "thinning": 5})
    for command in ("simulate", "fit", "optimize"):
        assert run(cfg, tmp_path, command) == 0
    state = FermentationScenario().profile[14, STATE_INDEX].copy()
    state[2] = 3.18
    assert run(cfg, tmp_path, "shapley", "--h", "15", "--t", "35",
               "--state", ",".join(repr(float(v)) for v in state)) == 0
    rows = read_rows(tmp_path / "attribution.csv")
    s_on_c = [r for r in rows if r["input_name"] == "S" and r["output_coordinate"] == "C"]
    assert float(s_on_c[0]["contribution"]) < 0.0


def test_benchmark_table(staged, tmp_path):
    cfg, _ = staged
    assert run(cfg, tmp_path, "benchmark") == 0
    rows = read_rows(tmp_path / "benchmark.csv")
    assert [(r["H"], r["method"]) for r in rows] == [("4", "nbp"), ("4", "brute"),
                                                      ("6", "nbp"), ("6", "brute")]
    assert all(float(r["mean_seconds"]) > 0 for r in rows)


def test_integrated_command(staged, tmp_path):
    cfg, _ = staged
    assert run(cfg, tmp_path, "integrated") == 0
    rows = read_rows(tmp_path / "integrated.csv")
    purity = [float(r["mean"]) for r in rows if r["metric"] == "purity"]
    assert len(purity) == 3 and all(0 < p < 1 for p in purity)


def test_exit_codes(staged, tmp_path):
    cfg, out = staged
    # configuration problems
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"R": 4, "gibbs": {"samples": 3}}))
    assert run(bad, tmp_path, "simulate") == 2
    integ = write_config(tmp_path / "integ.json", scenario="integrated")
    assert run(integ, tmp_path, "simulate") == 2
    short = write_config(tmp_path / "short.json", horizon_steps=10)
    assert run(short, tmp_path, "fit", "--dataset", str(out / "dataset.csv")) == 2
    assert run(short, tmp_path, "optimize", "--draws", str(out / "draws"),
               "--scaler", str(out / "scaler.json")) == 2
    assert run(cfg, tmp_path, "shapley", "--draws", str(out / "draws"), "--scaler",
               str(out / "scaler.json"), "--policy", str(out / "policy.json"),
               "--state", "1,2") == 2
    # numerical failure
    (tmp_path / "huge.txt").write_text("mu_max = 1e200\n")
    huge = write_config(tmp_path / "huge.json", kinetics_file="huge.txt")
    assert run(huge, tmp_path, "simulate") == 3
    # input / output
    assert run(tmp_path / "missing.json", tmp_path, "simulate") == 4
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run(cfg, blocker / "sub", "simulate") == 4
    assert run(cfg, tmp_path / "empty", "fit") == 4


def test_simulate_is_replayable_from_its_seed(tmp_path):
    cfg = write_config(tmp_path / "det.json", kappa="inf", R=3)
    assert main(["--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "7",
                 "simulate"]) == 0
    shutil.copytree(tmp_path / "a", tmp_path / "b", dirs_exist_ok=True)
    assert main(["--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "7",
                 "simulate"]) == 0
    assert ((tmp_path / "a" / "dataset.csv").read_bytes()
            == (tmp_path / "b" / "dataset.csv").read_bytes())
    assert stream_seed(7, "simulate") != stream_seed(7, "fit")


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", R=2)
    proc = subprocess.run([sys.executable, "-m", "dbnrl.cli", "--config", str(cfg),
                           "--out", str(tmp_path), "simulate"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip().endswith("dataset.csv")
