import json

import numpy as np
import pytest
import tomli

from spatial_sir.cli import main
from spatial_sir.config_io import (
    config_from_dict,
    config_to_dict,
    dump_config,
    load_config,
    load_study,
    save_config,
)
from spatial_sir.model import ConfigError

SMALL = """
[domain]
dim = 2

[kernel]
family = "gaussian_bump"
sigma = 0.2
floor = 0.0

[infectivity.initial]
family = "markov"
a = 1.0
rho = 0.5

[infectivity.new]
family = "hump"
a = 1.5
p = 1.0
h_min = 2.0
h_max = 4.0

[initial_condition]
frac_S = 0.9
frac_I = 0.1

[initial_condition.density_I]
family = "gaussian_mixture"
weights = [1.0]
means = [[0.3, 0.3]]
sigmas = [0.15]

[run]
gamma = 0.5
horizon = 3.0
population_size = 300
master_seed = 5
snapshot_every = 0.5
grid = 8
dt = 0.05
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], lines[1].split(","), [line.split(",") for line in lines[2:] if not line.startswith("#")]


def test_roundtrip(small, tmp_path):
    cfg = load_config(small)
    assert cfg.snapshot_times == (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    assert cfg.initial.frac_R == 0.0
    save_config(cfg, tmp_path / "again.toml")
    again = load_config(tmp_path / "again.toml")
    assert config_to_dict(again) == config_to_dict(cfg)
    assert dump_config(again) == dump_config(cfg)


@pytest.mark.parametrize("section,key", [("run", "horizn"), ("kernel", "sigmaa"), ("initial_condition", "frac_X")])
def test_unknown_keys_rejected(section, key):
    doc = tomli.loads(SMALL)
    doc[section][key] = 1.0
    with pytest.raises(ConfigError, match=key):
        config_from_dict(doc)


def test_unknown_section_rejected():
    doc = tomli.loads(SMALL)
    doc["extra"] = {}
    with pytest.raises(ConfigError, match="extra"):
        config_from_dict(doc)


def test_study_section_only_in_study_files(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text(SMALL + "\n[study]\nn_ladder = [100, 200, 400]\nreplicates = 3\n")
    spec = load_study(path)
    assert spec.n_ladder == (100, 200, 400)
    with pytest.raises(ConfigError, match="study"):
        load_config(path)
    path.write_text(SMALL + "\n[study]\nn_ladder = [200, 100, 400]\n")
    with pytest.raises(ConfigError, match="increasing"):
        load_study(path)


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.toml")):
        if "study" in path.name:
            load_study(path)
        else:
            load_config(path)


def test_sim_writes_outputs(small, tmp_path):
    out = tmp_path / "o"
    assert main(["sim", "--config", str(small), "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"events.csv", "snapshots.csv", "manifest.json"}
    head, cols, rows = read_csv(out / "events.csv")
    assert head.startswith("# schema: events")
    head, cols, rows = read_csv(out / "snapshots.csv")
    assert cols == ["t", "measure", "phi", "value"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 5 and man["config"]["run"]["population_size"] == 300
    assert not any("second" in k for k in man)


def test_sim_deterministic_across_threads(small, tmp_path):
    outs = []
    for threads in ("1", "2", "1"):
        out = tmp_path / f"t{threads}_{len(outs)}"
        assert main(["sim", "--config", str(small), "--out", str(out), "--threads", threads]) == 0
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1] == outs[2]


def test_sim_seed_override_changes_output(small, tmp_path):
    main(["sim", "--config", str(small), "--out", str(tmp_path / "a")])
    main(["sim", "--config", str(small), "--out", str(tmp_path / "b"), "--seed", "6"])
    assert (tmp_path / "a" / "events.csv").read_bytes() != (tmp_path / "b" / "events.csv").read_bytes()


def test_invalid_gamma_exit_code(small, tmp_path, capsys):
    small.write_text(SMALL.replace("gamma = 0.5", "gamma = 1.5"))
    code = main(["sim", "--config", str(small), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "gamma must lie in [0, 1]" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path):
    assert main(["sim", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 3


def test_env_var_output_dir(small, tmp_path, monkeypatch):
    monkeypatch.setenv("SPATIAL_SIR_OUT", str(tmp_path / "env"))
    assert main(["sim", "--config", str(small)]) == 0
    assert (tmp_path / "env" / "events.csv").exists()
    # explicit flag wins
    assert main(["sim", "--config", str(small), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "manifest.json").exists()


def test_meanfield_outputs(small, tmp_path):
    out = tmp_path / "mf"
    assert main(["meanfield", "--config", str(small), "--out", str(out), "--step-halving", "2"]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"solution.csv", "observables.csv", "apriori.csv", "halving.csv", "manifest.json"} <= names
    head, cols, rows = read_csv(out / "solution.csv")
    assert cols[0] == "t" and cols[-1] == "Gamma"
    assert len({r[0] for r in rows}) == 7
    _, cols, rows = read_csv(out / "halving.csv")
    assert len(rows) == 2 and float(rows[1][2]) > 1.5
    man = json.loads((out / "manifest.json").read_text())
    assert man["apriori_passed"] and man["conservation_residual"] < 1e-12


def test_meanfield_picard_and_oracle(tmp_path):
    cfg = tmp_path / "h.toml"
    from pathlib import Path

    text = (Path(__file__).resolve().parents[1] / "configs" / "homogeneous.toml").read_text()
    cfg.write_text(text.replace("horizon = 40.0", "horizon = 5.0"))
    out = tmp_path / "mf"
    assert main(["meanfield", "--config", str(cfg), "--out", str(out), "--picard", "--homogeneous"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["solver"] == "picard" and man["picard_iterations"] > 1
    assert man["oracle_sup_error"]["S"] < 1e-3
    assert man["oracle_sup_error"]["I_vs_ode"] < 1e-3
    assert (out / "oracle.csv").read_text().startswith("# schema: oracle v1")


def test_validate(small, tmp_path, capsys):
    assert main(["validate", "--config", str(small), "--out", str(tmp_path / "v")]) == 0
    assert capsys.readouterr().out.strip() == "ok"
    assert (tmp_path / "v" / "denominator.csv").exists()
    text = SMALL.replace('family = "gaussian_bump"\nsigma = 0.2\nfloor = 0.0', 'family = "top_hat"\nradius = 0.3\nk = 1.0')
    small.write_text(text)
    assert main(["validate", "--config", str(small)]) == 1
    assert "allow_discontinuous" in capsys.readouterr().out
    small.write_text(text.replace("radius = 0.3", "radius = 0.3\nallow_discontinuous = true"))
    assert main(["validate", "--config", str(small)]) == 0


def test_validate_reports_all_violations(small, capsys):
    small.write_text(SMALL.replace("gamma = 0.5", "gamma = -1.0").replace("frac_I = 0.1", "frac_I = 0.2"))
    assert main(["validate", "--config", str(small)]) == 1
    lines = capsys.readouterr().out.splitlines()
    assert any("gamma" in l for l in lines) and any("sum to 1" in l for l in lines)


def test_converge_small(small, tmp_path):
    study = tmp_path / "st.toml"
    study.write_text(SMALL + "\n[study]\nn_ladder = [50, 100, 200]\nreplicates = 3\nphi = [\"one\", \"x10\"]\n")
    out = tmp_path / "c"
    assert main(["converge", "--config", str(study), "--out", str(out)]) == 0
    _, cols, rows = read_csv(out / "study.csv")
    assert cols == ["N", "replicate", "phi", "component", "sup_err", "aggregate"]
    assert len(rows) == 3 * 3 * 2 * 4
    assert json.loads((out / "manifest.json").read_text())["results"][0]["gamma"] == 0.5
    assert "reference_seconds" in json.loads((out / "telemetry.json").read_text())["0.5"]
