import json
import shutil
import subprocess
import sys

import pytest

from pnrt.cli import KEYS, build_parser, main

from conftest import FIXTURES

TOY = FIXTURES / "toy"


@pytest.fixture
def toy_dir(tmp_path):
    d = tmp_path / "toy"
    shutil.copytree(TOY, d)
    return d


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def test_pair_exhaustive(capsys):
    code, out, _ = run(["test", "--config", TOY / "pair.json"], capsys)
    assert code == 0
    art = json.loads(out)
    assert art["result"]["pval"] == pytest.approx(1 / 3, abs=1e-12)
    assert round(art["result"]["pval"], 4) == 0.3333
    assert art["seed"] == 7 and art["command"] == "test"


def test_frt_exhaustive(capsys):
    code, out, _ = run(["test", "--config", TOY / "frt.json"], capsys)
    assert code == 0 and round(json.loads(out)["result"]["pval"], 4) == 0.6667


def test_text_output(capsys):
    code, out, _ = run(["test", "--config", TOY / "pair.json", "--format", "text"], capsys)
    assert code == 0 and "p-value" in out and "0.333333" in out


def test_missing_outcomes_exit_2(toy_dir, capsys):
    (toy_dir / "outcomes.csv").unlink()
    code, _, err = run(["test", "--config", toy_dir / "pair.json"], capsys)
    assert code == 2 and "outcomes" in err


def test_observed_outside_pool_exit_3(toy_dir, capsys):
    (toy_dir / "pool.csv").write_text("assignment_id,bits\na,010000\nb,001000\n")
    cfg = json.loads((toy_dir / "pair.json").read_text())
    cfg["mechanism"] = {"variant": "pool", "path": "pool.csv"}
    code, _, err = run(["test", "--config", write(toy_dir / "c.json", cfg)], capsys)
    assert code == 3 and "pool" in err


def test_unknown_key_exit_2(toy_dir, capsys):
    cfg = json.loads((toy_dir / "pair.json").read_text())
    cfg["alhpa"] = 0.1
    code, _, err = run(["test", "--config", write(toy_dir / "c.json", cfg)], capsys)
    assert code == 2 and "alhpa" in err


def test_malformed_json_exit_2(toy_dir, capsys):
    (toy_dir / "bad.json").write_text("{not json")
    code, _, _ = run(["test", "--config", toy_dir / "bad.json"], capsys)
    assert code == 2


def test_rerun_is_byte_identical(toy_dir, capsys):
    cfg = json.loads((toy_dir / "pair.json").read_text())
    cfg.update(mode="monte_carlo", R=500, engine="min")
    c = write(toy_dir / "mc.json", cfg)
    run(["test", "--config", c, "--out", toy_dir / "a.json", "--workers", "1"], capsys)
    run(["test", "--config", c, "--out", toy_dir / "b.json", "--workers", "3"], capsys)
    assert (toy_dir / "a.json").read_bytes() == (toy_dir / "b.json").read_bytes()


def test_seed_generated_and_echoed(toy_dir, capsys):
    cfg = json.loads((toy_dir / "pair.json").read_text())
    del cfg["seed"]
    cfg.update(mode="monte_carlo", R=50)
    code, out, err = run(["test", "--config", write(toy_dir / "c.json", cfg)], capsys)
    seed = json.loads(out)["seed"]
    assert code == 0 and f"seed: {seed}" in err


def test_crt_event(toy_dir, capsys):
    cfg = json.loads((toy_dir / "pair.json").read_text())
    cfg.update(engine="crt", event={"focal_units": ["i2", "i4", "i6"],
                                    "focal_assignments": [["i1"], ["i3"], ["i5"]]})
    code, out, _ = run(["test", "--config", write(toy_dir / "c.json", cfg)], capsys)
    assert code == 0 and json.loads(out)["result"]["pval"] == pytest.approx(1 / 3)


def test_sequential_all_equal(toy_dir, capsys):
    (toy_dir / "flat.csv").write_text("unit_id,y\n" + "".join(f"i{k},1\n" for k in range(1, 7)))
    cfg = json.loads((toy_dir / "pair.json").read_text())
    cfg.update(outcomes="flat.csv", thresholds=[0, 1, 2], R=100, mode="monte_carlo")
    del cfg["statistic"]
    code, out, _ = run(["sequential", "--config", write(toy_dir / "s.json", cfg)], capsys)
    res = json.loads(out)["result"]
    assert code == 0 and res["K_hat"] == 0
    assert res["summary"] == "no significant interference"


def test_sequential_procedures(toy_dir, capsys):
    cfg = json.loads((toy_dir / "pair.json").read_text())
    cfg.update(thresholds=[0, 1, 2], R=100, mode="monte_carlo", engine="min")
    del cfg["statistic"]
    for proc in ("descent", "pretest"):
        cfg["procedure"] = proc
        code, out, _ = run(["sequential", "--config", write(toy_dir / "s.json", cfg)], capsys)
        assert code == 0 and json.loads(out)["kind"] in ("sequential_result", "pretest")
    cfg["procedure"] = "sideways"
    code, _, _ = run(["sequential", "--config", write(toy_dir / "s.json", cfg)], capsys)
    assert code == 2


def test_power_csv(tmp_path, capsys):
    cfg = {"sim": {"N": 60, "n_hotspots": 6, "n_treated": 2, "taus": [0, 1], "sims": 3,
                   "R": 30, "pool_size": 20}, "seed": 1}
    code, out, _ = run(["power", "--config", write(tmp_path / "p.json", cfg)], capsys)
    lines = out.splitlines()
    assert code == 0 and lines[0] == "engine,tau,k,rejections,sims,rate,se"
    assert len(lines) == 1 + 4 * 2


def test_simulate_then_test(tmp_path, capsys):
    cfg = {"sim": {"N": 60, "n_hotspots": 6, "n_treated": 2, "pool_size": 20, "R": 40},
           "tau": 1.0, "out_dir": "data", "seed": 2}
    code, out, _ = run(["simulate", "--config", write(tmp_path / "s.json", cfg)], capsys)
    assert code == 0
    d = tmp_path / "data"
    assert {p.name for p in d.iterdir()} >= {"coordinates.csv", "outcomes.csv", "pool.csv",
                                              "test_config.json"}
    code, out, _ = run(["test", "--config", d / "test_config.json"], capsys)
    assert code == 0 and json.loads(out)["result"]["engine"] == "pair"


def test_oracle_table(capsys):
    code, out, _ = run(["oracle", "--seed", "0", "--format", "csv"], capsys)
    lines = out.splitlines()
    assert code == 0 and len(lines) == 7
    assert lines[1] == "100000,2,5,3,1,4,6"
    assert lines[2] == "010000,?,?,3,1,4,6"
    assert lines[6] == "000001,?,5,3,1,4,?"


def test_help_lists_keys():
    text = build_parser().format_help()
    for cmd, keys in KEYS.items():
        for k in keys:
            assert k in text


def test_module_entry_point():
    p = subprocess.run([sys.executable, "-m", "pnrt", "test", "--config", str(TOY / "pair.json")],
                       capture_output=True, text=True)
    assert p.returncode == 0 and '"pval"' in p.stdout
