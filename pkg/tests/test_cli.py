import json
from pathlib import Path

import pytest

from tdsynth.cli import ConfigError, main, parse_config

CONF_ROOT = Path(__file__).resolve().parent.parent / "configs" / "default.conf"


def _write(tmp_path, text):
    p = tmp_path / "run.conf"
    p.write_text(text)
    return p


def test_parse_shipped_default_config():
    cfg = parse_config(CONF_ROOT)
    assert cfg.penetration_level == 0.5
    assert cfg.large_system is True
    assert cfg.dn_v_limits == (0.95, 1.05)


def test_config_rejects_unknown_field(tmp_path):
    path = _write(tmp_path, "penetration_level = 0.5\nmystery_knob = 3\n")
    with pytest.raises(ConfigError, match="mystery_knob"):
        parse_config(path)


def test_config_rejects_bad_values(tmp_path):
    path = _write(tmp_path, "penetration_level = -0.1\n")
    with pytest.raises(ConfigError, match="penetration_level"):
        parse_config(path)
    path = _write(tmp_path, "random = maybe\n")
    with pytest.raises(ConfigError, match="random"):
        parse_config(path)


def test_generate_smoke_and_summary(tmp_path, capsys):
    conf = _write(tmp_path, "penetration_level = 0.3\nrng_seed = 7\n")
    rc = main(["generate", str(conf), "--out", str(tmp_path / "out")])
    out = capsys.readouterr().out
    assert rc == 0
    run_dirs = list((tmp_path / "out").iterdir())
    assert len(run_dirs) == 1
    bundle = run_dirs[0]
    assert (bundle / "case.m").exists()
    assert (bundle / "case.oltc.csv").exists()
    assert (bundle / "manifest.json").exists()
    summary = json.loads((bundle / "summary.json").read_text())
    assert summary["dn_instances"] == 3
    assert "realized penetration" in out

    manifest = json.loads((bundle / "manifest.json").read_text())
    assert manifest["config"]["penetration_level"] == 0.3
    assert manifest["seed"] == 7
    assert len(manifest["instances"]) == 3


def test_generate_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, "penetration_level = -0.1\n")
    assert main(["generate", str(bad), "--out", str(tmp_path / "o1")]) == 2
    assert "penetration_level" in capsys.readouterr().err

    unknown = _write(tmp_path, "nonsense = 1\n")
    assert main(["generate", str(unknown), "--out", str(tmp_path / "o2")]) == 2
    assert "nonsense" in capsys.readouterr().err

    conf = _write(tmp_path, "penetration_level = 0.3\n")
    rc = main(
        ["generate", str(conf), "--out", str(tmp_path / "o3"),
         "--templates", str(tmp_path / "missing")]
    )
    assert rc == 1
    assert "[load-tn]" in capsys.readouterr().err


def test_generate_is_deterministic(tmp_path):
    conf = _write(tmp_path, "penetration_level = 0.4\nrandom = true\nrng_seed = 11\n")
    assert main(["generate", str(conf), "--out", str(tmp_path / "a")]) == 0
    assert main(["generate", str(conf), "--out", str(tmp_path / "b")]) == 0
    run_a = next((tmp_path / "a").iterdir())
    run_b = next((tmp_path / "b").iterdir())
    assert run_a.name == run_b.name  # digest-stable run id
    for f in sorted(run_a.iterdir()):
        assert f.read_bytes() == (run_b / f.name).read_bytes()


def test_jobs_flag_matches_serial_output(tmp_path):
    conf = _write(tmp_path, "penetration_level = 0.6\nrandom = true\nrng_seed = 4\n")
    assert main(["generate", str(conf), "--out", str(tmp_path / "s")]) == 0
    assert main(["generate", str(conf), "--out", str(tmp_path / "p"), "--jobs", "3"]) == 0
    run_s = next((tmp_path / "s").iterdir())
    run_p = next((tmp_path / "p").iterdir())
    for f in sorted(run_s.iterdir()):
        assert f.read_bytes() == (run_p / f.name).read_bytes()


def test_inspect_transfers_match_manifest(tmp_path, capsys):
    conf = _write(tmp_path, "penetration_level = 0.5\n")
    assert main(["generate", str(conf), "--out", str(tmp_path / "out")]) == 0
    bundle = next((tmp_path / "out").iterdir())
    manifest = json.loads((bundle / "manifest.json").read_text())
    expected = {}
    for inst in manifest["instances"]:
        expected[inst["host_bus"]] = (
            expected.get(inst["host_bus"], 0.0) + inst["boundary_import_pu"]
        )
    capsys.readouterr()
    assert main(["inspect", str(bundle)]) == 0
    out = capsys.readouterr().out
    for line in out.splitlines():
        if line.strip().startswith("bus ") and "total:" in line:
            bus = int(line.split()[1])
            total = float(line.split(":")[1])
            assert total == pytest.approx(expected[bus], rel=7e-3, abs=5e-4)


def test_seed_override_changes_run_id(tmp_path):
    conf = _write(tmp_path, "random = true\nrng_seed = 1\n")
    assert main(["generate", str(conf), "--out", str(tmp_path / "out")]) == 0
    assert main(["generate", str(conf), "--out", str(tmp_path / "out"), "--seed", "2"]) == 0
    assert len(list((tmp_path / "out").iterdir())) == 2


def test_inspect_roundtrip(tmp_path, capsys):
    conf = _write(tmp_path, "penetration_level = 0.5\n")
    assert main(["generate", str(conf), "--out", str(tmp_path / "out")]) == 0
    bundle = next((tmp_path / "out").iterdir())
    capsys.readouterr()

    assert main(["inspect", str(bundle)]) == 0
    out = capsys.readouterr().out
    assert "validation: ok" in out
    # combined-system penetration sits below the per-replica setting because
    # the never-replaced Equiv load stays in the denominator
    line = next(l for l in out.splitlines() if l.startswith("penetration level:"))
    assert 0.0 < float(line.split(":")[1]) < 0.5
    assert "boundary transfers" in out

    assert main(["inspect", str(tmp_path / "nowhere")]) == 1
