import json
import math
import os

import pytest

from atshuffle.cli import RunConfig, generate_instance, main, run
from atshuffle.errors import ContractError
from atshuffle.perms import BiasMatrix


def write_config(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def test_exact_command(tmp_path):
    cfg = write_config(tmp_path, "c.json", {
        "command": "exact", "n": 3, "p": {"family": "constant-q", "q": 0.6}})
    out = str(tmp_path / "run")
    assert main(["--config", cfg, "--out", out]) == 0
    rec = json.loads((tmp_path / "run" / "result.json").read_text())
    assert rec["verdict"]["details"]["Z"] == pytest.approx(0.76, abs=1e-12)
    assert len(rec["series"]) == 6
    man = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert man["incomplete"] is False
    assert "runtime_s" in man and "started" in man
    assert (tmp_path / "run" / "distribution.csv").exists()
    assert (tmp_path / "run" / "resolved_config.json").exists()


def test_mix_exact_command(tmp_path):
    cfg = write_config(tmp_path, "m.json", {
        "command": "mix", "ns": [2], "p": {"family": "constant-q", "q": 0.6},
        "method": "exact", "delta": 0.25})
    out = str(tmp_path / "mix")
    assert main(["--config", cfg, "--out", out]) == 0
    rec = json.loads((tmp_path / "mix" / "result.json").read_text())
    assert rec["series"][0]["estimate"] == 1.0
    # the worst-case TV curve is exported as t,tv
    curve = (tmp_path / "mix" / "tv_curve_n2.csv").read_text().splitlines()
    assert curve[0] == "t,tv"
    assert float(curve[1].split(",")[1]) == pytest.approx(0.6)


def test_byte_identical_reruns(tmp_path):
    cfg = write_config(tmp_path, "d.json", {
        "command": "disconnect", "n": 6,
        "p": {"family": "random-eps", "eps": 0.5}, "ell": 2,
        "mode": "sampled", "budget": 2000})
    assert main(["--config", cfg, "--seed", "9", "--out", str(tmp_path / "a")]) == 0
    assert main(["--config", cfg, "--seed", "9", "--out", str(tmp_path / "b")]) == 0
    ra = (tmp_path / "a" / "result.json").read_bytes()
    rb = (tmp_path / "b" / "result.json").read_bytes()
    assert ra == rb
    ca = (tmp_path / "a" / "result.csv").read_bytes()
    cb = (tmp_path / "b" / "result.csv").read_bytes()
    assert ca == cb


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ContractError):
        RunConfig({"command": "exact", "n": 3,
                   "p": {"family": "constant-q", "q": 0.6}, "bogus": 1})
    cfg = write_config(tmp_path, "bad.json", {
        "command": "exact", "n": 3, "p": {"family": "constant-q", "q": 0.6},
        "bogus": 1})
    assert main(["--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_unknown_command_rejected():
    with pytest.raises(ContractError):
        RunConfig({"command": "frobnicate"})


def test_cap_violation_surfaces(tmp_path):
    cfg = write_config(tmp_path, "big.json", {
        "command": "exact", "n": 11, "p": {"family": "constant-q", "q": 0.6}})
    out = str(tmp_path / "big")
    assert main(["--config", cfg, "--out", out]) == 2
    man = json.loads((tmp_path / "big" / "manifest.json").read_text())
    assert "CapExceeded" in man["error"]


def test_sample_and_chain_commands(tmp_path):
    cfg = write_config(tmp_path, "s.json", {
        "command": "sample", "n": 6, "p": {"family": "constant-q", "q": 0.7},
        "ell": 2, "samples": 50})
    assert main(["--config", cfg, "--out", str(tmp_path / "s")]) == 0
    lines = (tmp_path / "s" / "samples.jsonl").read_text().splitlines()
    assert len(lines) == 50
    assert sorted(json.loads(lines[0])) == list(range(1, 7))

    cfg = write_config(tmp_path, "t.json", {
        "command": "chain", "n": 8, "p": {"family": "constant-q", "q": 0.7},
        "steps": 200, "checkpoint_every": 50, "tracked_ks": [2]})
    assert main(["--config", cfg, "--out", str(tmp_path / "t")]) == 0
    recs = [json.loads(l) for l in
            (tmp_path / "t" / "trajectory.jsonl").read_text().splitlines()]
    assert recs[0]["step"] == 0 and recs[-1]["step"] == 200
    assert "2" in recs[0]["projections"]


def test_asep_burnin_blockcheck_lowerbound_spatial(tmp_path):
    runs = [
        ("asep", {"command": "asep", "n": 10, "k": 3, "q": 0.75}),
        ("burnin", {"command": "burnin", "n": 24,
                    "p": {"family": "constant-q", "q": 0.75},
                    "replicas": 20, "T": 2000}),
        ("blockcheck", {"command": "blockcheck", "n": 4,
                        "p": {"family": "constant-q", "q": 0.6}}),
        ("lowerbound", {"command": "lowerbound", "n": 36,
                        "p": {"family": "constant-q", "q": 0.75},
                        "replicas": 60, "threshold": 0.2}),
        ("spatial", {"command": "spatial", "n": 20,
                     "p": {"family": "constant-q", "q": 0.75}, "ell": 2,
                     "eta": {"left": [1]}, "eta_bar": {"left": [3]},
                     "rs": [2, 4, 6, 8]}),
    ]
    for name, obj in runs:
        cfg = write_config(tmp_path, f"{name}.json", obj)
        code = main(["--config", cfg, "--out", str(tmp_path / name)])
        assert code == 0, name
        rec = json.loads((tmp_path / name / "result.json").read_text())
        assert rec["verdict"]["passed"], (name, rec["verdict"])


def test_generate_instance_roundtrip(tmp_path):
    path = str(tmp_path / "inst.txt")
    generate_instance("random-eps", 6, 0.5, 7, path)
    p = BiasMatrix.from_text(open(path).read())
    assert p.epsilon >= 0.5
    generate_instance("constant-q", 4, 0.5, 0, str(tmp_path / "c.txt"))
    pc = BiasMatrix.from_text(open(tmp_path / "c.txt").read())
    assert pc.get(1, 2) == pytest.approx(0.6)
    generate_instance("totally-asymmetric", 4, None, 0, str(tmp_path / "t.txt"))
    assert math.isinf(BiasMatrix.from_text(open(tmp_path / "t.txt").read()).epsilon)
    generate_instance("monotone-eps", 5, 0.5, 3, str(tmp_path / "m.txt"))
    pm = BiasMatrix.from_text(open(tmp_path / "m.txt").read())
    assert pm.is_monotone() and pm.epsilon >= 0.5
    with pytest.raises(ContractError):
        generate_instance("random-eps", 4, -0.5, 0, str(tmp_path / "x.txt"))


def test_instance_file_config(tmp_path):
    inst = str(tmp_path / "inst.txt")
    generate_instance("random-eps", 5, 0.5, 11, inst)
    cfg = write_config(tmp_path, "f.json", {
        "command": "exact", "n": 5, "p": {"file": inst}})
    assert main(["--config", cfg, "--out", str(tmp_path / "f")]) == 0


def test_failed_verdict_exit_status(tmp_path):
    # an impossible threshold forces a failing verdict and exit status 1
    cfg = write_config(tmp_path, "fail.json", {
        "command": "lowerbound", "n": 36,
        "p": {"family": "constant-q", "q": 0.75},
        "replicas": 40, "eta": 0.999, "threshold": 0.0})
    code = main(["--config", cfg, "--out", str(tmp_path / "fail")])
    rec = json.loads((tmp_path / "fail" / "result.json").read_text())
    if rec["verdict"]["passed"]:
        assert code == 0
    else:
        assert code == 1
