import subprocess
import sys

import numpy as np
import pytest
import yaml

from snnpart.cli import cli
from snnpart.graph import Dense, NetworkGraph, NeuronParams, add_input, add_population, add_projection
from snnpart.io import load_plan, parse_key_values, read_events, read_tensor, save_network, write_tensor
from snnpart.models import mnist_network


@pytest.fixture
def mnist_yaml(tmp_path):
    path = tmp_path / "net.yaml"
    save_network(path, mnist_network(seed=1), sidecar=True)
    return path


def _compile(tmp_path, net, *extra):
    plan = tmp_path / "plan.yaml"
    assert cli(["compile", str(net), "-o", str(plan), "--sidecar", *extra]) == 0
    return plan


def test_compile_mnist_five_executions(tmp_path, mnist_yaml, capsys):
    (tmp_path / "chip.yaml").write_text("chip:\n  neuron_circuits: 512\n")
    plan = _compile(tmp_path, mnist_yaml, "--chip", str(tmp_path / "chip.yaml"), "--round-to-power-of-two")
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "executions 5"
    assert [e.id for e in load_plan(plan).executions] == ["p1.0", "p1.1", "p1.2", "p1.3", "p2"]


def test_compile_section_in_config(tmp_path, mnist_yaml):
    cfg = yaml.safe_load(mnist_yaml.read_text())
    cfg["compile"] = {"split_factors": {"p1": 6}, "emulate": ["p1"]}
    mnist_yaml.write_text(yaml.safe_dump(cfg))
    plan = load_plan(_compile(tmp_path, mnist_yaml))
    assert len(plan.executions) == 7
    assert plan.execution("p1.0").backend.value == "emulated"


def test_estimate_prints_hardware_minimum(tmp_path, mnist_yaml, capsys):
    plan = _compile(tmp_path, mnist_yaml, "--round-to-power-of-two")
    capsys.readouterr()
    assert cli(["estimate", str(plan), "--chips", "1", "--batch", "100"]) == 0
    lines = parse_key_values(capsys.readouterr().out)
    assert lines["hardware_minimum_ms"] == "40"
    assert cli(["estimate", str(plan), "--chips", "4"]) == 0
    assert parse_key_values(capsys.readouterr().out)["hardware_minimum_ms"] == "16"


def test_encode_and_run(tmp_path, mnist_yaml, capsys):
    plan = _compile(tmp_path, mnist_yaml, "--round-to-power-of-two")
    imgs = np.random.default_rng(0).random((3, 28, 28)).astype(np.float32)
    write_tensor(tmp_path / "imgs.cspt", imgs)
    ev = tmp_path / "in.events"
    assert cli(["encode", str(tmp_path / "imgs.cspt"), "-o", str(ev)]) == 0
    assert read_events(ev).batch_size == 3
    out = tmp_path / "run"
    assert cli(["run", str(plan), "--inputs", f"x={ev}", "--out", str(out), "--mode", "partitioned"]) == 0
    timing = parse_key_values((out / "timing.txt").read_text())
    assert float(timing["total_ms"]) >= 0
    assert read_tensor(out / "p2.traces.cspt").shape == (3, 30, 10)
    manifest = yaml.safe_load((out / "manifest.yaml").read_text())
    assert "x" in manifest["input_hashes"] and "p2.events" in manifest["outputs"]
    assert (out / "executions" / "p1.3.traces.cspt").exists()
    ref = tmp_path / "ref"
    assert cli(["run", str(plan), "--inputs", f"x={ev}", "--out", str(ref), "--mode", "reference"]) == 0
    assert np.array_equal(read_tensor(ref / "p2.traces.cspt"), read_tensor(out / "p2.traces.cspt"))


def test_train_smoke(tmp_path, capsys):
    rng = np.random.default_rng(0)
    g = NetworkGraph()
    x = add_input(g, 16, "x")
    h = add_population(g, 12, NeuronParams.lif(tau_mem=6.0, tau_syn=5.0))
    o = add_population(g, 2, NeuronParams.li(tau_mem=6.0, tau_syn=5.0))
    add_projection(g, x, h, Dense(), rng.normal(0.1, 0.2, (16, 12)))
    add_projection(g, h, o, Dense(), rng.normal(0.0, 0.2, (12, 2)))
    save_network(tmp_path / "net.yaml", g)
    cfg = yaml.safe_load((tmp_path / "net.yaml").read_text())
    cfg["emulator"] = {"duration": 20.0}
    cfg["train"] = {"dropout_p": 0.0}
    (tmp_path / "net.yaml").write_text(yaml.safe_dump(cfg))
    labels = rng.integers(0, 2, 40)
    imgs = rng.uniform(0, 0.3, (40, 4, 4))
    imgs[labels == 1, :2] += 0.6
    imgs[labels == 0, 2:] += 0.6
    write_tensor(tmp_path / "x.cspt", imgs)
    (tmp_path / "y.txt").write_text("\n".join(map(str, labels)))
    out = tmp_path / "train"
    args = ["train", str(tmp_path / "net.yaml"), "--images", str(tmp_path / "x.cspt"), "--labels", str(tmp_path / "y.txt"),
            "--out", str(out), "--epochs", "2", "--batch-size", "10", "--mode", "partitioned", "--rotate", "0.5"]
    assert cli(args) == 0
    log = (out / "metrics.log").read_text().splitlines()
    assert log[0].split() == ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"]
    assert len(log) == 3 and all(len(line.split()) == 6 for line in log)
    snapshot = yaml.safe_load((out / "checkpoint" / "network.yaml").read_text())
    assert snapshot["train"]["epochs"] == 2
    assert (out / "checkpoint" / "s1.cspt").exists()


def _write(tmp_path, g, name="net.yaml"):
    save_network(tmp_path / name, g)
    return str(tmp_path / name)


def test_validate_clean(tmp_path, mnist_yaml, capsys):
    assert cli(["validate", str(mnist_yaml)]) == 0
    assert capsys.readouterr().out.strip() == "clean"


def test_validate_oversize_recurrent(tmp_path, capsys):
    g = NetworkGraph()
    x = add_input(g, 300, "x")
    a = add_population(g, 400, NeuronParams.lif())
    add_projection(g, x, a, Dense(), np.zeros((300, 400)))
    add_projection(g, a, a, Dense(), np.zeros((400, 400)))
    assert cli(["validate", _write(tmp_path, g)]) == 1
    assert "needs" in capsys.readouterr().out


def test_validate_recurrence_across_executions(tmp_path, capsys):
    g = NetworkGraph()
    a = add_population(g, 4, NeuronParams.lif(), execution="e1")
    b = add_population(g, 4, NeuronParams.lif(), execution="e2")
    add_projection(g, a, b, Dense(), np.zeros((4, 4)), execution="e2")
    add_projection(g, b, a, Dense(), np.zeros((4, 4)), execution="e1")
    assert cli(["validate", _write(tmp_path, g)]) == 1
    assert capsys.readouterr().out.strip()


def test_exit_codes(tmp_path, capsys):
    assert cli(["compile", "net.yaml", "--bogus"]) == 64
    assert "usage" in capsys.readouterr().err
    assert cli([]) == 64
    assert cli(["validate", str(tmp_path / "missing.yaml")]) == 2
    (tmp_path / "bad.yaml").write_text("a: [1, 2\n")
    assert cli(["validate", str(tmp_path / "bad.yaml")]) == 2
    assert cli(["--help"]) == 0


def test_compile_unplaceable_exits_1(tmp_path):
    g = NetworkGraph()
    x = add_input(g, 9000, "x")
    p = add_population(g, 2, NeuronParams.lif())
    add_projection(g, x, p, Dense(), np.zeros((9000, 2)))
    assert cli(["compile", _write(tmp_path, g), "-o", str(tmp_path / "p.yaml"), "--sidecar"]) == 1


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "snnpart.cli", "validate"], capture_output=True, text=True)
    assert res.returncode == 64
