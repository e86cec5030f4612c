import signal
import subprocess
import sys
import time

import pytest

from rpmfog import nn
from rpmfog.domain import DataCategory
from rpmfog.filtering import policy_from_consent, save_policy_file
from rpmfog.kws import synth_dataset, train_on_clips

RPM = [sys.executable, "-m", "rpmfog"]


def run_rpm(*args, timeout=120):
    return subprocess.run(RPM + list(args), capture_output=True, text=True, timeout=timeout)


class _NodeProc:
    def __init__(self, *args):
        self.proc = subprocess.Popen(RPM + list(args), stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        line = self.proc.stdout.readline().strip()
        assert "listening on" in line, line
        host, port = line.rsplit(" ", 1)[-1].split(":")
        self.address = f"{host}:{port}"

    def stop(self):
        self.proc.send_signal(signal.SIGINT)
        out, err = self.proc.communicate(timeout=15)
        return out, err


def test_device_exit_nonzero_when_unreachable():
    result = run_rpm("node", "--role", "device", "--upstream", "127.0.0.1:1")
    assert result.returncode == 1
    assert "device failed" in result.stderr


def test_full_node_pipeline_over_cli(tmp_path):
    clips, vocab = synth_dataset(n_classes=2, n_per_class=10, seed=1)
    model = train_on_clips(clips, len(vocab), nn.TrainConfig(epochs=1, seed=1))
    model_path = tmp_path / "model.bin"
    nn.save_model(model, model_path, labels=vocab)
    policy_path = tmp_path / "policy.txt"
    save_policy_file([policy_from_consent(1, {DataCategory.VITALS, DataCategory.KEYWORD_EVENT})], policy_path)

    cloud = _NodeProc("node", "--role", "cloud", "--fog-fronted")
    fog = None
    try:
        fog = _NodeProc(
            "node",
            "--role",
            "fog",
            "--upstream",
            cloud.address,
            "--model",
            str(model_path),
            "--policy",
            str(policy_path),
        )
        device = run_rpm(
            "node",
            "--role",
            "device",
            "--upstream",
            fog.address,
            "--patient",
            "1",
            "--period-ms",
            "50",
            "--duration-s",
            "1.5",
            timeout=30,
        )
        assert device.returncode == 0, device.stderr
        metrics = dict(line.split("=", 1) for line in device.stdout.strip().splitlines())
        assert int(metrics["frames_sent"]) >= 20
        assert float(metrics["mean_rtt_ms"]) > 0
        time.sleep(0.3)
    finally:
        fog_out = fog.stop() if fog is not None else ("", "")
        cloud_out = cloud.stop()
    assert "crc_failures=0" in fog_out[0]
    assert "frames_received=" in cloud_out[0]


def test_plot_rejects_unknown_csv(tmp_path):
    bad = tmp_path / "junk.csv"
    bad.write_text("a,b,c\n1,2,3\n")
    result = run_rpm("plot", "--in", str(bad), "--out", str(tmp_path / "x.svg"))
    assert result.returncode != 0
