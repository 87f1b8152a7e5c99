import json
import queue
import re
import socket
import threading

import pytest

from adapter_protocol import StubGenerator
from main import cli_main


@pytest.fixture
def doc_path(experiment_doc, tmp_path):
    def write(**changes):
        doc = json.loads(json.dumps(experiment_doc))
        for path, value in changes.items():
            section, _, key = path.partition("__")
            if value is None:
                doc[section].pop(key)
            else:
                doc[section][key] = value
        p = tmp_path / "experiment.json"
        p.write_text(json.dumps(doc))
        return str(p)
    return write


def test_horizon_prints_critical_length(capsys):
    rc = cli_main(["horizon", "--lambda", "0.0953", "--sigma2", "0.01", "--psi", "0.2727"])
    assert rc == 0
    match = re.search(r"N\* = ([0-9.]+)", capsys.readouterr().out)
    assert float(match.group(1)) == pytest.approx(10.0, abs=0.01)


def test_horizon_matched_form_as_json(capsys):
    rc = cli_main(["horizon", "--lambda", "0.1", "--sigma2", "0.01", "--d", "8", "--success-tol", "3",
                   "--format", "json"])
    assert rc == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_star"] == pytest.approx(16.27, abs=0.01)
    assert report["crossing"] == 17


def test_horizon_needs_a_tolerance(capsys):
    assert cli_main(["horizon", "--lambda", "0.1", "--sigma2", "0.01"]) == 1
    assert "psi" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert cli_main(["horizon", "--lambda", "0.1", "--sigma2", "0.01", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_field_names_its_path(doc_path, capsys):
    rc = cli_main(["halo", "--config", doc_path(system__d=None)])
    assert rc == 1
    assert "system.d" in capsys.readouterr().err


def test_unknown_key_names_its_path(doc_path, capsys):
    rc = cli_main(["halo", "--config", doc_path(controller__gain=2.0)])
    assert rc == 1
    assert "controller.gain" in capsys.readouterr().err


def test_compare_writes_matched_seed_table(doc_path, tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli_main(["compare", "--config", doc_path(), "--out", str(out)])
    assert rc == 0
    header = (out / "open_vs_halo.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["seed_index", "seed", "open_success"]
    summary = json.loads(capsys.readouterr().out)
    assert summary["relative_step_overhead"] == pytest.approx(87 / 79)
    assert (out / "logs" / "halo.log").exists()


def test_runs_are_byte_identical(doc_path, tmp_path):
    path = doc_path()
    for name in ("a", "b"):
        assert cli_main(["compare", "--config", path, "--out", str(tmp_path / name), "--seed", "3"]) == 0
    assert (tmp_path / "a" / "open_vs_halo.csv").read_bytes() == (tmp_path / "b" / "open_vs_halo.csv").read_bytes()


def test_json_output_format(doc_path, tmp_path):
    out = tmp_path / "run"
    assert cli_main(["halo", "--config", doc_path(), "--out", str(out), "--format", "json"]) == 0
    rows = json.loads((out / "halo_seeds.json").read_text())
    assert len(rows) == 8


def test_stub_rejects_non_numeric_series(capsys):
    assert cli_main(["serve-adapter-stub", "--entropies", "1,x"]) == 1


def test_halo_against_external_stub(doc_path, tmp_path, capsys):
    ports = queue.Queue()
    stub = StubGenerator([1.0, 1.0, 4.0, 4.0])
    worker = threading.Thread(target=stub.serve_tcp, kwargs={"port": 0, "ready": ports.put}, daemon=True)
    worker.start()
    out = tmp_path / "ext"
    rc = cli_main(["halo", "--config", doc_path(), "--out", str(out),
                   "--adapter", f"tcp://127.0.0.1:{ports.get(timeout=5)}", "--timeout", "5"])
    worker.join(timeout=5)
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary == {"status": "finished", "events": 4, "resets": 1, "error": None}
    saved = json.loads((out / "external_trajectory.json").read_text())
    assert saved["anchors"] == ["anchor 1"]
    assert stub.templates_received[0].startswith("System: You are a rigorous logic verifier")
    assert stub.reinit_templates_received[0].startswith("System: You are an expert mathematician")


def test_unreachable_adapter_is_runtime_error(doc_path, tmp_path):
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    rc = cli_main(["halo", "--config", doc_path(), "--out", str(tmp_path / "x"), "--adapter",
                   f"tcp://127.0.0.1:{port}", "--timeout", "1"])
    assert rc == 2


def test_halo_sends_both_template_files(doc_path, tmp_path, capsys):
    compress = tmp_path / "compress.txt"
    compress.write_text("squeeze the verified steps")
    reinit = tmp_path / "reinit.txt"
    reinit.write_text("resume from the anchor")
    ports = queue.Queue()
    stub = StubGenerator([4.0, 4.0])
    worker = threading.Thread(target=stub.serve_tcp, kwargs={"port": 0, "ready": ports.put}, daemon=True)
    worker.start()
    rc = cli_main(["halo", "--config", doc_path(), "--out", str(tmp_path / "ext"),
                   "--adapter", f"tcp://127.0.0.1:{ports.get(timeout=5)}", "--timeout", "5",
                   "--template", str(compress), "--reinit-template", str(reinit)])
    worker.join(timeout=5)
    assert rc == 0
    assert json.loads(capsys.readouterr().out)["resets"] == 1
    assert stub.templates_received == ["squeeze the verified steps"]
    assert stub.reinit_templates_received == ["resume from the anchor"]
