import csv
import io

import pytest

from stencilnet.cli import MEMORY_COLUMNS, TIMING_COLUMNS, VERIFY_COLUMNS, main, time_trials


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, list(csv.DictReader(io.StringIO(out))), out, err


def test_bench_layer_conv(capsys):
    code, rows, out, _ = run(capsys, "bench-layer", "--layer", "conv3x3", "--shape", "48x48x16",
                             "--trials", "2", "--warmup", "1")
    assert code == 0
    assert out.splitlines()[0] == ",".join(TIMING_COLUMNS)
    (row,) = rows
    assert row["shape"] == "48x48x16" and row["trials"] == "2" and row["warmup"] == "1"
    assert 0 < float(row["min_s"]) <= float(row["median_s"])
    assert int(row["macs"]) == 48 * 48 * 16 * 9 * 16


def test_bench_layer_depthwise_single_trial(capsys):
    code, rows, _, _ = run(capsys, "bench-layer", "--layer", "dwconv3x3", "--shape", "6x6x512", "--trials", "1")
    assert code == 0 and len(rows) == 1 and rows[0]["min_s"] == rows[0]["median_s"]


def test_bench_layer_reference_kernel(capsys):
    code, rows, _, _ = run(capsys, "bench-layer", "--layer", "maxpool2x2", "--shape", "4x4x8",
                           "--kernel", "reference", "--trials", "1", "--warmup", "0")
    assert code == 0 and rows[0]["kernel"] == "reference"


def test_bench_model_sweep(capsys):
    code, rows, _, err = run(capsys, "bench-model", "--config", "dscnn", "--trials", "1", "--warmup", "0")
    assert code == 0
    assert [r["p_max"] for r in rows] == ["1", "2", "4"]
    assert sum(r["fastest"] == "yes" for r in rows) == 1
    assert "fastest" in err


def test_bench_model_bad_config(capsys):
    code, _, out, err = run(capsys, "bench-model", "--config", "/nowhere.yaml", "--trials", "1")
    assert code == 1 and out == "" and "not found" in err


def test_usage_errors_exit_one(capsys):
    assert main(["bench-layer", "--layer", "conv3x3", "--shape", "48x48"]) == 1
    assert main(["bench-model", "--config", "dscnn", "--pmax", "0"]) == 1
    assert main(["bench-layer", "--layer", "relu", "--shape", "2x2x2", "--trials", "0"]) == 1
    capsys.readouterr()


def test_report_memory(capsys):
    code, rows, out, _ = run(capsys, "report-memory", "--config", "autoencoder", "--dtype", "uint8")
    assert code == 0 and out.splitlines()[0] == ",".join(MEMORY_COLUMNS)
    fields = {r["field"]: r["value"] for r in rows}
    assert fields["params"] == "133120" and fields["accumulator_bytes"] == "4"
    assert int(fields["total_bytes"]) == 133120 + 128 + 256 + 4


@pytest.mark.parametrize("suite,extra", [("layers", ["--cases", "2"]),
                                         ("models", ["--models", "autoencoder", "dscnn"]),
                                         ("quantized", ["--cases", "1", "--models", "autoencoder"])])
def test_verify_suites(capsys, suite, extra):
    code, rows, out, _ = run(capsys, "verify", "--suite", suite, *extra)
    assert code == 0 and out.splitlines()[0] == ",".join(VERIFY_COLUMNS)
    assert rows[-1]["case"] == "total" and rows[-1]["failed"] == "0"


def test_warmup_excluded_from_timings():
    calls = []
    times = time_trials(lambda: calls.append(1), trials=4, warmup=3)
    assert len(calls) == 7 and len(times) == 4
