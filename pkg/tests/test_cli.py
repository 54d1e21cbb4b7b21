import numpy as np
import pytest

from cli import EXIT_DIVERGED, EXIT_ERROR, EXIT_OK, EXIT_SHAPE, EXIT_USAGE, SEED_ENV, build_parser, main, resolve
from rrcnn_core import Architecture, ModelParams, init_params, save_weights


@pytest.fixture
def small_dataset(tmp_path):
    out = tmp_path / "t12"
    assert main(["gen", "--table", "T12", "--n", "64", "--out-dir", str(out)]) == EXIT_OK
    return out


def test_gen_writes_records(tmp_path, small_dataset):
    assert len(list(small_dataset.glob("record_*.csv"))) == 64
    assert (small_dataset / "manifest.txt").exists()
    assert (small_dataset / "resolved_config.txt").exists()
    again = tmp_path / "again"
    main(["gen", "--table", "T12", "--n", "64", "--out-dir", str(again)])
    for name in ("manifest.txt", "record_00000.csv", "record_00063.csv"):
        assert (small_dataset / name).read_bytes() == (again / name).read_bytes()


def test_gen_rejects_unknown_table(tmp_path):
    assert main(["gen", "--table", "T99", "--out-dir", str(tmp_path)]) == EXIT_USAGE
    assert main(["gen", "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_train_rejects_zero_epochs(tmp_path, small_dataset):
    code = main(["train", "--dataset", str(small_dataset), "--model", str(tmp_path / "m.bin"), "--epochs", "0"])
    assert code == EXIT_USAGE


def _train_args(dataset, model, *extra):
    return ["train", "--dataset", str(dataset), "--model", str(model), "--blocks", "2", "--recursions", "1",
            "--k1", "5", "--k2", "5", "--epochs", "2", "--lr", "1e-5", *extra]


def test_train_and_resume(tmp_path, small_dataset, capsys):
    model = tmp_path / "m.bin"
    assert main(_train_args(small_dataset, model)) == EXIT_OK
    for suffix in ("", ".txt", ".history.csv", ".filters.csv"):
        assert (tmp_path / ("m.bin" + suffix)).exists()
    assert "trained 2 epoch(s)" in capsys.readouterr().out
    resumed = tmp_path / "resumed.bin"
    assert main(_train_args(small_dataset, resumed, "--resume", str(model))) == EXIT_OK
    rows = (tmp_path / "resumed.bin.history.csv").read_text().splitlines()[1:]
    assert [int(row.split(",")[0]) for row in rows] == [0, 1, 2, 3, 4]


def test_train_block_count_must_match_labels(tmp_path, small_dataset):
    args = _train_args(small_dataset, tmp_path / "m.bin")
    args[args.index("--blocks") + 1] = "1"
    assert main(args) == EXIT_SHAPE


def test_train_ortho_loss_end_to_end(tmp_path, small_dataset):
    args = _train_args(small_dataset, tmp_path / "m.bin", "--loss", "ortho_constrained", "--omega2", "1:2")
    assert main(args) == EXIT_OK


def test_decompose_zero_signal(tmp_path, capsys):
    signal = tmp_path / "zero.csv"
    np.savetxt(signal, np.zeros(64))
    assert main(["decompose", "--input", str(signal), "--out-dir", str(tmp_path / "out")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "0 component(s)" in out and "reconstruction max error 0.000e+00" in out
    header = (tmp_path / "out" / "components.csv").read_text().splitlines()[0]
    assert header == "t,residue"


def test_decompose_with_model(tmp_path, capsys):
    t = np.linspace(0, 6, 128)
    signal = tmp_path / "x.csv"
    np.savetxt(signal, np.column_stack([t, np.cos(5 * np.pi * t) + np.cos(6.8 * np.pi * t)]), delimiter=",",
               header="t,value", comments="")
    save_weights(tmp_path / "m.bin", init_params(Architecture(blocks=2, k1=5, k2=5), seed=0))
    code = main(["decompose", "--input", str(signal), "--out-dir", str(tmp_path / "out"),
                 "--model", str(tmp_path / "m.bin")])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("rrcnn: 2 component(s)")
    assert "reconstruction max error" in out
    table = np.loadtxt(tmp_path / "out" / "components.csv", delimiter=",", skiprows=1)
    assert table.shape == (128, 4)


def test_decompose_rejects_mismatched_ortho(tmp_path):
    signal = tmp_path / "x.csv"
    np.savetxt(signal, np.sin(np.linspace(0, 9, 64)))
    params = init_params(Architecture(blocks=2, k1=5, k2=5), seed=0)
    save_weights(tmp_path / "m.bin", ModelParams(params.blocks, np.eye(32), (0, 1)))
    code = main(["decompose", "--input", str(signal), "--out-dir", str(tmp_path / "out"),
                 "--model", str(tmp_path / "m.bin")])
    assert code == EXIT_SHAPE


def test_decompose_method_resolution(tmp_path, capsys):
    signal = tmp_path / "x.csv"
    np.savetxt(signal, np.cos(np.linspace(0, 40, 256)))
    out = str(tmp_path / "out")
    assert main(["decompose", "--input", str(signal), "--out-dir", out]) == EXIT_OK
    assert capsys.readouterr().out.startswith("if: ")
    assert main(["decompose", "--input", str(signal), "--out-dir", out, "--method", "csa"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("csa: 1 component(s)")
    assert main(["decompose", "--input", str(signal), "--out-dir", out, "--method", "rrcnn"]) == EXIT_SHAPE
    assert main(["decompose", "--input", str(signal), "--out-dir", out, "--method", "emd"]) == EXIT_USAGE


def test_eval_without_model(tmp_path):
    code = main(["eval", "--example", "E1", "--methods", "rrcnn", "--out-dir", str(tmp_path)])
    assert code == EXIT_SHAPE


def test_eval_if_on_orthogonal_pair(tmp_path):
    code = main(["eval", "--example", "E8", "--methods", "if", "--n", "512", "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    assert (tmp_path / "metrics_E8.csv").exists()
    assert main(["eval", "--example", "E8", "--methods", "svd", "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_gradcheck_passes_by_default(tmp_path, capsys):
    assert main(["gradcheck", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert capsys.readouterr().out.startswith("PASS")


def test_gradcheck_reports_injected_fault(tmp_path, capsys):
    assert main(["gradcheck", "--fault", "3", "--out-dir", str(tmp_path)]) == EXIT_ERROR
    out = capsys.readouterr().out
    assert out.startswith("FAIL") and "block0.rec0.w1[3]" in out


def test_gradcheck_ortho_loss(tmp_path):
    args = ["gradcheck", "--n", "16", "--loss", "ortho_constrained", "--omega2", "1:2", "--out-dir", str(tmp_path)]
    assert main(args) == EXIT_OK


@pytest.mark.parametrize("flag, value", [("--eps", "1e-3"), ("--n", "512"), ("--n", "4")])
def test_gradcheck_usage_limits(tmp_path, flag, value):
    assert main(["gradcheck", flag, value, "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_bench_rejects_zero_copies(tmp_path):
    assert main(["bench", "--copies", "0", "--out", str(tmp_path / "b.csv")]) == EXIT_USAGE


def test_bench_writes_table(tmp_path):
    out = tmp_path / "b.csv"
    code = main(["bench", "--copies", "1,3", "--threads", "1,2", "--n", "64", "--repeats", "1", "--out", str(out)])
    assert code == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "copies,threads,seconds"
    assert [line.split(",")[:2] for line in lines[1:]] == [["1", "1"], ["1", "2"], ["3", "1"], ["3", "2"]]


def test_config_precedence(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("n = 128\n[gen]\nseed = 1\nratio = 0.5\n")
    parser = build_parser()
    base = ["gen", "--table", "T12", "--out-dir", "x", "--config", str(config)]
    cfg = resolve("gen", parser.parse_args(base), environ={})
    assert (cfg["seed"], cfg["ratio"], cfg["n"]) == (1, 0.5, 128)
    cfg = resolve("gen", parser.parse_args(base), environ={SEED_ENV: "2"})
    assert cfg["seed"] == 2
    cfg = resolve("gen", parser.parse_args(base + ["--seed", "3"]), environ={SEED_ENV: "2"})
    assert cfg["seed"] == 3


def test_config_rejects_unknown_keys(tmp_path):
    config = tmp_path / "run.cfg"
    config.write_text("[gen]\nlearning_rate = 1\n")
    assert main(["gen", "--table", "T12", "--out-dir", str(tmp_path), "--config", str(config)]) == EXIT_USAGE
    config.write_text("[plot]\nn = 1\n")
    assert main(["gen", "--table", "T12", "--out-dir", str(tmp_path), "--config", str(config)]) == EXIT_USAGE


def test_help_and_bad_command():
    assert main(["--help"]) == EXIT_OK
    assert main(["frobnicate"]) == EXIT_USAGE
    assert EXIT_DIVERGED == 3
