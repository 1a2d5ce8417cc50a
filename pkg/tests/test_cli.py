import pytest

from sgdphases.cli import (EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, OUT_ENV, ConfigError, ExperimentConfig,
                           output_dir, parse_config, parse_config_text, run_command)
from sgdphases.data import write_idx
from sgdphases.trainer import CSV_COLUMNS, ORDER_COLUMNS, read_metrics_csv

from conftest import blobs


@pytest.fixture
def idx_files(tmp_path):
    paths = {}
    for split, seed in (("train", 0), ("test", 1)):
        ds = blobs(n_per_class=20, d=16, k=3, seed=seed)
        img, lab = tmp_path / f"{split}-images", tmp_path / f"{split}-labels"
        write_idx(ds, img, lab)
        paths[split] = (img, lab)
    return paths


def _config(tmp_path, idx_files, **extra):
    (ti, tl), (vi, vl) = idx_files["train"], idx_files["test"]
    lines = [f"train_images = {ti}", f"train_labels = {tl}", f"test_images = {vi}",
             f"test_labels = {vl}", "n_classes = 3", "per_class = 0", "layer_sizes = 16, 6, 3",
             "alpha = 0.1", "batch = 10", "epochs = 1"]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    path = tmp_path / "c.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


# -- config parsing -----------------------------------------------------------------------

def test_parse_training_keys():
    cfg = parse_config_text("alpha = 0.01\nbatch = 25\n")
    tc = cfg.train_config()
    assert tc.alpha == 0.01 and tc.B == 25


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    assert parse_config(p) == ExperimentConfig()


def test_type_mismatch_names_line(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("alpha = fast\n")
    with pytest.raises(ConfigError, match=r"bad\.cfg:1: invalid value for alpha"):
        parse_config(p)


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="unknown key 'learning_rate'"):
        parse_config_text("# comment\n\nlearning_rate = 0.1\n")


def test_comments_lists_bools_and_paths():
    cfg = parse_config_text("layer_sizes = 784,50,50,10  # two hidden\nsplit_probes = no\n"
                            "train_images = bundled\n")
    assert cfg.layer_sizes == (784, 50, 50, 10)
    assert cfg.split_probes is False and cfg.train_images is None


@pytest.mark.parametrize("text, message", [
    ("rho = 1.5", "rho"),
    ("batch = 0", "B"),
    ("clean_mode = bogus", "clean_mode"),
    ("train_images = x.idx", "together"),
    ("alpha 0.1", "expected 'key = value'"),
])
def test_invalid_configs(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config_text(text)


def test_missing_data_file_rejected(tmp_path):
    cfg = parse_config_text(f"train_images = {tmp_path}/a\ntrain_labels = {tmp_path}/b\n")
    with pytest.raises(ConfigError, match="no such file"):
        cfg.validate_paths()


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = ExperimentConfig(output_dir=str(tmp_path / "cfg"))
    monkeypatch.delenv(OUT_ENV, raising=False)
    assert output_dir(cfg) == tmp_path / "cfg"
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert output_dir(cfg) == tmp_path / "env"
    assert output_dir(cfg, str(tmp_path / "flag")) == tmp_path / "flag"


# -- commands -----------------------------------------------------------------------------

def test_train_one_epoch(tmp_path, idx_files, capsys):
    cfg = _config(tmp_path, idx_files)
    out = tmp_path / "out"
    assert run_command(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 2
    assert (out / "final.w").is_file()
    assert "epochs=1" in capsys.readouterr().out


def test_env_var_sets_output(tmp_path, idx_files, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "from_env"))
    assert run_command(["train", "--config", str(_config(tmp_path, idx_files))]) == EXIT_OK
    assert (tmp_path / "from_env" / "metrics.csv").is_file()


def test_rerun_is_byte_identical(tmp_path, idx_files):
    cfg = _config(tmp_path, idx_files, epochs=4, rho=0.3, probe_every=2, probe_M=15,
                  snapshot_every=2, spectrum_every=4, spectrum_M=12)
    bodies = []
    for name in ("a", "b"):
        assert run_command(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == EXIT_OK
        bodies.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).glob("*.csv"))})
    assert bodies[0] == bodies[1]
    assert {"metrics.csv", "snapshots.csv", "spectrum_epoch_00004.csv"} <= set(bodies[0])


def test_probe_and_spectrum_from_checkpoint(tmp_path, idx_files, capsys):
    cfg = _config(tmp_path, idx_files, rho=0.3, probe_M=20, spectrum_M=15)
    out = tmp_path / "out"
    assert run_command(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    ckpt = str(out / "final.w")
    assert run_command(["probe", "--config", str(cfg), "--out", str(out), "--checkpoint", ckpt]) == EXIT_OK
    rows = read_metrics_csv(out / "probe.csv")
    assert len(rows) == 1 and set(ORDER_COLUMNS) <= set(rows[0]) and rows[0]["R_cw"] != ""
    assert run_command(["spectrum", "--config", str(cfg), "--out", str(out),
                        "--checkpoint", ckpt]) == EXIT_OK
    header = (out / "spectrum.csv").read_text().splitlines()[0]
    assert header == "rank,eigenvalue,cum_fraction"
    assert "D_s=" in capsys.readouterr().out


def test_clean_command(tmp_path, idx_files):
    cfg = _config(tmp_path, idx_files, rho=0.3, epochs=12, snapshot_every=2)
    out = tmp_path / "out"
    assert run_command(["clean", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    report = dict(line.split("=", 1) for line in (out / "clean_report.txt").read_text().splitlines())
    assert {"t_c", "l_c", "Q", "precision", "a_n", "a_c", "a_p"} <= set(report)
    assert (out / "removed.csv").read_text().startswith("sample\n")
    assert (out / "clean_accuracy.csv").read_text().startswith("epoch,a_n,a_c,a_p\n")


def test_keys_lists_every_field(capsys):
    assert run_command(["keys"]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "alpha = 0.01" in printed and "train_images = bundled" in printed


# -- exit codes ---------------------------------------------------------------------------

def test_unknown_subcommand_is_usage_error(capsys):
    assert run_command(["bogus"]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_missing_subcommand(capsys):
    assert run_command([]) == EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_probe_without_checkpoint(tmp_path, idx_files, capsys):
    cfg = _config(tmp_path, idx_files)
    assert run_command(["probe", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "--checkpoint" in capsys.readouterr().err


def test_bad_config_is_usage_error(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("alpha = fast\n")
    assert run_command(["train", "--config", str(p), "--out", str(tmp_path)]) == EXIT_USAGE
    assert ":1:" in capsys.readouterr().err


def test_unknown_figure(tmp_path, capsys):
    assert run_command(["figures", "fig9", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "fig9" in capsys.readouterr().err


def test_corrupt_data_is_runtime_error(tmp_path, idx_files, capsys):
    img, _ = idx_files["train"]
    img.write_bytes(b"\x00\x00\x00\x00garbage")
    assert run_command(["train", "--config", str(_config(tmp_path, idx_files)),
                        "--out", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "IDX" in capsys.readouterr().err


def test_layer_mismatch_is_runtime_error(tmp_path, idx_files):
    cfg = _config(tmp_path, idx_files)
    cfg.write_text(cfg.read_text().replace("layer_sizes = 16, 6, 3", "layer_sizes = 20, 6, 3"))
    assert run_command(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_figures_fig1(tmp_path):
    assert run_command(["figures", "fig1", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "fig1.gp").is_file()
    rows = read_metrics_csv(tmp_path / "fig1_metrics.csv")
    R = [float(r["R"]) for r in rows if r["R"] != ""]
    assert R[0] > 0.05 and min(R) < 0.05
