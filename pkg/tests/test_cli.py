import io
import json

import pytest

from gridlm.checkpoint import read_header
from gridlm.cli import DATASET_FILES, HELDOUT_FILES, build_parser, main, render_grid_ansi
from gridlm.codec import ImageGrid
from gridlm.data import read_header as read_data_header


TINY = {
    "model": {
        "d_model": 32,
        "n_layers_backbone": 2,
        "n_layers_adapter": 1,
        "n_heads": 2,
        "max_seq_len": 160,
        "grid_k": 8,
    },
    "plan": {
        "mix": {"t2t": 4, "ti2t": 4, "t2i": 4, "t2ti": 4},
        "epochs": 1,
        "batch_size": 4,
    },
}


def _write_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_gen_data_writes_every_file(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--data-dir", str(data), "--n", "3"]) == 0
    for stem, _, _, _ in DATASET_FILES + HELDOUT_FILES:
        path = data / f"{stem}.jsonl"
        lines = path.read_text().splitlines()
        assert len(lines) == 4, stem  # header + 3 records
    header = read_data_header(data / "pretrain.t2t.jsonl")
    assert header["version"] == 1
    assert "resolved-config gen-data" in capsys.readouterr().out


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["gen-data", "--data-dir", str(a), "--n", "3"])
    main(["gen-data", "--data-dir", str(b), "--n", "3"])
    for stem, _, _, _ in DATASET_FILES:
        assert (a / f"{stem}.jsonl").read_bytes() == (b / f"{stem}.jsonl").read_bytes()


def test_gen_data_n_zero_keeps_headers(tmp_path):
    data = tmp_path / "data"
    main(["gen-data", "--data-dir", str(data), "--n", "0"])
    lines = (data / "stage2.t2i.jsonl").read_text().splitlines()
    assert len(lines) == 1


def test_data_dir_env_var(tmp_path, monkeypatch):
    data = tmp_path / "fromenv"
    monkeypatch.setenv("GRIDLM_DATA_DIR", str(data))
    assert main(["gen-data", "--n", "2"]) == 0
    assert (data / "heldout.t2t.jsonl").exists()


def test_missing_dataset_is_reported(tmp_path, capsys):
    rc = main(["pretrain", "--data-dir", str(tmp_path / "nothing")])
    assert rc == 1
    assert "gen-data" in capsys.readouterr().err


def test_render_grid_ansi():
    grid = ImageGrid.from_rows([[0, 1], [7, 4]])
    text = render_grid_ansi(grid)
    rows = text.split("\n")
    assert len(rows) == 2
    assert "\x1b[48;5;1m" in rows[0]
    assert rows[0].endswith("\x1b[0m")


def test_pipeline_smoke(tmp_path, capsys, monkeypatch):
    """gen-data through eval/ablate/chat on a tiny model and corpus."""
    data = str(tmp_path / "data")
    cfg = _write_config(tmp_path)
    base = str(tmp_path / "base.ckpt")
    s1 = str(tmp_path / "s1.ckpt")

    assert main(["gen-data", "--data-dir", data, "--n", "8"]) == 0
    assert main(["pretrain", "--data-dir", data, "--config", cfg,
                 "--epochs", "1", "--out", base]) == 0
    out = capsys.readouterr().out
    assert "resolved-config pretrain" in out
    assert (tmp_path / "base.loss.csv").exists()
    meta = read_header(base)["meta"]
    assert "baseline_heldout_t2t_acc" in meta

    assert main(["train-stage", "--stage", "1", "--data-dir", data, "--config", cfg,
                 "--ckpt", base, "--out", s1]) == 0
    assert (tmp_path / "s1.loss.csv").exists()
    out = capsys.readouterr().out
    assert "stage1 done" in out

    ret_csv = tmp_path / "retention.csv"
    assert main(["eval", "--kind", "retention", "--data-dir", data, "--ckpt", s1,
                 "--baseline-ckpt", base, "--out", str(ret_csv)]) == 0
    lines = ret_csv.read_text().splitlines()
    assert lines[0] == "baseline_acc,post_acc,ratio,n"
    assert len(lines) == 2

    assert main(["eval", "--kind", "modality", "--data-dir", data, "--ckpt", s1]) == 0
    assert main(["eval", "--kind", "generation", "--data-dir", data, "--ckpt", base]) == 0
    out = capsys.readouterr().out
    assert "modality choice" in out and "generation:" in out

    joint = str(tmp_path / "joint.ckpt")
    assert main(["train-joint", "--data-dir", data, "--config", cfg,
                 "--ckpt", base, "--epochs", "1", "--out", joint]) == 0
    assert read_header(joint)["meta"]["plan"]["stage"] == "joint"

    abl = tmp_path / "ablation"
    assert main(["ablate", "--data-dir", data, "--config", cfg, "--n", "8",
                 "--seeds", "1", "--epochs", "1", "--out", str(abl)]) == 0
    assert (abl / "summary.txt").exists()
    assert (abl / "ablation.seed0.csv").exists()

    monkeypatch.setattr("sys.stdin", io.StringIO("add 3 5\n\n"))
    assert main(["chat", "--ckpt", base, "--max-new", "4", "--trace"]) == 0
    out = capsys.readouterr().out
    assert "chat ready" in out
    assert "token,mode" in out


def test_eval_retention_without_baseline_fails(tmp_path, capsys):
    data = str(tmp_path / "data")
    cfg = _write_config(tmp_path)
    base = str(tmp_path / "base.ckpt")
    main(["gen-data", "--data-dir", data, "--n", "4"])
    main(["pretrain", "--data-dir", data, "--config", cfg, "--epochs", "0", "--out", base])
    rc = main(["eval", "--kind", "retention", "--data-dir", data, "--ckpt", base])
    assert rc == 1
    assert "baseline" in capsys.readouterr().err
