import json

import pytest

from sedicow.cli import main, parse_value, read_config


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_no_args_prints_usage(capsys):
    code, _, err = run([], capsys)
    assert code == 2 and "usage" in err


def test_unknown_subcommand_and_flag_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["check-grads", "--bogus"])
    assert info.value.code == 2


def test_score_msce(tmp_path, capsys):
    (tmp_path / "a.json").write_text("[3, 2]")
    (tmp_path / "b.json").write_text("[2, 2]")
    code, out, _ = run(["score", "msce", "--ref", str(tmp_path / "a.json"),
                        "--hyp", str(tmp_path / "b.json")], capsys)
    assert code == 0 and out.strip() == "0.5"


def test_score_tcpwer_writes_report(tmp_path, capsys):
    ref = [{"speaker": "A", "start_time": 0, "end_time": 2, "words": "a b"}]
    hyp = [{"speaker": "z", "start_time": 0, "end_time": 2, "words": "a c"}]
    (tmp_path / "r.json").write_text(json.dumps(ref))
    (tmp_path / "h.json").write_text(json.dumps(hyp))
    code, out, _ = run(["score", "tcpwer", "--ref", str(tmp_path / "r.json"), "--hyp",
                        str(tmp_path / "h.json"), "--output", str(tmp_path / "rep.json")], capsys)
    assert code == 0
    report = json.loads((tmp_path / "rep.json").read_text())
    assert report["micro_average"] == 0.5


def test_score_der_from_rttm(tmp_path, capsys):
    (tmp_path / "r.rttm").write_text("SPEAKER rec 1 0.00 10.00 <NA> <NA> A <NA> <NA>\n")
    (tmp_path / "h.rttm").write_text(
        "SPEAKER rec 1 0.00 4.00 <NA> <NA> x <NA> <NA>\n"
        "SPEAKER rec 1 5.00 5.00 <NA> <NA> x <NA> <NA>\n"
    )
    code, _, _ = run(["score", "der", "--ref", str(tmp_path / "r.rttm"), "--hyp", str(tmp_path / "h.rttm"),
                      "--output", str(tmp_path / "d.json")], capsys)
    assert code == 0
    report = json.loads((tmp_path / "d.json").read_text())
    assert abs(report["per_recording"][0]["rate"] - 0.1) < 1e-9


def test_check_grads_tiny(capsys):
    code, out, _ = run(["check-grads", "--layers", "1", "--d-model", "8", "--heads", "2",
                        "--frames", "4", "--window", "3"], capsys)
    assert code == 0 and out.startswith("max relative error")


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nbase_lr = 0.001\ndata.overlap_range = [1.0, 1.0]\nspec_augment = false\nname_like = abc\n")
    flat = read_config(cfg)
    assert flat == {"base_lr": 0.001, "data.overlap_range": [1.0, 1.0], "spec_augment": False, "name_like": "abc"}
    assert parse_value(" true ") is True and parse_value("3") == 3
    (tmp_path / "bad.cfg").write_text("just words\n")
    with pytest.raises(ValueError):
        read_config(tmp_path / "bad.cfg")


def test_train_eval_sweep_synth_round_trip(tmp_path, capsys):
    common = ["--set", "model.d_model=16", "--set", "model.heads=2", "--set", "model.ff_dim=16",
              "--set", "model.fusion_hidden=16", "--set", "model.enroll_window=20",
              "--set", "data.enroll_frames=40", "--set", "data.segment_frames=20",
              "--set", "eval_samples=4", "--set", "batch_size=2"]
    run_dir = tmp_path / "run"
    code, _, _ = run(["train", "--output-dir", str(run_dir), "--quiet", "--set", "total_steps=2",
                      "--set", "warmup_steps=1", "--set", "eval_every=0"] + common, capsys)
    assert code == 0
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert set(manifest["files"]) == {"checkpoint.json", "train_log.jsonl"}
    ckpt = str(run_dir / "checkpoint.json")
    code, out, _ = run(["eval", "--checkpoint", ckpt, "--output-dir", str(tmp_path / "ev")] + common, capsys)
    assert code == 0 and "accuracy" in json.loads(out)
    code, out, _ = run(["sweep", "--checkpoint", ckpt, "--output-dir", str(tmp_path / "sw")] + common, capsys)
    assert code == 0 and out.startswith("composition")
    code, out, _ = run(["synth", "--count", "2", "--output-dir", str(tmp_path / "ds")] + common, capsys)
    assert code == 0 and (tmp_path / "ds" / "manifest.json").exists()


def test_bad_override_reports_error(capsys):
    code, _, err = run(["train", "--set", "no_such_key=1"], capsys)
    assert code == 1 and "no_such_key" in err
