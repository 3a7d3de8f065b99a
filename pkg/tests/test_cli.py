"""Tests for the command-line surface and its exit codes."""

from __future__ import annotations

import json
import subprocess
from collections.abc import Callable
from pathlib import Path

from edgecnn.checkpoint import checkpoint_from_model, save_checkpoint
from edgecnn.lgc import condense
from edgecnn.model import Model

CliRunner = Callable[..., subprocess.CompletedProcess[str]]

TINY = ("--blocks", "1,1,1", "--quiet")


def _history(stdout: str) -> list[dict[str, str]]:
    rows: list[dict[str, str]] = json.loads(stdout)["history"]
    return [{k: v for k, v in row.items() if k != "wall_seconds"} for row in rows]


def test_trace_prints_one_row_per_architecture_stage(cli_runner: CliRunner) -> None:
    result = cli_runner("trace", "--arch", "edgecnn")

    assert result.returncode == 0
    lines = result.stdout.splitlines()
    assert len(lines) == 8
    assert lines[0].split()[0] == "convolution"
    assert lines[0].endswith("44x44x32")
    assert lines[-1].endswith("1x1x152")


def test_trace_json_reports_grouped_operators(cli_runner: CliRunner) -> None:
    result = cli_runner("trace", "--arch", "edgecnn-g", "--format", "json")

    rows = json.loads(result.stdout)
    assert result.returncode == 0
    assert rows[2] == {"name": "edgeblock1", "operator": "EdgeBlock-G x4", "shape": "22x22x64"}


def test_profile_json_reports_exact_counts(cli_runner: CliRunner) -> None:
    result = cli_runner("profile", "--arch", "edgecnn", "--format", "json", "--quiet")

    report = json.loads(result.stdout)
    assert result.returncode == 0
    assert report["params_total"] == 418_551
    assert report["macs_total"] == 48_827_432
    assert report["activation_peak_bytes"] == 495_616


def test_profile_counts_grouped_model_as_condensed_by_default(cli_runner: CliRunner) -> None:
    condensed = json.loads(cli_runner("profile", "--arch", "edgecnn-g", "--format", "json").stdout)
    training = json.loads(
        cli_runner(
            "profile", "--arch", "edgecnn-g", "--format", "json", "--no-assume-condensed"
        ).stdout
    )

    assert condensed["macs_total"] == 12_714_824
    assert condensed["condensed"] is True
    assert training["macs_total"] == 48_827_432


def test_usage_errors_exit_with_code_one(cli_runner: CliRunner) -> None:
    for args in (
        (),
        ("profile", "--runs", "-1"),
        ("train", "--epochs", "0"),
        ("trace", "--arch", "resnet"),
        ("eval",),
        ("train", "--dataset", "fer2013"),
    ):
        result = cli_runner(*args)
        assert result.returncode == 1, args
        assert result.stderr.startswith("error:"), args


def test_missing_inputs_exit_with_code_two(cli_runner: CliRunner, tmp_path: Path) -> None:
    absent = tmp_path / "absent"

    for args in (
        ("eval", "--checkpoint", str(absent)),
        ("profile", "--checkpoint", str(absent)),
        ("train", "--dataset", "rafdb", "--data-dir", str(absent)),
    ):
        result = cli_runner(*args)
        assert result.returncode == 2, args
        assert "does not exist" in result.stderr


def test_corrupt_checkpoint_exits_with_code_two(cli_runner: CliRunner, tmp_path: Path) -> None:
    path = tmp_path / "bad.ecnw"
    path.write_bytes(b"ECNW" + bytes(20))

    result = cli_runner("profile", "--checkpoint", str(path))

    assert result.returncode == 2
    assert "unsupported format version 0" in result.stderr


def test_exporting_dense_checkpoint_exits_with_code_three(
    cli_runner: CliRunner, tiny_model: Model, tmp_path: Path
) -> None:
    source = save_checkpoint(checkpoint_from_model(tiny_model), tmp_path / "dense.ecnw")

    result = cli_runner(
        "export", "--checkpoint", str(source), "--out", str(tmp_path / "g.ecnw"), "--grouped"
    )

    assert result.returncode == 3
    assert "only edgecnn-g checkpoints can be exported" in result.stderr


def test_export_then_profile_grouped_checkpoint(
    cli_runner: CliRunner, tiny_grouped_model: Model, tmp_path: Path
) -> None:
    for layer in tiny_grouped_model.learned_group_convs():
        condense(layer.state)
    source = save_checkpoint(checkpoint_from_model(tiny_grouped_model), tmp_path / "g.ecnw")
    target = tmp_path / "packed.ecnw"

    exported = cli_runner(
        "export", "--checkpoint", str(source), "--out", str(target), "--grouped", "-q"
    )
    profiled = cli_runner("profile", "--checkpoint", str(target), "--format", "json", "-q")

    assert exported.returncode == 0
    assert target.is_file()
    report = json.loads(profiled.stdout)
    assert report["arch"] == "edgecnn-g"
    assert report["condensed"] is True


def test_train_then_eval_on_synthetic_data(cli_runner: CliRunner, tmp_path: Path) -> None:
    out = tmp_path / "run"

    train_args = ("train", "--epochs", "2", "--batch-size", "35", "--seed", "7", "--out", str(out))
    eval_args = ("eval", "--checkpoint", str(out / "last.ecnw"), "--split", "test", "--seed", "7")

    trained = cli_runner(*train_args, "--format", "json", *TINY)
    evaluated = cli_runner(*eval_args, "--format", "json", "-q")

    assert trained.returncode == 0, trained.stderr
    assert len(_history(trained.stdout)) == 2
    assert (out / "metrics.csv").is_file()
    assert (out / "best.ecnw").is_file()
    report = json.loads(evaluated.stdout)
    assert evaluated.returncode == 0, evaluated.stderr
    assert report["total"] == 35
    assert sum(map(sum, report["confusion"])) == 35


def test_training_runs_repeat_for_a_seed(cli_runner: CliRunner) -> None:
    args = ("train", "--epochs", "1", "--batch-size", "35", "--seed", "7", "--format", "json")

    first = cli_runner(*args, *TINY)
    second = cli_runner(*args, *TINY)

    assert first.returncode == second.returncode == 0
    assert _history(first.stdout) == _history(second.stdout)


def test_config_file_supplies_defaults_and_flags_win(
    cli_runner: CliRunner, tmp_path: Path
) -> None:
    config = tmp_path / "trace.cfg"
    config.write_text("# trace settings\narch = edgecnn-g\nformat = json\n", encoding="utf-8")

    from_file = cli_runner("trace", "--config", str(config))
    overridden = cli_runner("trace", "--config", str(config), "--arch", "edgecnn")

    assert json.loads(from_file.stdout)[2]["operator"] == "EdgeBlock-G x4"
    assert json.loads(overridden.stdout)[2]["operator"] == "EdgeBlock x4"


def test_config_file_rejects_unknown_settings(cli_runner: CliRunner, tmp_path: Path) -> None:
    config = tmp_path / "bad.cfg"
    config.write_text("depth = 3\n", encoding="utf-8")

    result = cli_runner("trace", "--config", str(config))

    assert result.returncode == 1
    assert "unknown setting for 'trace': 'depth'" in result.stderr


def test_help_lists_defaults(cli_runner: CliRunner) -> None:
    result = cli_runner("train", "--help")

    assert result.returncode == 0
    assert "(default: 120)" in result.stdout
    assert "--weight-decay" in result.stdout


def test_trace_detailed_honors_architecture_overrides(cli_runner: CliRunner) -> None:
    result = cli_runner("trace", "--detailed", "--growth-rate", "4", "--format", "json", *TINY)

    names = [row["name"] for row in json.loads(result.stdout)]
    assert result.returncode == 0
    assert names[0] == "stem.conv"
    assert "edgeblock3.layer1" in names
    assert "edgeblock3.layer2" not in names


def test_negative_seed_is_a_usage_error(cli_runner: CliRunner) -> None:
    result = cli_runner("profile", "--arch", "edgecnn", "--seed", "-1", "-q")

    assert result.returncode == 1
    assert result.stderr.startswith("error: --seed must be >= 0: -1")
    assert "Traceback" not in result.stderr


def test_unwritable_output_path_exits_with_code_two(
    cli_runner: CliRunner, tmp_path: Path
) -> None:
    blocker = tmp_path / "report"
    blocker.write_text("not a directory\n", encoding="utf-8")

    result = cli_runner("profile", "--out", str(blocker / "cost.txt"), "-q")

    assert result.returncode == 2
    assert result.stderr.startswith("error:")
    assert str(blocker) in result.stderr
    assert "Traceback" not in result.stderr
