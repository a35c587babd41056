import json
from pathlib import Path

import numpy as np
import pytest

from oovkit.cli import main

FIXTURES = Path(__file__).parent / "fixtures"

TINY = dict(
    seed=5,
    d=12,
    k=4,
    n_seen=3,
    queue_size=6,
    train_scenes=8,
    test_scenes=6,
    fg_per_scene=4,
    bg_per_scene=4,
    oov_per_scene=2,
    iterations=40,
    batch_scenes=2,
    pool_size=8,
    eval_oov_draws=8,
)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


class TestEvalCommand:
    def test_hand_fixture_row_and_exit_code(self, tmp_path, capsys):
        rc = main(
            [
                "eval",
                "--dets",
                str(FIXTURES / "handcheck_dets.jsonl"),
                "--gt",
                str(FIXTURES / "handcheck_gt.jsonl"),
                "--splits",
                str(FIXTURES / "handcheck_splits.json"),
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 0
        row = capsys.readouterr().out
        assert "91.67/100.00" in row  # mAP_IV / mAP_OOV
        assert "83.33/100.00" in row  # mAP_Seen / mAP_Unseen
        assert "100.00/40.00" in row  # R / AR
        assert "33.33/1" in row  # WI / AOSE
        csv_text = (tmp_path / "metrics.csv").read_text().splitlines()
        assert csv_text[0].startswith("map_iv")
        assert csv_text[1].endswith(",1")

    def test_missing_input_exits_one_with_path(self, tmp_path, capsys):
        rc = main(
            [
                "eval",
                "--dets",
                str(tmp_path / "absent.jsonl"),
                "--gt",
                str(FIXTURES / "handcheck_gt.jsonl"),
                "--splits",
                str(FIXTURES / "handcheck_splits.json"),
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 1
        assert "absent.jsonl" in capsys.readouterr().err

    def test_malformed_jsonl_exits_one_with_line_number(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text(
            '{"box": [0,0,1,1], "scores": [0.5, 0.3, 0.2], "predicted_label": 0, "image_id": "imgA"}\n'
            "not json\n"
        )
        rc = main(
            [
                "eval",
                "--dets",
                str(bad),
                "--gt",
                str(FIXTURES / "handcheck_gt.jsonl"),
                "--splits",
                str(FIXTURES / "handcheck_splits.json"),
                "--out",
                str(tmp_path),
            ]
        )
        assert rc == 1
        assert ":2:" in capsys.readouterr().err


class TestUsageErrors:
    def test_unknown_flag_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--bogus", "x"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestTrainToy:
    def test_byte_identical_reports(self, tmp_path, tiny_config):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["train-toy", "--config", str(tiny_config), "--seed", "7", "--out", str(out_a)]) == 0
        assert main(["train-toy", "--config", str(tiny_config), "--seed", "7", "--out", str(out_b)]) == 0
        for name in ("report.json", "losses.csv", "densities.csv", "metrics.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name

    def test_seed_flag_overrides_config(self, tmp_path, tiny_config):
        out = tmp_path / "o"
        main(["train-toy", "--config", str(tiny_config), "--seed", "11", "--out", str(out)])
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["seed"] == 11
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["seed"] == 11

    def test_writes_only_inside_out(self, tmp_path, tiny_config, monkeypatch):
        workdir = tmp_path / "cwd"
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        out = tmp_path / "only"
        main(["train-toy", "--config", str(tiny_config), "--out", str(out)])
        assert list(workdir.iterdir()) == []


class TestPipeline:
    def test_gen_data_mine_ld_loss_chain(self, tmp_path, tiny_config, capsys):
        data_dir = tmp_path / "data"
        assert main(["gen-data", "--config", str(tiny_config), "--out", str(data_dir)]) == 0
        for name in (
            "train_scenes.jsonl",
            "test_scenes.jsonl",
            "prompt_queue.jsonl",
            "gradient_maps.jsonl",
            "bank.jsonl",
            "resolved_config.json",
        ):
            assert (data_dir / name).exists(), name

        mine_dir = tmp_path / "mine"
        assert (
            main(
                [
                    "mine",
                    "--config",
                    str(tiny_config),
                    "--grads",
                    str(data_dir / "gradient_maps.jsonl"),
                    "--out",
                    str(mine_dir),
                ]
            )
            == 0
        )
        mined = [json.loads(l) for l in (mine_dir / "pseudo_oov.jsonl").read_text().splitlines()]
        assert all({"group", "proposal_id", "uncertainty", "x_g", "alpha_g", "values"} <= set(m) for m in mined)
        fg = [m for m in mined if m["group"] == "foreground"]
        assert len(fg) == TINY["top_k"] if "top_k" in TINY else len(fg) == 3

        ld_dir = tmp_path / "ld"
        assert (
            main(
                [
                    "ld-loss",
                    "--config",
                    str(tiny_config),
                    "--batch",
                    str(mine_dir / "pseudo_oov.jsonl"),
                    "--bank",
                    str(data_dir / "bank.jsonl"),
                    "--out",
                    str(ld_dir),
                ]
            )
            == 0
        )
        lines = (ld_dir / "ld_losses.csv").read_text().splitlines()
        assert lines[0].split(",") == [
            "sample_id",
            "group",
            "s",
            "density",
            "log_density",
            "weight",
            "loss",
            "grad_norm",
        ]
        assert len(lines) == len(mined) + 1

    def test_synth_oov_from_queue(self, tmp_path, tiny_config):
        data_dir = tmp_path / "data"
        main(["gen-data", "--config", str(tiny_config), "--out", str(data_dir)])
        synth_dir = tmp_path / "synth"
        assert (
            main(
                [
                    "synth-oov",
                    "--config",
                    str(tiny_config),
                    "--queue",
                    str(data_dir / "prompt_queue.jsonl"),
                    "--out",
                    str(synth_dir),
                ]
            )
            == 0
        )
        prompt = json.loads((synth_dir / "oov_prompt.jsonl").read_text())
        vec = np.asarray(prompt["values"])
        assert vec.shape == (TINY["d"],)
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-9
        cands = [
            json.loads(l) for l in (synth_dir / "candidates.jsonl").read_text().splitlines()
        ]
        assert len(cands) == TINY["pool_size"] * TINY["k"]
        assert sum(c["selected"] for c in cands) == 1
        best = max(cands, key=lambda c: c["mahalanobis_sq"])
        assert best["selected"]

    def test_synth_oov_determinism(self, tmp_path, tiny_config):
        data_dir = tmp_path / "data"
        main(["gen-data", "--config", str(tiny_config), "--out", str(data_dir)])
        outs = []
        for sub in ("s1", "s2"):
            d = tmp_path / sub
            main(
                [
                    "synth-oov",
                    "--config",
                    str(tiny_config),
                    "--queue",
                    str(data_dir / "prompt_queue.jsonl"),
                    "--out",
                    str(d),
                ]
            )
            outs.append((d / "oov_prompt.jsonl").read_bytes())
        assert outs[0] == outs[1]
