import os

import numpy as np
import pytest

from egopolicy import cli
from egopolicy.data import DatasetManifest


def run(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data"))
    rc = run("gen-data", "--out", out, "--clips", "4", "--demos", "3", "--seed", "0",
             "--feature-dim", "64", "--embed-dim", "32")
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def tiny_pipeline(tiny_data, tmp_path_factory):
    base = str(tmp_path_factory.mktemp("pipe"))
    human_raw = os.path.join(tiny_data, "human_raw", "manifest.txt")
    robo = os.path.join(base, "robo")
    labeled = os.path.join(base, "labeled")
    filtered = os.path.join(base, "filtered")
    assert run("robotize", "--in", human_raw, "--out", robo) == 0
    assert run("label", "--in", os.path.join(robo, "manifest.txt"), "--out", labeled,
               "--horizon", "4") == 0
    assert run("filter", "--in", os.path.join(labeled, "manifest.txt"), "--out", filtered) == 0
    return base


class TestPipelineCommands:
    def test_gen_data_outputs(self, tiny_data):
        assert os.path.exists(os.path.join(tiny_data, "human_raw", "manifest.txt"))
        assert os.path.exists(os.path.join(tiny_data, "robot", "manifest.txt"))
        assert os.path.exists(os.path.join(tiny_data, "config.txt"))
        m = DatasetManifest.load(os.path.join(tiny_data, "human_raw", "manifest.txt"))
        assert len(m.entries) == 4

    def test_pipeline_chain(self, tiny_pipeline):
        m = DatasetManifest.load(os.path.join(tiny_pipeline, "filtered", "manifest.txt"))
        assert m.filter_report.total_frames > 0
        assert m.horizon == 4

    def test_unknown_flag_rejected(self):
        assert run("gen-data", "--out", "/tmp/x", "--bogus-flag", "1") == 1

    def test_unknown_command_rejected(self):
        assert run("frobnicate") == 1

    def test_missing_manifest_is_validation_error(self, tmp_path):
        assert run("robotize", "--in", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "o")) == 1

    def test_corrupt_payload_is_data_error(self, tiny_data, tmp_path):
        import shutil

        src = os.path.join(tiny_data, "human_raw")
        dst = str(tmp_path / "corrupt")
        shutil.copytree(src, dst)
        clips = [f for f in os.listdir(dst) if f.endswith(".clip")]
        path = os.path.join(dst, clips[0])
        raw = bytearray(open(path, "rb").read())
        raw[len(raw) // 2] ^= 0xFF
        open(path, "wb").write(bytes(raw))
        assert run("robotize", "--in", os.path.join(dst, "manifest.txt"),
                   "--out", str(tmp_path / "o")) == 2


class TestTrainingCommands:
    def test_pretrain_cotrain_eval(self, tiny_pipeline, tmp_path):
        human = os.path.join(tiny_pipeline, "filtered", "manifest.txt")
        # robot demos regenerated small to match the 64/32 dims of the clips
        data_dir = str(tmp_path / "gen2")
        assert run("gen-data", "--out", data_dir, "--clips", "1", "--demos", "2",
                   "--feature-dim", "64", "--embed-dim", "32") == 0
        robot = os.path.join(data_dir, "robot", "manifest.txt")

        pre = str(tmp_path / "pre")
        assert run("pretrain", "--human", human, "--out", pre, "--steps", "12") == 0
        assert os.path.exists(os.path.join(pre, "checkpoint.ckpt"))
        assert open(os.path.join(pre, "trainlog.csv")).readline().startswith("step,")

        co = str(tmp_path / "co")
        assert run("cotrain", "--human", human, "--robot", robot, "--init",
                   os.path.join(pre, "checkpoint.ckpt"), "--out", co, "--steps", "10") == 0

        ft = str(tmp_path / "ft")
        assert run("cotrain", "--robot", robot, "--finetune", "--out", ft, "--steps", "5") == 0

        ev = str(tmp_path / "ev")
        assert run("eval", "--checkpoint", os.path.join(co, "checkpoint.ckpt"), "--out", ev,
                   "--rollouts", "2", "--max-steps", "8", "--style", "0") == 0
        lines = open(os.path.join(ev, "rollouts.csv")).read().splitlines()
        assert lines[0] == "episode,score,subtask1,subtask2,subtask3,steps,seed"
        assert len(lines) == 3

    def test_eval_missing_checkpoint_no_artifacts(self, tmp_path):
        out = str(tmp_path / "ev")
        assert run("eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", out) == 1
        assert not os.path.exists(out)

    def test_cotrain_without_human_or_finetune_rejected(self, tmp_path, tiny_data):
        robot = os.path.join(tiny_data, "robot", "manifest.txt")
        assert run("cotrain", "--robot", robot, "--out", str(tmp_path / "x")) == 1


@pytest.fixture(scope="module")
def study_args():
    return ["--seeds", "0", "--clips", "4", "--demos", "2", "--rollouts", "2",
            "--pretrain-steps", "8", "--cotrain-steps", "8"]


class TestStudyCommands:

    def test_ablate_grid_shape(self, tmp_path, study_args):
        out = str(tmp_path / "ab")
        assert run("ablate", "--out", out, *study_args) == 0
        lines = open(os.path.join(out, "ablate.csv")).read().splitlines()
        assert lines[0].startswith("condition,seed0")
        assert len(lines) == 5  # header + the 2x2 grid
        assert os.path.exists(os.path.join(out, "ablate.svg"))

    def test_scale_study_deterministic_bytes(self, tmp_path, study_args):
        a, b = str(tmp_path / "s1"), str(tmp_path / "s2")
        args = ["--fractions", "0,1.0", *study_args]
        assert run("scale-study", "--out", a, *args) == 0
        assert run("scale-study", "--out", b, *args) == 0
        csv_a = open(os.path.join(a, "scale_study.csv"), "rb").read()
        csv_b = open(os.path.join(b, "scale_study.csv"), "rb").read()
        assert csv_a == csv_b
        svg_a = open(os.path.join(a, "scale_study.svg"), "rb").read()
        svg_b = open(os.path.join(b, "scale_study.svg"), "rb").read()
        assert svg_a == svg_b

    def test_plot_from_csv(self, tmp_path):
        csv_path = str(tmp_path / "r.csv")
        open(csv_path, "w").write("condition,seed0,mean,sem\na,0.5,0.5,0.0\nb,0.7,0.7,0.0\n")
        out = str(tmp_path / "r.svg")
        assert run("plot", "--in", csv_path, "--out", out) == 0
        assert open(out).read().startswith("<?xml")

    def test_plot_missing_input(self, tmp_path):
        assert run("plot", "--in", str(tmp_path / "no.csv"), "--out", str(tmp_path / "x.svg")) == 1
