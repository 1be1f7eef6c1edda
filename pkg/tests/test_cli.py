import numpy as np
import pytest

from trajmodes.cli import main
from trajmodes.config import DEFAULTS
from trajmodes.dataset import read_dataset

INTERSECTION_CONF = """
scenario.kind = t_intersection
scenario.arm_length = 60
scenario.turn_radius = 6
traffic.rollouts = 4
traffic.ticks = 35
traffic.speed = 10.0
traffic.speed_sigma = 0.3
traffic.start_min = 26
traffic.start_max = 32
dataset.horizon = 20
dataset.seed = 3
raster.height = 16
raster.width = 16
raster.resolution = 2.0
raster.channels = lane_surface,target_actor
model.conv = 4x3x2
model.dense = 16
model.modes = 2
train.loss = mtp-disp
train.epochs = 2
train.batch_size = 16
train.learning_rate = 0.01
"""

STRAIGHT_CONF = """
scenario.kind = straight_road
scenario.arm_length = 300
traffic.rollouts = 4
traffic.ticks = 40
traffic.speed = 10.0
traffic.speed_sigma = 0.0
traffic.start_min = 240
traffic.start_max = 250
dataset.horizon = 20
dataset.seed = 5
raster.height = 16
raster.width = 16
raster.resolution = 2.0
raster.channels = lane_surface,target_actor
model.conv = 4x3x2
model.dense = 16
train.loss = stp
train.epochs = 40
train.batch_size = 16
train.learning_rate = 0.05
train.decay_interval = 10
train.val_fraction = 0.25
"""


@pytest.fixture
def intersection_conf(tmp_path):
    path = tmp_path / "intersection.conf"
    path.write_text(INTERSECTION_CONF)
    return path


@pytest.fixture
def straight_conf(tmp_path):
    path = tmp_path / "straight.conf"
    path.write_text(STRAIGHT_CONF)
    return path


class TestPrintConfig:
    def test_dumps_every_default(self, capsys):
        assert main(["--print-config"]) == 0
        out = capsys.readouterr().out
        for key in DEFAULTS:
            assert key in out

    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == 2


class TestGenerate:
    def test_generate_writes_dataset_and_summary(self, tmp_path,
                                                 intersection_conf, capsys):
        out = tmp_path / "ds"
        assert main(["generate", "--config", str(intersection_conf),
                     "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        ds = read_dataset(out)
        assert f"samples: {len(ds)}" in printed
        assert len(ds) == 4 * (35 - 20)

    def test_deterministic_bytes_across_runs(self, tmp_path, intersection_conf):
        for name in ("a", "b"):
            assert main(["generate", "--config", str(intersection_conf),
                         "--out", str(tmp_path / name), "--seed", "7"]) == 0
        assert (tmp_path / "a" / "samples.bin").read_bytes() == \
               (tmp_path / "b" / "samples.bin").read_bytes()

    def test_threads_do_not_change_output(self, tmp_path, intersection_conf):
        main(["generate", "--config", str(intersection_conf),
              "--out", str(tmp_path / "one"), "--threads", "1"])
        main(["generate", "--config", str(intersection_conf),
              "--out", str(tmp_path / "four"), "--threads", "4"])
        assert (tmp_path / "one" / "samples.bin").read_bytes() == \
               (tmp_path / "four" / "samples.bin").read_bytes()

    def test_invalid_key_exits_2_with_line_number(self, tmp_path, capsys):
        conf = tmp_path / "bad.conf"
        conf.write_text("train.loss = me\nraster.nonsense = 4\n")
        assert main(["generate", "--config", str(conf),
                     "--out", str(tmp_path / "ds")]) == 2
        assert "line 2" in capsys.readouterr().err


class TestTrain:
    def test_stp_converges_on_constant_velocity_data(self, tmp_path,
                                                     straight_conf, capsys):
        ds_dir = tmp_path / "ds"
        assert main(["generate", "--config", str(straight_conf),
                     "--out", str(ds_dir)]) == 0
        log = tmp_path / "train.csv"
        ckpt = tmp_path / "model.ckpt"
        assert main(["train", "--config", str(straight_conf),
                     "--dataset", str(ds_dir), "--out", str(ckpt),
                     "--log", str(log)]) == 0
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "epoch,step,train_loss,val_loss"
        final_val = float(lines[-1].split(",")[3])
        # stp loss is mean displacement in meters
        assert final_val < 0.1
        assert ckpt.exists()

    def test_unknown_loss_exits_2(self, tmp_path, straight_conf, capsys):
        ds_dir = tmp_path / "ds"
        main(["generate", "--config", str(straight_conf), "--out", str(ds_dir)])
        conf = tmp_path / "bad_loss.conf"
        conf.write_text(STRAIGHT_CONF.replace("train.loss = stp",
                                              "train.loss = wta"))
        assert main(["train", "--config", str(conf), "--dataset", str(ds_dir),
                     "--out", str(tmp_path / "m.ckpt")]) == 2
        assert "train.loss" in capsys.readouterr().err

    def test_missing_dataset_exits_3(self, tmp_path, straight_conf):
        assert main(["train", "--config", str(straight_conf),
                     "--dataset", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "m.ckpt")]) == 3


class TestEval:
    @pytest.fixture
    def trained(self, tmp_path, intersection_conf):
        ds_dir = tmp_path / "ds"
        ckpt = tmp_path / "model.ckpt"
        main(["generate", "--config", str(intersection_conf),
              "--out", str(ds_dir)])
        main(["train", "--config", str(intersection_conf),
              "--dataset", str(ds_dir), "--out", str(ckpt)])
        return ds_dir, ckpt

    def test_model_eval_writes_reports(self, tmp_path, trained, capsys):
        ds_dir, ckpt = trained
        out = tmp_path / "reports"
        assert main(["eval", "--dataset", str(ds_dir),
                     "--checkpoint", str(ckpt), "--out-dir", str(out)]) == 0
        assert (out / "metrics.csv").exists()
        assert (out / "metrics.md").exists()
        assert (out / "calibration.csv").exists()
        assert "mtp-disp" in capsys.readouterr().out

    def test_baseline_needs_no_checkpoint(self, tmp_path, trained, capsys):
        ds_dir, _ = trained
        out = tmp_path / "base_reports"
        assert main(["eval", "--dataset", str(ds_dir),
                     "--baseline", "propagation", "--out-dir", str(out)]) == 0
        assert (out / "metrics.csv").exists()
        assert not (out / "calibration.csv").exists()
        assert "propagation" in capsys.readouterr().out

    def test_shape_mismatch_exits_5(self, tmp_path, trained, straight_conf):
        _, ckpt = trained
        other_ds = tmp_path / "other_ds"
        conf = tmp_path / "bigger.conf"
        conf.write_text(STRAIGHT_CONF.replace("raster.height = 16",
                                              "raster.height = 20"))
        main(["generate", "--config", str(conf), "--out", str(other_ds)])
        assert main(["eval", "--dataset", str(other_ds),
                     "--checkpoint", str(ckpt)]) == 5

    def test_missing_dataset_exits_3(self, tmp_path):
        assert main(["eval", "--dataset", str(tmp_path / "missing"),
                     "--baseline", "propagation"]) == 3

    def test_missing_checkpoint_flag_exits_2(self, tmp_path, trained):
        ds_dir, _ = trained
        assert main(["eval", "--dataset", str(ds_dir)]) == 2

    def test_corrupt_dataset_exits_3(self, tmp_path, trained):
        ds_dir, _ = trained
        binfile = ds_dir / "samples.bin"
        blob = bytearray(binfile.read_bytes())
        blob[50] ^= 0xFF
        binfile.write_bytes(bytes(blob))
        assert main(["eval", "--dataset", str(ds_dir),
                     "--baseline", "propagation"]) == 3


class TestRasterize:
    def test_dataset_dump_dimensions(self, tmp_path, intersection_conf, capsys):
        ds_dir = tmp_path / "ds"
        main(["generate", "--config", str(intersection_conf),
              "--out", str(ds_dir)])
        out = tmp_path / "imgs"
        assert main(["rasterize", "--dataset", str(ds_dir),
                     "--indices", "0,3", "--out", str(out)]) == 0
        files = sorted(out.glob("*.ppm"))
        assert len(files) == 2
        header = files[0].read_bytes()[:11]
        assert header.startswith(b"P6\n16 16\n")

    def test_lane_variants_differ(self, tmp_path, intersection_conf):
        conf = tmp_path / "lf.conf"
        conf.write_text(INTERSECTION_CONF + "raster.lane_following = true\n")
        out = tmp_path / "lf_imgs"
        # tick 15 puts the branch inside the raster's forward coverage;
        # lane 1 = straight successor, lane 2 = right turn connector
        assert main(["rasterize", "--config", str(conf), "--indices", "15",
                     "--out", str(out), "--lane", "1",
                     "--channels", "0,1,2"]) == 0
        assert main(["rasterize", "--config", str(conf), "--indices", "15",
                     "--out", str(out), "--lane", "2",
                     "--channels", "0,1,2"]) == 0
        a = (out / "tick_00015_lane1.ppm").read_bytes()
        b = (out / "tick_00015_lane2.ppm").read_bytes()
        assert a != b

    def test_out_of_range_index_exits_2(self, tmp_path, intersection_conf):
        ds_dir = tmp_path / "ds"
        main(["generate", "--config", str(intersection_conf),
              "--out", str(ds_dir)])
        assert main(["rasterize", "--dataset", str(ds_dir),
                     "--indices", "99999", "--out", str(tmp_path / "x")]) == 2


class TestCompare:
    CSV_A = ("method,slice,horizon,displacement,along_track,cross_track,count\n"
             "stp,all,@1s,0.4,0.3,0.1,10\n"
             "stp,all,@6s,4.0,3.5,0.8,10\n"
             "stp,all,avg,1.5,1.2,0.3,10\n")
    CSV_B = ("method,slice,horizon,displacement,along_track,cross_track,count\n"
             "mtp,all,@1s,0.3,0.2,0.1,10\n"
             "mtp,all,@6s,2.0,1.8,0.4,10\n"
             "mtp,all,avg,0.9,0.8,0.2,10\n")
    CSV_OTHER_H = (
        "method,slice,horizon,displacement,along_track,cross_track,count\n"
        "ukf,all,@1s,0.5,0.4,0.2,10\n"
        "ukf,all,@3s,3.0,2.0,0.9,10\n"
        "ukf,all,avg,1.4,1.0,0.4,10\n")

    def test_single_report_pass_through(self, tmp_path, capsys):
        a = tmp_path / "a.csv"
        a.write_text(self.CSV_A)
        assert main(["compare", str(a)]) == 0
        out = capsys.readouterr().out
        assert "stp" in out and "| method |" in out

    def test_union_of_rows_with_best_bolded(self, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        a.write_text(self.CSV_A)
        b.write_text(self.CSV_B)
        merged = tmp_path / "merged.md"
        assert main(["compare", str(a), str(b), "--out", str(merged)]) == 0
        text = merged.read_text()
        assert "stp" in text and "mtp" in text
        assert "**2.00**" in text

    def test_mismatched_horizons_exit_2(self, tmp_path):
        a, c = tmp_path / "a.csv", tmp_path / "c.csv"
        a.write_text(self.CSV_A)
        c.write_text(self.CSV_OTHER_H)
        assert main(["compare", str(a), str(c)]) == 2

    def test_schema_mismatch_exits_2(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("something,else\n1,2\n")
        assert main(["compare", str(bad)]) == 2

    def test_missing_report_exits_3(self, tmp_path):
        assert main(["compare", str(tmp_path / "gone.csv")]) == 3
