"""End-to-end command-line tests: every subcommand, exit codes, and the
CSV and checkpoint files the commands leave behind."""
import numpy as np
import pytest

from treemoe.checkpoint import checkpoint_load, checkpoint_save
from treemoe.cli import main
from treemoe.moe import VARIANTS, ModelDims
from treemoe.synthdata import read_meta


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny dataset plus trained checkpoints shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert main(["gen-data", "--out", str(ds), "--n", "14", "--seed", "77"]) == 0
    common = ["--data", str(ds), "--seed", "5", "--stages", "1",
              "--epochs", "2", "--batch-size", "8"]
    assert main(["train", "--variant", "baseline",
                 "--out", str(root / "baseline.ckpt"), *common]) == 0
    assert main(["train", "--variant", "pose-tree-moe", "--pose-oracle",
                 "--out", str(root / "tree.ckpt"), *common]) == 0
    return root


# --------------------------------------------------------------- gen-data

def test_gen_data_reports_split_sizes(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path / "d"), "--n", "10",
                 "--seed", "3"])
    assert code == 0
    out = capsys.readouterr().out
    assert "wrote 8 train / 2 test samples" in out
    assert (tmp_path / "d" / "template.txt").exists()
    assert len(list((tmp_path / "d" / "train").glob("*.pgm"))) == 8
    assert len(list((tmp_path / "d" / "test").glob("*.pgm"))) == 2


def test_gen_data_pose_range_flags(tmp_path):
    ds = tmp_path / "d"
    assert main(["gen-data", "--out", str(ds), "--n", "4", "--seed", "1",
                 "--pitch-max-deg", "0", "--roll-max-deg", "0",
                 "--yaw-max-deg", "30"]) == 0
    for meta_path in sorted(ds.rglob("*.meta.txt")):
        meta = read_meta(meta_path)
        assert meta["pose_pitch"] == 0.0
        assert meta["pose_roll"] == 0.0
        assert abs(np.degrees(meta["pose_yaw"])) <= 30.0


def test_gen_data_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--n", "6",
                     "--seed", "9"]) == 0
    for rel in sorted(p.relative_to(tmp_path / "a")
                      for p in (tmp_path / "a").rglob("*") if p.is_file()):
        assert (tmp_path / "a" / rel).read_bytes() == \
               (tmp_path / "b" / rel).read_bytes()


def test_gen_data_rejects_bad_image_size(tmp_path, capsys):
    with pytest.raises(ValueError, match="image size"):
        main(["gen-data", "--out", str(tmp_path / "d"), "--n", "2",
              "--seed", "1", "--image-size", "8"])


# ------------------------------------------------------------------ train

def test_train_writes_checkpoint_and_history(workspace):
    ckpt = workspace / "baseline.ckpt"
    assert ckpt.exists()
    model, header = checkpoint_load(ckpt)
    assert header["variant"] == "baseline"
    assert header["x_epochs_per_stage"] == "2"
    history = (workspace / "loss_history.csv").read_text().splitlines()
    assert history[0] == "stage,epoch,mean_loss"
    assert len(history) == 3  # header + 2 epochs of 1 stage
    for line in history[1:]:
        stage, epoch, loss = line.split(",")
        assert stage == "1" and float(loss) > 0


def test_train_pose_variant_needs_a_pose_source(workspace):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "pose-tree-moe", "--data",
              str(workspace / "ds"), "--out", "/tmp/x.ckpt", "--seed", "1"])
    assert exc.value.code == 2


def test_train_plain_variant_rejects_pose_flags(workspace):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "baseline", "--pose-oracle", "--data",
              str(workspace / "ds"), "--out", "/tmp/x.ckpt", "--seed", "1"])
    assert exc.value.code == 2


def test_train_unknown_variant_is_a_usage_error(workspace):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--variant", "mega-moe", "--data", str(workspace / "ds"),
              "--out", "/tmp/x.ckpt", "--seed", "1"])
    assert exc.value.code == 2


def test_train_missing_dataset_exits_3(tmp_path, capsys):
    code = main(["train", "--variant", "baseline", "--data",
                 str(tmp_path / "absent"), "--out", str(tmp_path / "x.ckpt"),
                 "--seed", "1"])
    assert code == 3
    assert "error:" in capsys.readouterr().err


def test_train_nonfinite_loss_exits_4(workspace, tmp_path, capsys):
    code = main(["train", "--variant", "baseline", "--data",
                 str(workspace / "ds"), "--out", str(tmp_path / "x.ckpt"),
                 "--seed", "1", "--stages", "1", "--epochs", "3",
                 "--lr", "nan"])
    assert code == 4
    assert "not finite" in capsys.readouterr().err


# ------------------------------------------------------------- train-pose

def test_train_pose_then_pose_model_training(workspace, tmp_path, capsys):
    pose_ckpt = tmp_path / "pose.ckpt"
    code = main(["train-pose", "--data", str(workspace / "ds"), "--out",
                 str(pose_ckpt), "--seed", "2", "--epochs", "1",
                 "--batch-size", "8"])
    assert code == 0
    out = capsys.readouterr().out
    assert "epoch 1  loss" in out
    assert pose_ckpt.exists()

    code = main(["train", "--variant", "pose-tree-moe", "--pose-model",
                 str(pose_ckpt), "--data", str(workspace / "ds"), "--out",
                 str(tmp_path / "ptm.ckpt"), "--seed", "3", "--stages", "1",
                 "--epochs", "1", "--batch-size", "8"])
    assert code == 0
    _, header = checkpoint_load(tmp_path / "ptm.ckpt")
    assert header["pose_mode"] == "model"


# ------------------------------------------------------------------- eval

def test_eval_prints_report_and_writes_csv(workspace, tmp_path, capsys):
    csv_path = tmp_path / "per_sample.csv"
    code = main(["eval", "--model", str(workspace / "baseline.ckpt"),
                 "--data", str(workspace / "ds"), "--csv", str(csv_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "variant          baseline" in out
    assert "overall NME (%)" in out
    assert "bucket mean" in out
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "sample_id,yaw_deg,nme_bbox,nme_interpupil"
    assert len(lines) == 4  # header + 3 test samples
    for line in lines[1:]:
        sid, yaw, bb, ip = line.split(",")
        assert sid.startswith("sample_")
        assert float(bb) > 0 and float(ip) > 0


def test_eval_can_score_the_training_subset(workspace, capsys):
    code = main(["eval", "--model", str(workspace / "baseline.ckpt"),
                 "--data", str(workspace / "ds"), "--subset", "train"])
    assert code == 0
    assert "samples          11" in capsys.readouterr().out


def test_eval_warns_about_empty_buckets(workspace, tmp_path, capsys):
    ds = tmp_path / "narrow"
    assert main(["gen-data", "--out", str(ds), "--n", "8", "--seed", "4",
                 "--yaw-max-deg", "10"]) == 0
    code = main(["eval", "--model", str(workspace / "baseline.ckpt"),
                 "--data", str(ds)])
    assert code == 0
    err = capsys.readouterr().err
    assert "yaw bucket [30,60) is empty" in err
    assert "yaw bucket [60,90] is empty" in err


def test_eval_rejects_mismatched_landmark_counts(workspace, tmp_path, capsys):
    from treemoe.cascade import build_cascade_model
    dims = ModelDims(
        landmarks=6, patch_size=8, features_per_landmark=2, image_size=96,
        single_cnn=((2, 3, 2), (2, 3, 2)), expert_cnn=((2, 3, 2), (2, 3, 2)),
        reg_hidden=4, reg_experts=4, reg_tree_depth=2,
        rep_experts=2, rep_tree_depth=1, baseline_hidden=8)
    model = build_cascade_model("baseline", dims, 1, np.random.default_rng(0),
                                seed=0)
    model.mean_shape = np.zeros(12)
    model.mean_box_scale = 50.0
    checkpoint_save(model, tmp_path / "six.ckpt")
    code = main(["eval", "--model", str(tmp_path / "six.ckpt"),
                 "--data", str(workspace / "ds")])
    assert code == 3
    assert "expects 6 landmarks but the dataset provides 12" in \
        capsys.readouterr().err


def test_eval_corrupt_checkpoint_exits_3(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    code = main(["eval", "--model", str(bad), "--data", str(workspace / "ds")])
    assert code == 3
    assert "error:" in capsys.readouterr().err


# -------------------------------------------------------------- introspect

def test_introspect_writes_gate_tables(workspace, tmp_path, capsys):
    out_dir = tmp_path / "intro"
    code = main(["introspect", "--model", str(workspace / "tree.ckpt"),
                 "--data", str(workspace / "ds"), "--out-dir", str(out_dir)])
    assert code == 0

    clusters = (out_dir / "clusters.csv").read_text().splitlines()
    assert clusters[0] == ("sample_id,yaw_deg,pitch_deg,roll_deg,"
                           "argmax_leaf_representation,argmax_leaf_regression,"
                           "max_weight")
    assert len(clusters) == 4  # header + 3 test samples
    for line in clusters[1:]:
        fields = line.split(",")
        assert 1 <= int(fields[4]) <= 4      # representation tree leaves
        assert 1 <= int(fields[5]) <= 16     # regression tree leaves
        assert 0.0 < float(fields[6]) <= 1.0

    usage = (out_dir / "cumulative_usage.csv").read_text().splitlines()
    assert usage[0] == "layer,rank,mean_cumulative_weight"
    rows = [line.split(",") for line in usage[1:]]
    rep = [float(v) for layer, _, v in rows if layer == "representation"]
    reg = [float(v) for layer, _, v in rows if layer == "regression"]
    assert len(rep) == 4 and len(reg) == 16
    for curve in (rep, reg):
        assert all(b >= a - 1e-12 for a, b in zip(curve, curve[1:]))
        assert curve[-1] == pytest.approx(1.0, abs=1e-9)


def test_introspect_rejects_the_baseline(workspace, tmp_path, capsys):
    code = main(["introspect", "--model", str(workspace / "baseline.ckpt"),
                 "--data", str(workspace / "ds"), "--out-dir",
                 str(tmp_path / "x")])
    assert code == 3
    assert "no gates to introspect" in capsys.readouterr().err


# ------------------------------------------------------------ param-report

def test_param_report_lists_all_variants(capsys):
    assert main(["param-report", "--scale", "desk"]) == 0
    out = capsys.readouterr().out
    for name in VARIANTS:
        assert name in out
    assert "+0.00%" in out  # the baseline relative to itself


def test_param_report_paper_scale(capsys):
    assert main(["param-report", "--scale", "full"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("baseline")]
    assert lines and int(lines[0].split()[1]) > 10_000_000


# ----------------------------------------------------------------- parser

def test_unknown_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_required_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--n", "4", "--seed", "1"])
    assert exc.value.code == 2
