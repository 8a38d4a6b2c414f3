import numpy as np
import pytest
from util import gaussian_kernel, smooth_image

from lirls.cli import main, parse_config, UsageError
from lirls.image import load_image, psnr, save_image
from lirls.operators import BlurOperator, CfaOperator, SrOperator, save_kernel


@pytest.fixture()
def deblur_files(tmp_path):
    shape = (3, 48, 48)
    gt = smooth_image(shape, 50)
    kernel = gaussian_kernel(5, 1.0)
    op = BlurOperator(kernel, shape)
    rng = np.random.default_rng(51)
    y = op.apply(gt) + 0.01 * rng.standard_normal(op.out_shape)
    paths = {
        "y": tmp_path / "y.pfm",
        "gt": tmp_path / "gt.pfm",
        "kernel": tmp_path / "k.txt",
        "out": tmp_path / "out.pfm",
    }
    save_image(y, paths["y"])
    save_image(gt, paths["gt"])
    save_kernel(paths["kernel"], kernel)
    return paths


def run_cli(*args):
    return main(list(args))


def test_config_parsing_rejects_unknown_keys():
    with pytest.raises(UsageError):
        parse_config(["nonsense.key=1"])


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nsolver.max_steps = 7\nprior.p=0.5\n")
    values = parse_config(["prior.p=0.8"], config_file=cfg)
    assert values["solver.max_steps"] == 7
    assert values["prior.p"] == 0.8  # command line wins


def test_unknown_command_exits_one():
    assert run_cli("frobnicate") == 1


def test_missing_input_exits_one(tmp_path):
    code = run_cli(
        "deblur",
        f"io.input={tmp_path}/missing.pfm",
        f"io.kernel={tmp_path}/missing.txt",
        "problem.sigma=0.01",
        f"io.output={tmp_path}/out.pfm",
    )
    assert code == 1


def test_deblur_command_end_to_end(deblur_files, capsys):
    code = run_cli(
        "deblur",
        f"io.input={deblur_files['y']}",
        f"io.kernel={deblur_files['kernel']}",
        "problem.sigma=0.01",
        f"io.output={deblur_files['out']}",
        f"io.gt={deblur_files['gt']}",
        "prior.filter_scale=0.25",
        "solver.max_steps=30",
    )
    assert code in (0, 2)
    assert deblur_files["out"].exists()
    trace = deblur_files["out"].with_suffix(".trace.csv")
    assert trace.exists()
    header = trace.read_text().splitlines()[0]
    assert header == "k,objective,residual,inner_iterations,wall_ms"
    out = capsys.readouterr().out
    assert "psnr_db=" in out and "ssim=" in out


def test_deblur_near_identity_recovers_input(tmp_path, capsys):
    shape = (3, 32, 32)
    gt = smooth_image(shape, 52)
    y = gt.copy()
    save_image(y, tmp_path / "y.pfm")
    save_kernel(tmp_path / "k.txt", np.array([[1.0]]))
    code = run_cli(
        "deblur",
        f"io.input={tmp_path}/y.pfm",
        f"io.kernel={tmp_path}/k.txt",
        "problem.sigma=0.001",
        "prior.w=1e-8",
        f"io.output={tmp_path}/out.pfm",
    )
    assert code == 0
    out = load_image(tmp_path / "out.pfm").data
    assert psnr(out, gt) > 60.0


def test_cli_rerun_is_byte_identical(deblur_files):
    args = (
        "deblur",
        f"io.input={deblur_files['y']}",
        f"io.kernel={deblur_files['kernel']}",
        "problem.sigma=0.01",
        f"io.output={deblur_files['out']}",
        "solver.max_steps=6",
    )
    run_cli(*args)
    first = deblur_files["out"].read_bytes()
    trace = deblur_files["out"].with_suffix(".trace.csv")
    # wall_ms varies run to run; determinism covers the numeric columns
    first_cols = [
        ",".join(line.split(",")[:4]) for line in trace.read_text().splitlines()
    ]
    run_cli(*args)
    assert deblur_files["out"].read_bytes() == first
    second_cols = [
        ",".join(line.split(",")[:4]) for line in trace.read_text().splitlines()
    ]
    assert second_cols == first_cols


def test_sr_command_scale_one_identity_path(tmp_path):
    shape = (3, 24, 24)
    gt = smooth_image(shape, 53)
    save_image(gt, tmp_path / "y.pfm")
    save_kernel(tmp_path / "k.txt", np.array([[1.0]]))
    code = run_cli(
        "sr",
        "sr.scale=1",
        f"io.input={tmp_path}/y.pfm",
        f"io.kernel={tmp_path}/k.txt",
        "problem.sigma=0.001",
        "prior.w=1e-8",
        f"io.output={tmp_path}/out.pfm",
    )
    assert code == 0
    out = load_image(tmp_path / "out.pfm").data
    assert psnr(out, gt) > 60.0


def test_sr_command_x2(tmp_path):
    # valid dims divisible by the scale, so the input size is exactly recoverable
    shape = (3, 34, 34)
    gt = smooth_image(shape, 54)
    kernel = gaussian_kernel(3, 0.7)
    op = SrOperator(kernel, 2, shape)
    rng = np.random.default_rng(55)
    y = op.apply(gt) + 0.005 * rng.standard_normal(op.out_shape)
    save_image(y, tmp_path / "y.pfm")
    save_kernel(tmp_path / "k.txt", kernel)
    code = run_cli(
        "sr",
        "sr.scale=2",
        f"io.input={tmp_path}/y.pfm",
        f"io.kernel={tmp_path}/k.txt",
        "problem.sigma=0.005",
        f"io.output={tmp_path}/out.pfm",
        "solver.max_steps=20",
    )
    assert code in (0, 2)
    assert load_image(tmp_path / "out.pfm").data.shape == shape


def test_demosaick_constant_image_exact(tmp_path):
    shape = (3, 24, 24)
    gt = np.zeros(shape)
    gt[0], gt[1], gt[2] = 0.3, 0.5, 0.7
    cfa = CfaOperator(shape)
    y = cfa.apply(gt)
    save_image(y, tmp_path / "y.pfm")
    code = run_cli(
        "demosaick",
        f"io.input={tmp_path}/y.pfm",
        "problem.sigma=0.01",
        f"io.output={tmp_path}/out.pfm",
        "solver.max_steps=30",
    )
    assert code == 0
    out = load_image(tmp_path / "out.pfm").data
    assert np.max(np.abs(out - gt)) <= 1e-6


def test_train_command_smoke(tmp_path, capsys):
    from lirls.image import save_pfm

    dataset = tmp_path / "data"
    dataset.mkdir()
    for i in range(2):
        save_pfm(dataset / f"im{i}.pfm", smooth_image((3, 28, 28), 60 + i))
    code = run_cli(
        "train",
        f"train.dataset={dataset}",
        f"train.out={tmp_path}/run",
        "train.epochs=1",
        "train.batches_per_epoch=1",
        "train.batch=1",
        "train.crop=16",
        "train.kernel_size=5",
        "train.num_filters=4",
        "train.val_samples=1",
        "train.lr=0.0",
    )
    assert code == 0
    assert (tmp_path / "run" / "train_log.csv").exists()
    assert "checkpoint=" in capsys.readouterr().out


def test_diagnose_command(deblur_files, capsys):
    code = run_cli(
        "diagnose",
        "diag.task=deblur",
        f"io.input={deblur_files['y']}",
        f"io.kernel={deblur_files['kernel']}",
        "problem.sigma=0.01",
        "prior.filter_scale=0.25",
        "solver.max_steps=60",
        "solver.criterion=1e-4",
        "diag.lanczos=40",
    )
    out = capsys.readouterr().out
    assert "adjoint_defect_forward=" in out
    assert "descent_violations=0" in out
    assert "nu_ub" in out
    assert code == 0


def test_diagnose_broken_adjoint_detected(deblur_files, tmp_path, capsys):
    # an asymmetric kernel, otherwise transposing it would be a no-op
    rng = np.random.default_rng(56)
    kernel = rng.random((5, 5))
    kernel /= kernel.sum()
    shape = (3, 48, 48)
    op = BlurOperator(kernel, shape)
    y = op.apply(smooth_image(shape, 57))
    save_image(y, tmp_path / "y.pfm")
    save_kernel(tmp_path / "k.txt", kernel)
    code = run_cli(
        "diagnose",
        "diag.task=deblur",
        f"io.input={tmp_path}/y.pfm",
        f"io.kernel={tmp_path}/k.txt",
        "problem.sigma=0.01",
        "diag.break_adjoint=true",
        "solver.max_steps=5",
    )
    out = capsys.readouterr().out
    defect = float(out.split("adjoint_defect_forward=")[1].splitlines()[0])
    assert defect > 1e-3
    assert code == 2
