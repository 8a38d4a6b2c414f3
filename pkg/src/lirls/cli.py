"""Command-line interface.

Grammar:  lirls <deblur|sr|demosaick|train|diagnose> [--config FILE] [key=value]...

Options come from a flat key=value text file ('#' comments allowed) merged
with key=value overrides on the command line; unknown keys are rejected and
the fully resolved configuration is logged to stderr before the run.

Exit codes: 0 success, 1 usage or IO error, 2 numerical non-convergence.
"""

import logging
import os
import signal
import sys
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    DivergenceError,
    FormatError,
    MajorizerViolationError,
    StepError,
)
from .image import load_image, metric_report, save_image
from .irls import (
    IrlsLimits,
    Problem,
    bilinear_demosaick,
    export_trace_csv,
    format_rate_report,
    irls_solve,
    objective_gradient,
    rate_bound,
    wiener_init,
)
from .operators import (
    BlurOperator,
    CfaOperator,
    FilterBank,
    SrOperator,
    adjoint_check,
    builtin_filter_bank,
    load_filter_bank,
    load_kernel,
)
from .priors import PriorSpec
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger("lirls")

COMMANDS = ("deblur", "sr", "demosaick", "train", "diagnose")


def _bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text):
    return None if str(text).strip().lower() in ("", "none") else str(text)


# key -> (parser, default). None default means "required if used by command".
KEY_REGISTRY = {
    "io.input": (_opt_str, None),
    "io.kernel": (_opt_str, None),
    "io.output": (_opt_str, None),
    "io.gt": (_opt_str, None),
    "io.trace": (_opt_str, None),
    "io.peak": (float, 1.0),
    "io.png_bits": (int, 8),
    "problem.sigma": (float, None),
    "problem.delta": (float, 8e-4),
    "prior.family": (str, "sparse"),
    "prior.p": (float, 1.0),
    "prior.gamma": (float, 1e-4),
    "prior.w": (str, "1.0"),
    "prior.filters": (str, "grad"),
    "prior.filter_scale": (float, 1.0),
    "prior.weight_map": (_opt_str, None),
    "prior.checkpoint": (_opt_str, None),
    "solver.max_steps": (int, 15),
    "solver.inner_max": (int, 50),
    "solver.inner_tol": (float, 1e-6),
    "solver.criterion": (float, 1e-4),
    "solver.consecutive": (int, 3),
    "sr.scale": (int, 2),
    "train.dataset": (_opt_str, None),
    "train.out": (_opt_str, None),
    "train.resume": (_opt_str, None),
    "train.task": (str, "deblur"),
    "train.family": (str, "sparse"),
    "train.crop": (int, 32),
    "train.batch": (int, 4),
    "train.epochs": (int, 30),
    "train.batches_per_epoch": (int, 4),
    "train.lr": (float, 5e-3),
    "train.lr_decay": (float, 0.98),
    "train.noise_lo": (float, 0.005),
    "train.noise_hi": (float, 0.01),
    "train.seed": (int, 0),
    "train.num_filters": (int, 8),
    "train.filter_size": (int, 3),
    "train.filter_init_scale": (float, 1.0),
    "train.kernel_kind": (str, "gaussian"),
    "train.kernel_size": (int, 7),
    "train.sr_scale": (int, 2),
    "train.gamma": (float, 1e-3),
    "train.p_init": (float, 0.65),
    "train.learn_filters": (_bool, True),
    "train.learn_weights": (_bool, False),
    "train.learn_p": (_bool, True),
    "train.val_samples": (int, 8),
    "diag.task": (str, "deblur"),
    "diag.break_adjoint": (_bool, False),
    "diag.trials": (int, 100),
    "diag.lanczos": (int, 120),
    "run.threads": (int, 0),
}


class UsageError(Exception):
    pass


def parse_config(pairs, config_file=None):
    values = {key: default for key, (_, default) in KEY_REGISTRY.items()}
    items = []
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        for line_no, line in enumerate(path.read_text().splitlines(), 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{line_no}: expected key=value, got {line!r}")
            items.append(tuple(part.strip() for part in stripped.split("=", 1)))
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"expected key=value, got {pair!r}")
        items.append(tuple(part.strip() for part in pair.split("=", 1)))
    for key, raw in items:
        if key not in KEY_REGISTRY:
            raise UsageError(f"unknown configuration key {key!r}")
        parser, _ = KEY_REGISTRY[key]
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    return values


def _log_resolved(command, values):
    log.info("command: %s", command)
    for key in sorted(values):
        if values[key] is not None:
            log.info("config: %s=%s", key, values[key])


def _require(values, key):
    if values[key] is None:
        raise UsageError(f"missing required key {key}")
    return values[key]


def _parse_weight_list(text, size):
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        return np.full(size, parts[0])
    if len(parts) != size:
        raise UsageError(f"prior.w needs 1 or {size} values, got {len(parts)}")
    return np.array(parts)


def _load_weight_map(path, planes):
    from .image import load_pfm

    arr = load_pfm(path)
    if arr.shape[0] != 1 or arr.shape[1] % planes != 0:
        raise UsageError(
            f"weight map must be a grayscale PFM with height divisible by {planes}"
        )
    hv = arr.shape[1] // planes
    return arr[0].reshape(planes, hv, arr.shape[2])


def build_prior(values, image_shape):
    """FilterBank and PriorSpec from a checkpoint or the inline textual spec."""
    checkpoint = values["prior.checkpoint"]
    if checkpoint is not None:
        params, _, meta = load_checkpoint(checkpoint)
        if "prior" not in meta:
            raise UsageError(f"{checkpoint}: checkpoint lacks prior metadata")
        info = meta["prior"]
        mode = "low_rank" if info["family"] == "low_rank" else "sparse"
        bank = FilterBank(params.filters, image_shape, mode=mode)
        prior = PriorSpec(
            info["family"],
            float(info["p"]),
            float(info["gamma"]),
            np.array(info["weights"], dtype=np.float64),
            provider=info["provider"],
        )
        return bank, prior
    family = values["prior.family"]
    mode = "low_rank" if family == "low_rank" else "sparse"
    source = values["prior.filters"]
    if source.endswith(".fb") or "/" in source or source.endswith(".bin"):
        bank = load_filter_bank(source, in_shape=image_shape, mode=mode)
    else:
        coeffs = builtin_filter_bank(
            source, image_shape[0], mode=mode, scale=values["prior.filter_scale"]
        )
        bank = FilterBank(coeffs, image_shape, mode=mode)
    size = bank.num_filters if family == "sparse" else image_shape[0]
    weights = _parse_weight_list(values["prior.w"], size)
    weight_map = None
    if values["prior.weight_map"] is not None:
        weight_map = _load_weight_map(values["prior.weight_map"], size)
    provider = "map" if weight_map is not None else "fixed"
    prior = PriorSpec(
        family,
        values["prior.p"],
        values["prior.gamma"],
        weights,
        weight_map=weight_map,
        provider=provider,
    )
    return bank, prior


def _limits_from(values):
    return IrlsLimits(
        max_steps=values["solver.max_steps"],
        inner_max=values["solver.inner_max"],
        inner_tol=values["solver.inner_tol"],
        criterion=values["solver.criterion"],
        consecutive=values["solver.consecutive"],
    )


def build_reconstruction_problem(task, values):
    y = load_image(_require(values, "io.input")).data
    sigma = _require(values, "problem.sigma")
    if task == "demosaick":
        if y.shape[0] != 1:
            raise UsageError("demosaick expects a single-channel mosaic input")
        shape = (3, y.shape[1], y.shape[2])
        op = CfaOperator(shape)
        kernel = None
    else:
        kernel = load_kernel(_require(values, "io.kernel"))
        if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise UsageError("kernel must be odd-sized")
        c = y.shape[0]
        if task == "deblur":
            shape = (c, y.shape[1] + kernel.shape[0] - 1, y.shape[2] + kernel.shape[1] - 1)
            op = BlurOperator(kernel, shape)
        else:
            s = values["sr.scale"]
            shape = (c, y.shape[1] * s + kernel.shape[0] - 1, y.shape[2] * s + kernel.shape[1] - 1)
            op = SrOperator(kernel, s, shape)
            if op.out_shape != y.shape:
                raise UsageError(
                    f"input shape {y.shape} does not match the operator output {op.out_shape}"
                )
    bank, prior = build_prior(values, shape)
    problem = Problem(op, y, sigma, bank, prior, np.zeros(shape), delta=values["problem.delta"])
    problem.x0 = bilinear_demosaick(y, op) if task == "demosaick" else wiener_init(problem)
    return problem


def cmd_reconstruct(task, values):
    problem = build_reconstruction_problem(task, values)
    limits = _limits_from(values)
    x_star, state = irls_solve(problem, limits)
    out_path = Path(_require(values, "io.output"))
    save_image(x_star, out_path, png_bits=values["io.png_bits"])
    trace_path = values["io.trace"] or str(out_path.with_suffix(".trace.csv"))
    export_trace_csv(state, trace_path)
    log.info("wrote %s and %s (%d steps, converged=%s)", out_path, trace_path, state.k, state.converged)
    if values["io.gt"] is not None:
        gt = load_image(values["io.gt"]).data
        report = metric_report(x_star, gt, peak=values["io.peak"])
        print(f"psnr_db={report.psnr:.4f}")
        print(f"ssim={report.ssim:.6f}")
    return 0 if state.converged else 2


def cmd_train(values, stop_flag=None):
    noise = (values["train.noise_lo"], values["train.noise_hi"])
    cfg = TrainConfig(
        task=values["train.task"],
        family=values["train.family"],
        crop=values["train.crop"],
        batch=values["train.batch"],
        epochs=values["train.epochs"],
        batches_per_epoch=values["train.batches_per_epoch"],
        lr=values["train.lr"],
        lr_decay=values["train.lr_decay"],
        noise_range=noise,
        seed=values["train.seed"],
        num_filters=values["train.num_filters"],
        filter_size=values["train.filter_size"],
        filter_init_scale=values["train.filter_init_scale"],
        kernel_kind=values["train.kernel_kind"],
        kernel_size=values["train.kernel_size"],
        sr_scale=values["train.sr_scale"],
        gamma=values["train.gamma"],
        p_init=values["train.p_init"],
        learn_filters=values["train.learn_filters"],
        learn_weights=values["train.learn_weights"],
        learn_p=values["train.learn_p"],
        val_samples=values["train.val_samples"],
    )
    result = train(
        _require(values, "train.dataset"),
        _require(values, "train.out"),
        cfg,
        resume_from=values["train.resume"],
        stop_flag=stop_flag,
    )
    log.info("training finished; checkpoint %s", result.checkpoint_path)
    print(f"checkpoint={result.checkpoint_path}")
    return 0


class _AdjointMutation(BlurOperator):
    """Deliberately broken adjoint (transposed kernel) for the diagnostics
    self-test."""

    def _adjoint(self, u):
        from .operators import _corr_valid, _pad_spatial

        kh, kw = self.kernel.shape
        return _corr_valid(_pad_spatial(u, kh - 1, kw - 1), self.kernel.T)


def cmd_diagnose(values):
    task = values["diag.task"]
    problem = build_reconstruction_problem(task, values)
    if values["diag.break_adjoint"]:
        if not isinstance(problem.forward, BlurOperator):
            raise UsageError("diag.break_adjoint needs a blur-based task")
        problem.forward = _AdjointMutation(problem.forward.kernel, problem.forward.in_shape)
    trials = values["diag.trials"]
    defect_a = adjoint_check(problem.forward, trials=trials, seed=0)
    defect_g = adjoint_check(problem.bank, trials=trials, seed=1)
    print(f"adjoint_defect_forward={defect_a:.6e}")
    print(f"adjoint_defect_bank={defect_g:.6e}")
    adjoint_broken = max(defect_a, defect_g) > 1e-3
    limits = _limits_from(values)
    try:
        x_star, state = irls_solve(problem, limits)
    except (MajorizerViolationError, StepError, DivergenceError) as exc:
        log.error("solve failed during diagnostics: %s", exc)
        print("solve_failed=1")
        return 2
    diffs = np.diff(np.array(state.objective_trace))
    violations = int(np.sum(diffs > 1e-10))
    grad_norm = float(np.linalg.norm(objective_gradient(problem, x_star)))
    stationarity = grad_norm * problem.sigma_n**2 / problem.rhs_norm
    print(f"steps={state.k}")
    print(f"converged={state.converged}")
    print(f"descent_violations={violations}")
    print(f"stationarity={stationarity:.6e}")
    if state.converged:
        report = rate_bound(problem, state, limits, lanczos_iterations=values["diag.lanczos"])
        print(format_rate_report(report))
    if adjoint_broken or not state.converged or violations > 0:
        return 2
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv or argv[0] in ("-h", "--help"):
            print(__doc__)
            return 0
        command = argv[0]
        if command not in COMMANDS:
            raise UsageError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
        rest = argv[1:]
        config_file = None
        threads = None
        pairs = []
        i = 0
        while i < len(rest):
            arg = rest[i]
            if arg == "--config":
                if i + 1 >= len(rest):
                    raise UsageError("--config needs a file argument")
                config_file = rest[i + 1]
                i += 2
            elif arg == "--threads":
                if i + 1 >= len(rest):
                    raise UsageError("--threads needs a number")
                threads = rest[i + 1]
                i += 2
            else:
                pairs.append(arg)
                i += 1
        if threads is None:
            threads = os.environ.get("LIRLS_THREADS", "0")
        pairs.append(f"run.threads={int(threads)}")
        values = parse_config(pairs, config_file)
        _log_resolved(command, values)
        if command == "train":
            interrupted = {"flag": False}

            def on_sigint(signum, frame):
                interrupted["flag"] = True
                log.warning("interrupt received; flushing checkpoint at the next batch boundary")

            previous = signal.signal(signal.SIGINT, on_sigint)
            try:
                return cmd_train(values, stop_flag=lambda: interrupted["flag"])
            finally:
                signal.signal(signal.SIGINT, previous)
        if command == "diagnose":
            return cmd_diagnose(values)
        return cmd_reconstruct(command, values)
    except UsageError as exc:
        log.error("%s", exc)
        return 1
    except (FileNotFoundError, FormatError, DimensionError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    except DivergenceError as exc:
        log.error("numerical failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
