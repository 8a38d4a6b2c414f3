"""Desk-scale bilevel training of the prior parameters.

Each sample degrades a random crop of a dataset image, runs the
reconstruction to its fixed point, and backpropagates the negative-PSNR loss
through the fixed point with one adjoint solve per sample. Parameters follow
Adam with the AMSGrad correction. Sample generation is a pure function of
(config seed, epoch, batch, index), so training is bit-reproducible and
checkpoint resume continues the exact same trajectory.

When the weight vector is learnable the filters must stay frozen (and vice
versa): a shared rescaling of the two cancels inside the reweighted system
matrix, so learning both is unidentifiable and numerically unstable.
"""

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DivergenceError, FormatError, NonConvergenceError
from .image import load_image
from .implicit import implicit_loss_grad, neg_psnr_loss
from .irls import Problem, bilinear_demosaick, irls_solve, training_limits, wiener_init
from .operators import BlurOperator, CfaOperator, FilterBank, SrOperator
from .priors import PriorSpec, exponent_from_raw, exponent_grad_wrt_raw, raw_from_exponent

__all__ = [
    "TrainConfig",
    "TrainableParams",
    "OptimizerState",
    "DegradationSample",
    "synth_kernel",
    "make_sample",
    "adam_amsgrad_step",
    "init_params",
    "materialize",
    "build_sample_problem",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"LIRLSCK1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Desk-scale defaults; paper-scale values (crop 64, batch 8, 100 epochs
    of 500 batches, 74 filters of 3x5x5) remain reachable through the same
    fields."""

    task: str = "deblur"
    family: str = "sparse"
    crop: int = 32
    batch: int = 4
    epochs: int = 30
    batches_per_epoch: int = 4
    lr: float = 5e-3
    lr_decay: float = 0.98
    noise_range: tuple = (0.005, 0.01)
    seed: int = 0
    num_filters: int = 8
    filter_size: int = 3
    filter_init_scale: float = 0.3
    kernel_kind: str = "gaussian"
    kernel_size: int = 7
    sr_scale: int = 2
    gamma: float = 1e-4
    p_init: float = 0.65
    learn_filters: bool = True
    learn_weights: bool = False
    learn_p: bool = True
    val_samples: int = 8
    max_skip_fraction: float = 0.2
    forward_max_steps: int = 400
    channels: int = 3

    def __post_init__(self):
        for name in ("crop", "batch", "epochs", "batches_per_epoch", "num_filters", "val_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("bad learning-rate settings")
        lo, hi = self.noise_range
        if not (0.0 <= lo <= hi <= 0.03):
            raise ValueError("noise_range must lie within [0, 0.03]")
        if self.task not in ("deblur", "sr", "demosaick"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.family not in ("sparse", "low_rank"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.learn_filters and self.learn_weights:
            raise ValueError(
                "filters and weights cannot both be trainable: a joint rescaling "
                "cancels in the system matrix, making the pair unidentifiable"
            )
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def trainable(self):
        names = []
        if self.learn_filters:
            names.append("filters")
        if self.learn_weights:
            names.append("weights")
        if self.learn_p:
            names.append("p")
        return tuple(names)


@dataclass
class TrainableParams:
    """Raw parameter storage; `materialize` maps it to a bank and prior."""

    filters: np.ndarray
    w_raw: np.ndarray
    p_raw: float


@dataclass
class OptimizerState:
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    second_max: dict = field(default_factory=dict)


@dataclass
class DegradationSample:
    ground_truth: np.ndarray
    observation: np.ndarray
    kernel: Optional[np.ndarray]
    sigma_n: float
    task: str
    seed: int


# ---------------------------------------------------------------------------
# Synthetic degradations.
# ---------------------------------------------------------------------------


def synth_kernel(kind, size, seed, sigma=None):
    """Random normalized blur kernel: an isotropic Gaussian or a rasterized
    random-walk motion trace (bilinear splatting, light Gaussian smoothing)."""
    if size % 2 == 0 or size < 3:
        raise ValueError("kernel size must be odd and >= 3")
    rng = np.random.default_rng(seed)
    if kind == "delta":
        kernel = np.zeros((size, size))
        kernel[(size - 1) // 2, (size - 1) // 2] = 1.0
        return kernel
    if kind == "gaussian":
        if sigma is None:
            sigma = rng.uniform(size / 8.0, size / 3.0)
        r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
        g = np.exp(-(r**2) / (2.0 * max(sigma, 1e-8) ** 2))
        kernel = np.outer(g, g)
    elif kind == "motion":
        kernel = np.zeros((size, size))
        pos = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
        vel = rng.uniform(-1.0, 1.0, 2)
        steps = 4 * size
        for _ in range(steps):
            vel = 0.8 * vel + 0.4 * rng.uniform(-1.0, 1.0, 2)
            nrm = np.linalg.norm(vel)
            if nrm > 1.0:
                vel /= nrm
            pos = np.clip(pos + 0.5 * vel, 0.0, size - 1.001)
            i0, j0 = int(pos[0]), int(pos[1])
            fi, fj = pos[0] - i0, pos[1] - j0
            kernel[i0, j0] += (1 - fi) * (1 - fj)
            kernel[min(i0 + 1, size - 1), j0] += fi * (1 - fj)
            kernel[i0, min(j0 + 1, size - 1)] += (1 - fi) * fj
            kernel[min(i0 + 1, size - 1), min(j0 + 1, size - 1)] += fi * fj
        r = np.arange(-2, 3, dtype=np.float64)
        g = np.exp(-(r**2) / (2 * 0.3**2))
        smooth = np.outer(g, g)
        smooth /= smooth.sum()
        padded = np.pad(kernel, 2, mode="constant")
        from numpy.lib.stride_tricks import sliding_window_view

        kernel = np.einsum("hwab,ab->hw", sliding_window_view(padded, (5, 5)), smooth, optimize=True)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    kernel = np.maximum(kernel, 0.0)
    total = kernel.sum()
    if total <= 0:
        kernel[(size - 1) // 2, (size - 1) // 2] = 1.0
        total = 1.0
    return kernel / total


def _sample_rng(master_seed, *key):
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


def make_sample(image, task, cfg, seed):
    """Degrade one random crop of `image`; pure function of its arguments."""
    rng = np.random.default_rng(seed)
    c, h, w = image.shape
    crop = cfg.crop
    if h < crop or w < crop:
        raise ValueError(f"image {h}x{w} smaller than crop {crop}")
    if task in ("deblur", "sr") and crop < cfg.kernel_size:
        raise ValueError("crop too small for the kernel support")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    gt = image[:, top : top + crop, left : left + crop].copy()
    if rng.random() < 0.5:
        gt = gt[:, :, ::-1].copy()
    if rng.random() < 0.5:
        gt = gt[:, ::-1, :].copy()
    kernel = None
    if task == "deblur":
        kernel = synth_kernel(cfg.kernel_kind, cfg.kernel_size, int(rng.integers(2**31)))
        op = BlurOperator(kernel, gt.shape)
    elif task == "sr":
        kernel = synth_kernel(cfg.kernel_kind, cfg.kernel_size, int(rng.integers(2**31)))
        op = SrOperator(kernel, cfg.sr_scale, gt.shape)
    elif task == "demosaick":
        op = CfaOperator(gt.shape)
    else:
        raise ValueError(f"unknown task {task!r}")
    lo, hi = cfg.noise_range
    sigma = max(float(rng.uniform(lo, hi)), 1e-6)
    noise = sigma * rng.standard_normal(op.out_shape)
    observation = op.apply(gt) + noise
    return DegradationSample(gt, observation, kernel, sigma, task, seed)


# ---------------------------------------------------------------------------
# Parameter mapping.
# ---------------------------------------------------------------------------


def init_params(cfg, seed=None):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    c_in = 1 if cfg.family == "low_rank" else cfg.channels
    filters = cfg.filter_init_scale * rng.standard_normal(
        (cfg.num_filters, c_in, cfg.filter_size, cfg.filter_size)
    )
    w_len = cfg.channels if cfg.family == "low_rank" else cfg.num_filters
    if cfg.family == "low_rank":
        # softplus increments cumsum to ~1.0 each: ascending start near (1, 2, 3, ...)
        w_raw = np.full(w_len, _softplus_inverse(1.0))
    else:
        w_raw = np.full(w_len, _softplus_inverse(1.0))
    p_raw = raw_from_exponent(min(max(cfg.p_init, 0.41), 0.89)) if cfg.learn_p else 0.0
    return TrainableParams(filters, w_raw, p_raw)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inverse(y):
    return float(y + np.log(-np.expm1(-y)))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def materialize(params, cfg):
    """Map raw parameters to (filter coefficients, PriorSpec exponent/weights)."""
    if cfg.learn_p:
        p = exponent_from_raw(params.p_raw)
    else:
        p = cfg.p_init
    if cfg.learn_weights:
        provider = "learned"
        if cfg.family == "low_rank":
            weights = np.cumsum(_softplus(params.w_raw))
        else:
            weights = _softplus(params.w_raw)
    else:
        provider = "fixed"
        weights = np.ones(cfg.channels if cfg.family == "low_rank" else cfg.num_filters)
    return params.filters, p, weights, provider


def chain_to_raw(params, cfg, d_filters, d_weights, d_p):
    """Pull loss gradients back through the raw parameterization."""
    g_filters = d_filters if cfg.learn_filters else np.zeros_like(params.filters)
    if cfg.learn_weights:
        s = _sigmoid(params.w_raw)
        if cfg.family == "low_rank":
            # w_k = sum_{j<=k} softplus(raw_j)
            g_w_raw = np.cumsum(d_weights[::-1])[::-1] * s
        else:
            g_w_raw = d_weights * s
    else:
        g_w_raw = np.zeros_like(params.w_raw)
    g_p_raw = d_p * exponent_grad_wrt_raw(params.p_raw) if cfg.learn_p else 0.0
    return g_filters, g_w_raw, g_p_raw


def build_sample_problem(sample, params, cfg):
    filters, p, weights, provider = materialize(params, cfg)
    mode = "low_rank" if cfg.family == "low_rank" else "sparse"
    bank = FilterBank(filters, sample.ground_truth.shape, mode=mode)
    prior = PriorSpec(cfg.family, p, cfg.gamma, weights, provider=provider)
    if sample.task == "deblur":
        op = BlurOperator(sample.kernel, sample.ground_truth.shape)
    elif sample.task == "sr":
        op = SrOperator(sample.kernel, cfg.sr_scale, sample.ground_truth.shape)
    else:
        op = CfaOperator(sample.ground_truth.shape)
    problem = Problem(op, sample.observation, sample.sigma_n, bank, prior, np.zeros_like(sample.ground_truth))
    if sample.task == "demosaick":
        problem.x0 = bilinear_demosaick(sample.observation, op)
    else:
        problem.x0 = wiener_init(problem)
    return problem


# ---------------------------------------------------------------------------
# Adam + AMSGrad.
# ---------------------------------------------------------------------------


def adam_amsgrad_step(params_dict, grads_dict, state, lr):
    """One AMSGrad update over a dict of arrays; returns the updated dict.

    Bias-corrected first moment; the running maximum of the second moment
    (never decreasing) replaces it in the denominator.
    """
    for name, grad in grads_dict.items():
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"NaN/Inf gradient for parameter {name!r}; step rejected")
    state.step += 1
    t = state.step
    updated = {}
    for name, value in params_dict.items():
        grad = np.asarray(grads_dict[name], dtype=np.float64)
        m = state.first.get(name, np.zeros_like(grad))
        v = state.second.get(name, np.zeros_like(grad))
        vmax = state.second_max.get(name, np.zeros_like(grad))
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * grad
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * grad**2
        vmax = np.maximum(vmax, v)
        state.first[name] = m
        state.second[name] = v
        state.second_max[name] = vmax
        m_hat = m / (1 - ADAM_BETA1**t)
        denom = np.sqrt(vmax) / math.sqrt(1 - ADAM_BETA2**t) + ADAM_EPS
        updated[name] = value - lr * m_hat / denom
    return updated


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary container.
# ---------------------------------------------------------------------------


def _array_manifest(arrays):
    return [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]


def save_checkpoint(path, params, opt_state, epoch, lr, cfg, extra=None):
    arrays = {
        "filters": params.filters,
        "w_raw": params.w_raw,
    }
    for prefix, store in (("m", opt_state.first), ("v", opt_state.second), ("vmax", opt_state.second_max)):
        for name, value in store.items():
            arrays[f"opt_{prefix}_{name}"] = np.asarray(value, dtype=np.float64)
    meta = {
        "version": 1,
        "epoch": epoch,
        "lr": lr,
        "p_raw": params.p_raw,
        "opt_step": opt_state.step,
        "family": cfg.family,
        "task": cfg.task,
        "rng": {"seed": cfg.seed, "epoch": epoch},
        "arrays": _array_manifest(arrays),
    }
    if extra:
        meta.update(extra)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for item in meta["arrays"]:
            f.write(arrays[item["name"]].astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        (blob_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(blob_len).decode("utf-8"))
        arrays = {}
        for item in meta["arrays"]:
            count = int(np.prod(item["shape"])) if item["shape"] else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8")
            if data.size != count:
                raise FormatError(f"{path}: truncated checkpoint payload")
            arrays[item["name"]] = data.reshape(item["shape"]).copy()
    params = TrainableParams(arrays["filters"], arrays["w_raw"], float(meta["p_raw"]))
    opt = OptimizerState(step=int(meta["opt_step"]))
    for key, value in arrays.items():
        if key.startswith("opt_m_"):
            opt.first[key[len("opt_m_") :]] = value
        elif key.startswith("opt_v_"):
            opt.second[key[len("opt_v_") :]] = value
        elif key.startswith("opt_vmax_"):
            opt.second_max[key[len("opt_vmax_") :]] = value
    return params, opt, meta


# ---------------------------------------------------------------------------
# The training loop.
# ---------------------------------------------------------------------------


def _load_dataset(dataset_dir):
    paths = sorted(
        p for p in Path(dataset_dir).iterdir() if p.suffix.lower() in (".png", ".pfm")
    )
    if not paths:
        raise ValueError(f"no images found in {dataset_dir}")
    return [load_image(p).data for p in paths]


def _sample_seed(cfg, epoch, batch, index):
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(epoch, batch, index))
    return int(ss.generate_state(1)[0])


def _val_seed(cfg, index):
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(999983, index))
    return int(ss.generate_state(1)[0])


def _pick_image(images, seed):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    return images[int(rng.integers(len(images)))]


def _run_sample(sample, params, cfg, limits):
    problem = build_sample_problem(sample, params, cfg)
    x_star, state = irls_solve(problem, limits)
    return problem, x_star, state


def _checkpoint_extra(params, cfg):
    """Materialized prior description embedded in checkpoints so inference
    can rebuild the prior without the training configuration."""
    _, p, weights, provider = materialize(params, cfg)
    return {
        "prior": {
            "family": cfg.family,
            "p": p,
            "gamma": cfg.gamma,
            "weights": [float(v) for v in weights],
            "provider": provider,
        }
    }


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    params: TrainableParams
    history: list


def train(dataset_dir, out_dir, cfg, resume_from=None, stop_flag=None):
    """Full bilevel loop; writes per-epoch checkpoints and a CSV log.

    Samples whose forward solve does not converge (or whose gradients turn
    non-finite) are skipped and counted; an epoch with more than
    `max_skip_fraction` skipped samples aborts. An adjoint solve that exits
    at the iteration cap still yields a usable inexact gradient and is only
    counted (`inexact` in the history), not skipped: the backward system is
    near-singular by nature and stochastic steps tolerate the residual
    error. `stop_flag` is polled at batch boundaries for cooperative
    interruption (a checkpoint is flushed before returning).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = _load_dataset(dataset_dir)
    limits = training_limits(max_steps=cfg.forward_max_steps)
    if resume_from is not None:
        params, opt_state, meta = load_checkpoint(resume_from)
        start_epoch = int(meta["epoch"]) + 1
        lr = float(meta["lr"])
    else:
        params = init_params(cfg)
        opt_state = OptimizerState()
        start_epoch = 0
        lr = cfg.lr
    log_path = out_dir / "train_log.csv"
    history = []
    if resume_from is None and log_path.exists():
        log_path.unlink()
    if not log_path.exists():
        log_path.write_text("epoch,train_loss,val_psnr,skipped,wall_s\n")
    latest = out_dir / "checkpoint_latest.ck"
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        epoch_losses = []
        skipped = 0
        inexact = 0
        total = cfg.batches_per_epoch * cfg.batch
        for batch_idx in range(cfg.batches_per_epoch):
            grads_acc = {
                "filters": np.zeros_like(params.filters),
                "w_raw": np.zeros_like(params.w_raw),
                "p_raw": 0.0,
            }
            used = 0
            for i in range(cfg.batch):
                seed = _sample_seed(cfg, epoch, batch_idx, i)
                sample = make_sample(_pick_image(images, seed), cfg.task, cfg, seed)
                try:
                    problem, x_star, state = _run_sample(sample, params, cfg, limits)
                    if not state.converged:
                        skipped += 1
                        continue
                    loss, _ = neg_psnr_loss(x_star, sample.ground_truth)
                    bundle = implicit_loss_grad(
                        problem,
                        x_star,
                        lambda x: neg_psnr_loss(x, sample.ground_truth)[1],
                        trainable=cfg.trainable,
                    )
                    if bundle.adjoint_report is not None and not bundle.adjoint_report.converged:
                        inexact += 1
                except (NonConvergenceError, DivergenceError):
                    skipped += 1
                    continue
                g_f, g_w, g_p = chain_to_raw(params, cfg, bundle.d_filters, bundle.d_weights, bundle.d_p)
                grads_acc["filters"] += g_f
                grads_acc["w_raw"] += g_w
                grads_acc["p_raw"] += g_p
                epoch_losses.append(loss)
                used += 1
            if used > 0:
                for key in grads_acc:
                    grads_acc[key] = grads_acc[key] / used
                updated = adam_amsgrad_step(
                    {"filters": params.filters, "w_raw": params.w_raw, "p_raw": np.float64(params.p_raw)},
                    grads_acc,
                    opt_state,
                    lr,
                )
                params = TrainableParams(updated["filters"], updated["w_raw"], float(updated["p_raw"]))
            if stop_flag is not None and stop_flag():
                save_checkpoint(latest, params, opt_state, epoch - 1, lr, cfg, extra=_checkpoint_extra(params, cfg))
                return TrainResult(latest, log_path, params, history)
        if skipped > cfg.max_skip_fraction * total:
            raise RuntimeError(
                f"epoch {epoch}: {skipped}/{total} samples skipped (> {cfg.max_skip_fraction:.0%}); aborting"
            )
        val_psnr = _validate(images, params, cfg, limits)
        wall = time.perf_counter() - t0
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan
        with open(log_path, "a") as f:
            f.write(f"{epoch},{train_loss!r},{val_psnr!r},{skipped},{wall:.3f}\n")
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_psnr": val_psnr,
                "skipped": skipped,
                "inexact": inexact,
            }
        )
        extra = _checkpoint_extra(params, cfg)
        save_checkpoint(out_dir / f"checkpoint_epoch{epoch:04d}.ck", params, opt_state, epoch, lr * cfg.lr_decay, cfg, extra=extra)
        save_checkpoint(latest, params, opt_state, epoch, lr * cfg.lr_decay, cfg, extra=extra)
        lr *= cfg.lr_decay
    return TrainResult(latest, log_path, params, history)


def _validate(images, params, cfg, limits):
    """Mean PSNR over the fixed validation draws (identical every epoch)."""
    scores = []
    for i in range(cfg.val_samples):
        seed = _val_seed(cfg, i)
        sample = make_sample(_pick_image(images, seed), cfg.task, cfg, seed)
        try:
            _, x_star, state = _run_sample(sample, params, cfg, limits)
        except (NonConvergenceError, DivergenceError):
            continue
        loss, _ = neg_psnr_loss(x_star, sample.ground_truth)
        scores.append(-loss)
    return float(np.mean(scores)) if scores else math.nan
