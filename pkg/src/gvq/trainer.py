"""Adam optimizer, the epoch loop, and evaluation.

Three codebook update regimes share one loop:

* ``vanilla`` : a free (n, d) code matrix; each code is its own group and
  only rows actually assigned in a step are touched (sparse Adam: moments
  and parameters of unassigned rows stay bit-identical that step).
* ``joint``   : one group covering the whole codebook; every step updates
  the single shared projector.
* ``group``   : k uniform groups, each with its own frozen core and
  trainable projector, updated independently from its own assignments.

The trainer is deterministic given (config, dataset): all randomness comes
from streams derived from the master seed, and checkpoints capture enough
state (including the in-flight epoch permutation) to resume bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis
from .autoencoder import (
    AE_TENSOR_NAMES,
    AutoencoderParams,
    autoencoder_backward,
    decoder_forward,
    encoder_forward,
    init_autoencoder_params,
)
from .codebook import (
    GroupedCodebook,
    GroupParams,
    ProjectorVariant,
    init_projector_params,
    projector_param_names,
)
from .errors import ConfigError, NumericError
from .numerics import (
    DEFAULT_DTYPE,
    STREAM_AE_INIT,
    STREAM_CORE_INIT,
    STREAM_PROJ_INIT,
    STREAM_SHUFFLE,
    RngStream,
)
from .quantizer import (
    LossBreakdown,
    LossWeights,
    backward_codebook,
    codebook_term_code_grads,
    commitment_grad_z,
    quantize_featuremap,
    vq_losses,
)

TRAIN_MODES = ("vanilla", "joint", "group")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), step=0)


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    cfg: OptimizerConfig,
    name: str = "",
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; pure, returns fresh arrays."""
    if param.shape != grad.shape:
        raise ConfigError(f"param/grad shapes differ for {name or 'tensor'}: {param.shape} vs {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for tensor {name or '<unnamed>'}")
    dt = param.dtype.type
    t = state.step + 1
    m = dt(cfg.beta1) * state.m + dt(1.0 - cfg.beta1) * grad
    v = dt(cfg.beta2) * state.v + dt(1.0 - cfg.beta2) * (grad * grad)
    m_hat = m / dt(1.0 - cfg.beta1**t)
    v_hat = v / dt(1.0 - cfg.beta2**t)
    new_param = param - dt(cfg.lr) * m_hat / (np.sqrt(v_hat) + dt(cfg.eps))
    return new_param, AdamState(m=m, v=v, step=t)


def adam_step_rows(
    param: np.ndarray,
    grad: np.ndarray,
    rows: np.ndarray,
    state: AdamState,
    cfg: OptimizerConfig,
    name: str = "",
) -> tuple[np.ndarray, AdamState]:
    """Adam restricted to the given rows; all other rows (parameters and
    moments) are bit-identical to the input. Bias correction uses the
    shared global step."""
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for tensor {name or '<unnamed>'}")
    dt = param.dtype.type
    t = state.step + 1
    new_param = param.copy()
    m = state.m.copy()
    v = state.v.copy()
    g = grad[rows]
    m[rows] = dt(cfg.beta1) * state.m[rows] + dt(1.0 - cfg.beta1) * g
    v[rows] = dt(cfg.beta2) * state.v[rows] + dt(1.0 - cfg.beta2) * (g * g)
    m_hat = m[rows] / dt(1.0 - cfg.beta1**t)
    v_hat = v[rows] / dt(1.0 - cfg.beta2**t)
    new_param[rows] = param[rows] - dt(cfg.lr) * m_hat / (np.sqrt(v_hat) + dt(cfg.eps))
    return new_param, AdamState(m=m, v=v, step=t)


@dataclass
class VanillaCodebook:
    """Directly trainable code matrix; behaves as n groups of one code."""

    codes: np.ndarray  # (n, d)
    version: int = 0

    @property
    def n(self) -> int:
        return self.codes.shape[0]

    @property
    def d(self) -> int:
        return self.codes.shape[1]

    @property
    def k(self) -> int:
        return self.n

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(self.n + 1, dtype=np.int64)

    def materialize(self) -> np.ndarray:
        return self.codes

    def bump_version(self):
        self.version += 1

    def group_sizes(self) -> list[int]:
        return [1] * self.n

    def named_tensors(self):
        yield "vanilla.codes", self.codes

    def param_items(self):
        yield "vanilla.codes", self.codes


@dataclass
class TrainConfig:
    mode: str = "group"
    k: int = 1
    n: int = 512
    d: int = 32
    r: int = 32
    variant: ProjectorVariant = field(default_factory=ProjectorVariant)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    dataset_path: str | None = None
    eval_count: int = 256
    grad_clip: float | None = None

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {TRAIN_MODES}")
        if self.mode == "joint" and self.k != 1:
            raise ConfigError(f"joint mode is the single-group regime; got k={self.k}")
        if self.mode == "group":
            if self.k < 1:
                raise ConfigError(f"group count must be >= 1, got {self.k}")
            if self.n % self.k != 0:
                raise ConfigError(f"group count must divide codebook size: n={self.n}, k={self.k}")
        if min(self.n, self.d, self.r) < 1:
            raise ConfigError(f"n, d, r must be >= 1, got n={self.n}, d={self.d}, r={self.r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(f"bad schedule: epochs={self.epochs}, batch_size={self.batch_size}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive or null, got {self.grad_clip}")


@dataclass
class EpochMetrics:
    epoch: int
    utilization: float  # distinct codes used over this epoch's assignments / n
    recon: float
    codebook: float
    commit: float
    total: float
    psnr: float
    ssim: float
    group_usage: np.ndarray  # per-group assignment counts for the epoch


@dataclass
class EvalMetrics:
    mse: float
    psnr: float
    ssim: float
    utilization: float
    code_counts: np.ndarray  # (n,)
    group_counts: np.ndarray  # (k,)
    images: int


@dataclass
class Checkpoint:
    """Everything needed to resume training bit-exactly or to evaluate."""

    config: TrainConfig
    ae: AutoencoderParams
    codebook: GroupedCodebook | VanillaCodebook
    adam: dict[str, AdamState]
    step: int
    epoch: int
    batch_pointer: int
    permutation: np.ndarray | None
    rng_shuffle: dict
    format_version: int = 1


@dataclass
class Dataset:
    train: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    eval: np.ndarray  # (M, H, W, 3)


def build_codebook(cfg: TrainConfig, dtype=DEFAULT_DTYPE) -> GroupedCodebook | VanillaCodebook:
    """Construct the initial codebook for a config; cores come from the
    core-init stream and projector weights from the projector-init stream."""
    core_rng = RngStream(cfg.seed, STREAM_CORE_INIT)
    if cfg.mode == "vanilla":
        return VanillaCodebook(codes=core_rng.standard_normal((cfg.n, cfg.d), dtype=dtype))
    proj_rng = RngStream(cfg.seed, STREAM_PROJ_INIT)
    k = 1 if cfg.mode == "joint" else cfg.k
    size = cfg.n // k
    groups = []
    for _ in range(k):
        core = core_rng.standard_normal((size, cfg.r), dtype=dtype)
        params = init_projector_params(cfg.variant, cfg.r, cfg.d, proj_rng, dtype=dtype)
        groups.append(GroupParams(core=core, params=params))
    return GroupedCodebook(d=cfg.d, variant=cfg.variant, groups=groups)


def _reconstruct_batch(ae: AutoencoderParams, codebook, batch: np.ndarray):
    """Forward pass only: images -> features -> quantize -> images."""
    z4, _ = encoder_forward(ae, batch)
    B, h, w, d = z4.shape
    result = quantize_featuremap(z4.reshape(B * h, w, d), codebook)
    out, _ = decoder_forward(ae, result.straight_through.reshape(B, h, w, d))
    return out, result


class Trainer:
    """Owns parameters, optimizer state, and the data order for one run."""

    def __init__(self, cfg: TrainConfig, data: Dataset):
        if len(data.train) < 1:
            raise ConfigError("training split is empty")
        self.cfg = cfg
        self.data = data
        self.ae = init_autoencoder_params(cfg.d, RngStream(cfg.seed, STREAM_AE_INIT))
        self.codebook = build_codebook(cfg)
        self.rng_shuffle = RngStream(cfg.seed, STREAM_SHUFFLE)
        self.adam: dict[str, AdamState] = {}
        for name in AE_TENSOR_NAMES:
            self.adam[name] = AdamState.zeros_like(self.ae.tensors[name])
        for name, tensor in self.codebook.param_items():
            self.adam[name] = AdamState.zeros_like(tensor)
        self.step = 0
        self.epoch = 0
        self.perm: np.ndarray | None = None
        self.ptr = 0

    # -- single optimizer step -------------------------------------------

    def train_step(self, batch: np.ndarray):
        cfg = self.cfg
        z4, enc_cache = encoder_forward(self.ae, batch)
        B, h, w, d = z4.shape
        Z3 = z4.reshape(B * h, w, d)
        result = quantize_featuremap(Z3, self.codebook)
        q4 = result.straight_through.reshape(B, h, w, d)
        i_hat, dec_cache = decoder_forward(self.ae, q4)
        losses = vq_losses(batch, i_hat, Z3, result, cfg.weights)
        if not np.isfinite(losses.total):
            raise NumericError(f"non-finite loss at epoch {self.epoch}, step {self.step}: {losses}")

        d_image_hat = (i_hat - batch) * batch.dtype.type(2.0 / batch.size)
        d_z_direct = commitment_grad_z(result, Z3, cfg.weights).reshape(B, h, w, d)
        ae_grads, _ = autoencoder_backward(self.ae, enc_cache, dec_cache, d_image_hat, d_z_direct)

        if isinstance(self.codebook, VanillaCodebook):
            code_grads = codebook_term_code_grads(result, Z3, self.codebook.n, cfg.weights)
            assigned = np.unique(result.indices.reshape(-1))
            cb_grads: dict[str, np.ndarray] = {}
        else:
            code_grads = None
            assigned = None
            cb_grads = backward_codebook(result, Z3, self.codebook, cfg.weights)

        if cfg.grad_clip is not None:
            self._clip_grads(ae_grads, cb_grads, code_grads)

        opt = cfg.optimizer
        for name in AE_TENSOR_NAMES:
            self.ae.tensors[name], self.adam[name] = adam_step(
                self.ae.tensors[name], ae_grads[name], self.adam[name], opt, name=name
            )
        if isinstance(self.codebook, VanillaCodebook):
            self.codebook.codes, self.adam["vanilla.codes"] = adam_step_rows(
                self.codebook.codes, code_grads, assigned, self.adam["vanilla.codes"], opt, name="vanilla.codes"
            )
        else:
            for j, g in enumerate(self.codebook.groups):
                for key in projector_param_names(self.codebook.variant):
                    name = f"group{j}.{key}"
                    g.params[key], self.adam[name] = adam_step(
                        g.params[key], cb_grads[name], self.adam[name], opt, name=name
                    )
        self.codebook.bump_version()
        self.step += 1
        return losses, result

    def _clip_grads(self, ae_grads, cb_grads, code_grads):
        sq = 0.0
        for g in ae_grads.values():
            sq += float(np.sum(g.astype(np.float64) ** 2))
        for g in cb_grads.values():
            sq += float(np.sum(g.astype(np.float64) ** 2))
        if code_grads is not None:
            sq += float(np.sum(code_grads.astype(np.float64) ** 2))
        norm = np.sqrt(sq)
        if norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / norm
            for g in ae_grads.values():
                g *= g.dtype.type(scale)
            for g in cb_grads.values():
                g *= g.dtype.type(scale)
            if code_grads is not None:
                code_grads *= code_grads.dtype.type(scale)

    # -- epoch loop --------------------------------------------------------

    def _next_batch(self) -> np.ndarray:
        if self.perm is None:
            self.perm = self.rng_shuffle.permutation(len(self.data.train))
            self.ptr = 0
        idx = self.perm[self.ptr : self.ptr + self.cfg.batch_size]
        batch = self.data.train[idx]
        self.ptr += len(idx)
        if self.ptr >= len(self.perm):
            self.perm = None
            self.ptr = 0
            self.epoch += 1
        return batch

    def train_steps(self, count: int):
        """Run a fixed number of optimizer steps (tests and resume checks)."""
        out = []
        for _ in range(count):
            out.append(self.train_step(self._next_batch()))
        return out

    def run_epoch(self) -> EpochMetrics:
        cfg = self.cfg
        n = self.codebook.n
        epoch_index = self.epoch
        code_counts = np.zeros(n, dtype=np.int64)
        group_counts = np.zeros(self.codebook.k, dtype=np.int64)
        recon_sum = 0.0
        gap_sum = 0.0
        img_elems = 0
        z_elems = 0
        while self.epoch == epoch_index:
            batch = self._next_batch()
            losses, result = self.train_step(batch)
            code_counts += np.bincount(result.indices.reshape(-1), minlength=n)
            group_counts += result.group_counts
            recon_sum += losses.recon * batch.size
            gap_sum += losses.codebook_term * result.quantized.size
            img_elems += batch.size
            z_elems += result.quantized.size
        recon = recon_sum / img_elems
        gap = gap_sum / z_elems
        ev = _eval_pass(self.ae, self.codebook, self.data.eval, cfg.batch_size)
        return EpochMetrics(
            epoch=epoch_index,
            utilization=analysis.utilization(code_counts, n),
            recon=recon,
            codebook=gap,
            commit=gap,
            total=recon + cfg.weights.beta * gap + cfg.weights.gamma * gap,
            psnr=ev.psnr,
            ssim=ev.ssim,
            group_usage=group_counts,
        )

    # -- persistence -------------------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        ae = AutoencoderParams(
            tensors={k: v.copy() for k, v in self.ae.tensors.items()}, d=self.ae.d, f=self.ae.f
        )
        if isinstance(self.codebook, VanillaCodebook):
            cb: GroupedCodebook | VanillaCodebook = VanillaCodebook(
                codes=self.codebook.codes.copy(), version=self.codebook.version
            )
        else:
            groups = [
                GroupParams(core=g.core.copy(), params={k: v.copy() for k, v in g.params.items()})
                for g in self.codebook.groups
            ]
            cb = GroupedCodebook(
                d=self.codebook.d,
                variant=self.codebook.variant,
                groups=groups,
                version=self.codebook.version,
            )
        adam = {k: AdamState(m=s.m.copy(), v=s.v.copy(), step=s.step) for k, s in self.adam.items()}
        return Checkpoint(
            config=replace(self.cfg),
            ae=ae,
            codebook=cb,
            adam=adam,
            step=self.step,
            epoch=self.epoch,
            batch_pointer=self.ptr,
            permutation=None if self.perm is None else self.perm.copy(),
            rng_shuffle=self.rng_shuffle.state_dict(),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, data: Dataset) -> "Trainer":
        tr = cls.__new__(cls)
        tr.cfg = ckpt.config
        tr.data = data
        tr.ae = AutoencoderParams(
            tensors={k: v.copy() for k, v in ckpt.ae.tensors.items()}, d=ckpt.ae.d, f=ckpt.ae.f
        )
        if isinstance(ckpt.codebook, VanillaCodebook):
            tr.codebook = VanillaCodebook(codes=ckpt.codebook.codes.copy(), version=ckpt.codebook.version)
        else:
            groups = [
                GroupParams(core=g.core.copy(), params={k: v.copy() for k, v in g.params.items()})
                for g in ckpt.codebook.groups
            ]
            tr.codebook = GroupedCodebook(
                d=ckpt.codebook.d,
                variant=ckpt.codebook.variant,
                groups=groups,
                version=ckpt.codebook.version,
            )
        tr.adam = {k: AdamState(m=s.m.copy(), v=s.v.copy(), step=s.step) for k, s in ckpt.adam.items()}
        tr.rng_shuffle = RngStream.from_state_dict(ckpt.rng_shuffle)
        tr.step = ckpt.step
        tr.epoch = ckpt.epoch
        tr.perm = None if ckpt.permutation is None else ckpt.permutation.copy()
        tr.ptr = ckpt.batch_pointer
        return tr


def train(cfg: TrainConfig, data: Dataset | None = None) -> tuple[Checkpoint, list[EpochMetrics]]:
    """Full training run; loads the dataset from cfg when none is passed."""
    if data is None:
        if cfg.dataset_path is None:
            raise ConfigError("no dataset: config has no dataset_path and none was passed")
        from .datasets import load_dataset

        data = load_dataset(cfg.dataset_path, cfg.eval_count)
    trainer = Trainer(cfg, data)
    history = [trainer.run_epoch() for _ in range(cfg.epochs)]
    return trainer.to_checkpoint(), history


def _eval_pass(ae: AutoencoderParams, codebook, images: np.ndarray, batch_size: int) -> EvalMetrics:
    n = codebook.n
    code_counts = np.zeros(n, dtype=np.int64)
    group_counts = np.zeros(codebook.k, dtype=np.int64)
    sq_err = 0.0
    elems = 0
    psnrs: list[float] = []
    ssims: list[float] = []
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        out, result = _reconstruct_batch(ae, codebook, batch)
        out = np.clip(out, 0.0, 1.0)
        sq_err += float(np.sum((out.astype(np.float64) - batch) ** 2))
        elems += batch.size
        code_counts += np.bincount(result.indices.reshape(-1), minlength=n)
        group_counts += result.group_counts
        for i in range(len(batch)):
            psnrs.append(analysis.psnr(batch[i], out[i], 1.0))
            ssims.append(analysis.ssim(batch[i], out[i]))
    return EvalMetrics(
        mse=sq_err / elems if elems else float("nan"),
        psnr=float(np.mean(psnrs)) if psnrs else float("nan"),
        ssim=float(np.mean(ssims)) if ssims else float("nan"),
        utilization=analysis.utilization(code_counts, n),
        code_counts=code_counts,
        group_counts=group_counts,
        images=len(images),
    )


def evaluate(ckpt: Checkpoint, eval_images: np.ndarray, batch_size: int = 32) -> EvalMetrics:
    """Single deterministic pass over held-out images; no updates."""
    if eval_images.ndim != 4 or eval_images.shape[3] != 3:
        raise ConfigError(f"expected (M, H, W, 3) eval images, got shape {eval_images.shape}")
    if len(eval_images) == 0:
        raise ConfigError("eval set is empty")
    return _eval_pass(ckpt.ae, ckpt.codebook, eval_images, batch_size)
