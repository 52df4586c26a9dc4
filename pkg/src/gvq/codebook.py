"""Grouped codebook construction and materialization.

A codebook of ``n`` code vectors in ``R^d`` is partitioned into ``k``
disjoint groups. Group ``j`` holds a fixed random core matrix of shape
``(n_j, r_j)`` (never trained) and a trainable projector mapping the core
into code space. Materializing the codebook applies each group's projector
to its core and concatenates the groups in order, so global code index
``i`` belongs to the group whose offset range contains ``i`` and its row
order never changes across training.

Projector variants:

* ``linear``      : ``core @ W + b``
* ``mlp``         : one-hidden-layer perceptron ``act(core @ W1 + b1) @ W2 + b2``
* ``linear_mlp``  : elementwise sum of the two above
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import DEFAULT_DTYPE, RngStream

PROJECTOR_KINDS = ("linear", "mlp", "linear_mlp")
ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class ProjectorVariant:
    """Which generator network produces codes from a group core."""

    kind: str = "linear"
    hidden_width: int | None = None  # None: hidden width equals the group rank
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in PROJECTOR_KINDS:
            raise ConfigError(f"unknown projector kind {self.kind!r}; expected one of {PROJECTOR_KINDS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.hidden_width is not None and self.hidden_width < 1:
            raise ConfigError(f"hidden_width must be >= 1, got {self.hidden_width}")

    def hidden(self, r: int) -> int:
        return self.hidden_width if self.hidden_width is not None else r


@dataclass(frozen=True)
class GroupSpec:
    """Size and rank of one group; cores are always standard-normal."""

    n: int
    r: int
    core_distribution: str = "standard_normal"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"group size must be >= 1, got {self.n}")
        if self.r < 1:
            raise ConfigError(f"group rank must be >= 1, got {self.r}")
        if self.core_distribution != "standard_normal":
            raise ConfigError(f"unsupported core distribution {self.core_distribution!r}")


@dataclass
class GroupParams:
    """One group: frozen core plus the trainable projector tensors.

    ``params`` keys are ``W``/``b`` for the linear branch and
    ``W1``/``b1``/``W2``/``b2`` for the MLP branch; ``linear_mlp`` carries
    all six. The core array is marked read-only at construction.
    """

    core: np.ndarray
    params: dict[str, np.ndarray]

    def __post_init__(self):
        self.core.setflags(write=False)

    @property
    def n(self) -> int:
        return self.core.shape[0]

    @property
    def r(self) -> int:
        return self.core.shape[1]


# Trainable-tensor name order per variant; fixed so optimizer state and
# checkpoints enumerate parameters identically everywhere.
_PARAM_ORDER = {
    "linear": ("W", "b"),
    "mlp": ("W1", "b1", "W2", "b2"),
    "linear_mlp": ("W", "b", "W1", "b1", "W2", "b2"),
}


def projector_param_names(variant: ProjectorVariant) -> tuple[str, ...]:
    return _PARAM_ORDER[variant.kind]


def projector_param_count(variant: ProjectorVariant, r: int, d: int) -> int:
    """Number of trainable scalars in one group's projector."""
    if r < 1 or d < 1:
        raise ConfigError(f"rank and dim must be >= 1, got r={r}, d={d}")
    h = variant.hidden(r)
    linear = r * d + d
    mlp = (r * h + h) + (h * d + d)
    if variant.kind == "linear":
        return linear
    if variant.kind == "mlp":
        return mlp
    return linear + mlp


def init_projector_params(
    variant: ProjectorVariant, r: int, d: int, rng: RngStream, dtype=DEFAULT_DTYPE
) -> dict[str, np.ndarray]:
    """Weights ~ N(0, 1/fan_in) entrywise, biases zero; fixed draw order."""
    params: dict[str, np.ndarray] = {}
    h = variant.hidden(r)
    if variant.kind in ("linear", "linear_mlp"):
        params["W"] = rng.standard_normal((r, d), dtype=dtype) * dtype(1.0 / np.sqrt(r))
        params["b"] = np.zeros(d, dtype=dtype)
    if variant.kind in ("mlp", "linear_mlp"):
        params["W1"] = rng.standard_normal((r, h), dtype=dtype) * dtype(1.0 / np.sqrt(r))
        params["b1"] = np.zeros(h, dtype=dtype)
        params["W2"] = rng.standard_normal((h, d), dtype=dtype) * dtype(1.0 / np.sqrt(h))
        params["b2"] = np.zeros(d, dtype=dtype)
    return params


def _activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0)
    return np.tanh(x)


def _activation_grad(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0).astype(pre.dtype)
    t = np.tanh(pre)
    return 1.0 - t * t


def _check_projector_shapes(variant: ProjectorVariant, core: np.ndarray, params: dict, d: int | None = None):
    n_j, r = core.shape
    names = projector_param_names(variant)
    missing = set(names) - set(params)
    extra = set(params) - set(names)
    if missing or extra:
        raise ShapeError(f"projector params mismatch for {variant.kind}: missing={sorted(missing)}, extra={sorted(extra)}")
    if "W" in params:
        if params["W"].shape[0] != r:
            raise ShapeError(f"W rows {params['W'].shape} do not match core rank {r}")
        d_out = params["W"].shape[1]
        if params["b"].shape != (d_out,):
            raise ShapeError(f"b shape {params['b'].shape} does not match W columns {d_out}")
    if "W1" in params:
        h = variant.hidden(r)
        if params["W1"].shape != (r, h):
            raise ShapeError(f"W1 shape {params['W1'].shape}, expected {(r, h)}")
        if params["b1"].shape != (h,):
            raise ShapeError(f"b1 shape {params['b1'].shape}, expected {(h,)}")
        if params["W2"].shape[0] != h:
            raise ShapeError(f"W2 rows {params['W2'].shape} do not match hidden width {h}")
        if params["b2"].shape != (params["W2"].shape[1],):
            raise ShapeError(f"b2 shape {params['b2'].shape} does not match W2 columns")
    if d is not None:
        out = params["W"].shape[1] if "W" in params else params["W2"].shape[1]
        if out != d:
            raise ShapeError(f"projector output dim {out} does not match code dim {d}")


def projector_forward(variant: ProjectorVariant, core: np.ndarray, params: dict) -> np.ndarray:
    """Codes of one group: apply the projector to the (fixed) core rows."""
    _check_projector_shapes(variant, core, params)
    out = None
    if variant.kind in ("linear", "linear_mlp"):
        out = core @ params["W"] + params["b"]
    if variant.kind in ("mlp", "linear_mlp"):
        hidden = _activation(variant.activation, core @ params["W1"] + params["b1"])
        mlp_out = hidden @ params["W2"] + params["b2"]
        out = mlp_out if out is None else out + mlp_out
    return out


def projector_backward(
    variant: ProjectorVariant, core: np.ndarray, params: dict, d_codes: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of the projector parameters given gradients on its codes.

    Recomputes the tiny hidden activation instead of caching it; parameters
    must be the same values used in the matching forward pass.
    """
    grads: dict[str, np.ndarray] = {}
    if variant.kind in ("linear", "linear_mlp"):
        grads["W"] = core.T @ d_codes
        grads["b"] = d_codes.sum(axis=0)
    if variant.kind in ("mlp", "linear_mlp"):
        pre = core @ params["W1"] + params["b1"]
        hidden = _activation(variant.activation, pre)
        grads["W2"] = hidden.T @ d_codes
        grads["b2"] = d_codes.sum(axis=0)
        d_hidden = d_codes @ params["W2"].T
        d_pre = d_hidden * _activation_grad(variant.activation, pre)
        grads["W1"] = core.T @ d_pre
        grads["b1"] = d_pre.sum(axis=0)
    return grads


@dataclass
class GroupedCodebook:
    """Partitioned codebook: ordered groups plus global-index offsets.

    ``offsets`` has length ``k + 1`` with ``offsets[0] == 0`` and
    ``offsets[k] == n``; group ``j`` owns global indices
    ``offsets[j] .. offsets[j+1] - 1``. ``version`` increments whenever
    trainable parameters change, so quantization results can detect
    staleness before gradient replay.
    """

    d: int
    variant: ProjectorVariant
    groups: list[GroupParams]
    offsets: np.ndarray = field(default=None)  # type: ignore[assignment]
    version: int = 0

    def __post_init__(self):
        if not self.groups:
            raise ConfigError("codebook needs at least one group")
        sizes = [g.n for g in self.groups]
        expected = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if self.offsets is None:
            self.offsets = expected
        else:
            self.offsets = np.asarray(self.offsets, dtype=np.int64)
            if not np.array_equal(self.offsets, expected):
                raise ConfigError(f"offsets {self.offsets.tolist()} do not match group sizes {sizes}")
        for g in self.groups:
            _check_projector_shapes(self.variant, g.core, g.params, d=self.d)

    @property
    def k(self) -> int:
        return len(self.groups)

    @property
    def n(self) -> int:
        return int(self.offsets[-1])

    def bump_version(self):
        self.version += 1

    def group_sizes(self) -> list[int]:
        return [g.n for g in self.groups]

    def materialize(self) -> np.ndarray:
        """Full (n, d) code matrix, group order then local order."""
        return np.concatenate(
            [projector_forward(self.variant, g.core, g.params) for g in self.groups], axis=0
        )

    def param_items(self):
        """Yield (name, tensor) for every trainable tensor, fixed order."""
        for j, g in enumerate(self.groups):
            for key in projector_param_names(self.variant):
                yield f"group{j}.{key}", g.params[key]

    def named_tensors(self):
        """Trainables plus frozen cores, as stored in checkpoints."""
        for j, g in enumerate(self.groups):
            yield f"group{j}.core", g.core
            for key in projector_param_names(self.variant):
                yield f"group{j}.{key}", g.params[key]


def group_of_index(gc: GroupedCodebook, i: int) -> tuple[int, int]:
    """Map a global code index to (group, local index within group)."""
    if not 0 <= i < gc.n:
        raise IndexError(f"code index {i} out of range for codebook of size {gc.n}")
    j = int(np.searchsorted(gc.offsets, i, side="right")) - 1
    return j, i - int(gc.offsets[j])


def init_grouped_codebook(
    d: int,
    specs: list[GroupSpec],
    variant: ProjectorVariant,
    rng: RngStream,
    dtype=DEFAULT_DTYPE,
) -> GroupedCodebook:
    """Fresh codebook: per-group standard-normal cores (frozen) and
    N(0, 1/r)-weight, zero-bias projectors, drawn in group order."""
    if not specs:
        raise ConfigError("specs must be non-empty")
    if d < 1:
        raise ConfigError(f"code dimension must be >= 1, got {d}")
    groups = []
    for spec in specs:
        core = rng.standard_normal((spec.n, spec.r), dtype=dtype)
        params = init_projector_params(variant, spec.r, d, rng, dtype=dtype)
        groups.append(GroupParams(core=core, params=params))
    return GroupedCodebook(d=d, variant=variant, groups=groups)


def init_simplified(
    n: int, d: int, k: int, r: int, rng: RngStream, dtype=DEFAULT_DTYPE
) -> GroupedCodebook:
    """Uniform-group construction with one shared core.

    Draws a single core of shape (n/k, r), one weight matrix W of shape
    (r, d*k) with N(0, 1/r) entries, and a zero bias of length d*k; group
    ``j`` then uses the shared core with columns ``[j*d, (j+1)*d)`` of W
    and the matching bias slice. Materializing this structure equals the
    reshape of ``core @ W + b`` from (n/k, d*k) to (n, d) reordered into
    contiguous group blocks, and parameters stay independent across groups.
    Linear projectors only.
    """
    if k < 1:
        raise ConfigError(f"group count must be >= 1, got {k}")
    if n % k != 0:
        raise ConfigError(f"group count must divide codebook size: n={n}, k={k}")
    core = rng.standard_normal((n // k, r), dtype=dtype)
    w_full = rng.standard_normal((r, d * k), dtype=dtype) * dtype(1.0 / np.sqrt(r))
    b_full = np.zeros(d * k, dtype=dtype)
    variant = ProjectorVariant(kind="linear")
    groups = []
    for j in range(k):
        params = {
            "W": np.ascontiguousarray(w_full[:, j * d : (j + 1) * d]),
            "b": b_full[j * d : (j + 1) * d].copy(),
        }
        groups.append(GroupParams(core=core, params=params))
    return GroupedCodebook(d=d, variant=variant, groups=groups)
