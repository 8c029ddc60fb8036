"""Simulated low-bit quantization.

Symmetric integer (INT4/INT8) and E2M1 FP4 formats with group-wise,
per-vector and per-tensor scales. Groups are always contiguous runs along
the last axis of a 2-D matrix, so a (rows, cols) tensor under ``Group(g)``
has ``rows * cols // g`` groups numbered row-major.

Scales follow ``s = max|X| / M`` so that ``X / s`` spans ``[-M, M]``
(``M = 2**(b-1)`` for INT, ``M = 6`` for FP4). With INT formats the single
positive extreme therefore clips from ``M`` to ``Qmax = M - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from qsl.errors import ConfigError, GranularityMismatch, InvalidValue

FP4_E2M1_GRID = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
QUANTIZERS = ("absmax", "lsq", "lwc", "lac")


@dataclass(frozen=True)
class NumericFormat:
    kind: str  # "int" or "fp4_e2m1"
    bits: int

    def __post_init__(self):
        if self.kind == "int":
            if self.bits not in (4, 8, 16):
                raise ConfigError(f"unsupported integer width: {self.bits}")
        elif self.kind == "fp4_e2m1":
            if self.bits != 4:
                raise ConfigError("E2M1 is a 4-bit format")
        else:
            raise ConfigError(f"unknown format kind {self.kind!r}")

    @property
    def is_identity(self) -> bool:
        return self.kind == "int" and self.bits == 16

    @property
    def qmin(self) -> float:
        if self.kind == "fp4_e2m1":
            return -6.0
        return -(2 ** (self.bits - 1))

    @property
    def qmax(self) -> float:
        if self.kind == "fp4_e2m1":
            return 6.0
        return 2 ** (self.bits - 1) - 1

    @property
    def max_level(self) -> float:
        """Divisor M of the AbsMax scale."""
        if self.kind == "fp4_e2m1":
            return 6.0
        return float(2 ** (self.bits - 1))

    @property
    def name(self) -> str:
        if self.kind == "fp4_e2m1":
            return "fp4_e2m1"
        return "bf16" if self.bits == 16 else f"int{self.bits}"

    @classmethod
    def from_name(cls, name: str) -> "NumericFormat":
        try:
            return _FORMATS[name]
        except KeyError:
            raise ConfigError(f"unknown format {name!r}") from None


INT4 = NumericFormat("int", 4)
INT8 = NumericFormat("int", 8)
BF16 = NumericFormat("int", 16)
FP4_E2M1 = NumericFormat("fp4_e2m1", 4)
_FORMATS = {f.name: f for f in (INT4, INT8, BF16, FP4_E2M1)}


@dataclass(frozen=True)
class Granularity:
    kind: str  # "group", "per_vector" or "per_tensor"
    group_size: Optional[int] = None

    def __post_init__(self):
        if self.kind == "group":
            if self.group_size is None or self.group_size < 2:
                raise ConfigError("group granularity needs a group size >= 2")
        elif self.kind in ("per_vector", "per_tensor"):
            if self.group_size is not None:
                raise ConfigError(f"{self.kind} takes no group size")
        else:
            raise ConfigError(f"unknown granularity {self.kind!r}")

    @property
    def name(self) -> str:
        return f"g{self.group_size}" if self.kind == "group" else self.kind

    @classmethod
    def from_name(cls, name: str) -> "Granularity":
        if name in ("per_vector", "per_tensor"):
            return cls(name)
        if name.startswith("g") and name[1:].isdigit():
            return cls("group", int(name[1:]))
        raise ConfigError(f"unknown granularity {name!r}")

    def group_len(self, rows: int, cols: int) -> int:
        """Number of elements that share one scale in a (rows, cols) tensor."""
        if self.kind == "group":
            if self.group_size > cols or cols % self.group_size:
                raise GranularityMismatch(
                    f"group size {self.group_size} does not divide axis length {cols}"
                )
            return self.group_size
        if self.kind == "per_vector":
            return cols
        return rows * cols


def Group(g: int) -> Granularity:
    return Granularity("group", g)


PER_VECTOR = Granularity("per_vector")
PER_TENSOR = Granularity("per_tensor")


@dataclass(frozen=True)
class QuantConfig:
    format: NumericFormat
    granularity: Granularity = PER_VECTOR
    quantizer: str = "absmax"

    def __post_init__(self):
        if self.quantizer not in QUANTIZERS:
            raise ConfigError(f"unknown quantizer {self.quantizer!r}")

    @property
    def is_identity(self) -> bool:
        return self.format.is_identity

    def to_dict(self) -> dict:
        return {
            "format": self.format.name,
            "granularity": self.granularity.name,
            "quantizer": self.quantizer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        try:
            return cls(
                NumericFormat.from_name(d["format"]),
                Granularity.from_name(d.get("granularity", "per_vector")),
                d.get("quantizer", "absmax"),
            )
        except KeyError as e:
            raise ConfigError(f"quant config missing field {e}") from None


IDENTITY = QuantConfig(BF16)


@dataclass
class QuantizedTensor:
    """Codes plus one scale per group.

    INT codes are integers in ``[Qmin, Qmax]``; FP4 codes hold the signed
    E2M1 value itself (one of 15 distinct numbers).
    """

    codes: np.ndarray
    scales: np.ndarray
    config: QuantConfig
    group_map: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.codes.shape


def partition_groups(rows: int, cols: int, granularity: Granularity) -> np.ndarray:
    """Return a (rows, cols) array of dense, row-major group ids."""
    glen = granularity.group_len(rows, cols)
    return (np.arange(rows * cols) // glen).reshape(rows, cols)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise InvalidValue(f"expected a matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidValue("non-finite value in input")
    return x


def _grouped(x: np.ndarray, granularity: Granularity) -> np.ndarray:
    rows, cols = x.shape
    return x.reshape(-1, granularity.group_len(rows, cols))


def absmax_scale(group_values, fmt: NumericFormat) -> float:
    v = np.asarray(group_values, dtype=np.float64)
    if v.size == 0:
        raise InvalidValue("empty group")
    if not np.all(np.isfinite(v)):
        raise InvalidValue("non-finite value in group")
    m = np.max(np.abs(v))
    return float(m / fmt.max_level) if m > 0 else 1.0


def group_absmax(x: np.ndarray, granularity: Granularity) -> np.ndarray:
    return np.max(np.abs(_grouped(x, granularity)), axis=1)


def _expand_lac(gamma: np.ndarray, rows: int, n_groups: int) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64).ravel()
    if n_groups % rows or gamma.size != n_groups // rows:
        raise ConfigError(
            f"LAC needs one clipping factor per group index ({n_groups // rows}), got {gamma.size}"
        )
    return np.tile(gamma, rows)


def group_scales(x: np.ndarray, config: QuantConfig, learned=None) -> np.ndarray:
    """Per-group scales for ``x`` under ``config``.

    ``learned`` holds the quantizer's trainable state: clipping factors for
    LWC (one per group) and LAC (one per group index, shared across rows),
    or the scales themselves for LSQ. ``None`` falls back to AbsMax.
    """
    x = _as_matrix(x)
    gmax = group_absmax(x, config.granularity)
    q = config.quantizer
    if learned is None or q == "absmax":
        s = gmax / config.format.max_level
    elif q == "lsq":
        s = np.asarray(learned, dtype=np.float64).ravel()
        if s.shape != gmax.shape:
            raise ConfigError(f"LSQ needs {gmax.size} scales, got {s.size}")
        if np.any(s <= 0):
            raise InvalidValue("LSQ scales must be positive")
        return s.copy()
    else:
        if q == "lwc":
            gamma = np.asarray(learned, dtype=np.float64).ravel()
            if gamma.shape != gmax.shape:
                raise ConfigError(f"LWC needs {gmax.size} clipping factors, got {gamma.size}")
        else:
            gamma = _expand_lac(learned, x.shape[0], gmax.size)
        if np.any(gamma <= 0) or np.any(gamma > 1):
            raise InvalidValue("clipping factors must lie in (0, 1]")
        s = gmax * gamma / config.format.max_level
    return np.where(s > 0, s, 1.0)


def _fp4_nearest(v: np.ndarray) -> np.ndarray:
    a = np.minimum(np.abs(v), FP4_E2M1_GRID[-1])
    hi = np.searchsorted(FP4_E2M1_GRID, a, side="left")
    hi = np.minimum(hi, FP4_E2M1_GRID.size - 1)
    lo = np.maximum(hi - 1, 0)
    up, down = FP4_E2M1_GRID[hi], FP4_E2M1_GRID[lo]
    # ties go to the smaller magnitude
    mag = np.where(up - a < a - down, up, down)
    return np.sign(v) * mag


def _codes(xs: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    if fmt.kind == "fp4_e2m1":
        return _fp4_nearest(xs)
    return np.clip(np.round(xs), fmt.qmin, fmt.qmax)


def quantize(x, config: QuantConfig, learned=None) -> QuantizedTensor:
    x = _as_matrix(x)
    rows, cols = x.shape
    gmap = partition_groups(rows, cols, config.granularity)
    if config.is_identity:
        return QuantizedTensor(x.copy(), np.ones(gmap.max() + 1), config, gmap)
    s = group_scales(x, config, learned)
    codes = _codes(_grouped(x, config.granularity) / s[:, None], config.format)
    codes = codes.reshape(rows, cols)
    if config.format.kind == "int":
        codes = codes.astype(np.int64)
    return QuantizedTensor(codes, s, config, gmap)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.codes * q.scales[q.group_map]


def fake_quantize(x, config: QuantConfig, learned=None) -> np.ndarray:
    if config.is_identity:
        return _as_matrix(x).copy()
    return dequantize(quantize(x, config, learned))


def _normalized(x: np.ndarray, config: QuantConfig, learned) -> tuple[np.ndarray, np.ndarray]:
    s = group_scales(x, config, learned)
    xs = _grouped(x, config.granularity) / s[:, None]
    return xs, s


def clip_mask(x, config: QuantConfig, learned=None) -> np.ndarray:
    """True where ``x / s`` is inside the representable range."""
    x = _as_matrix(x)
    if config.is_identity:
        return np.ones_like(x, dtype=bool)
    xs, _ = _normalized(x, config, learned)
    fmt = config.format
    return ((xs >= fmt.qmin) & (xs <= fmt.qmax)).reshape(x.shape)


def ste_grad(upstream, x, config: QuantConfig, learned=None) -> np.ndarray:
    """Straight-through gradient of ``fake_quantize`` with respect to ``x``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    mask = clip_mask(x, config, learned)
    return np.where(mask.reshape(upstream.shape), upstream, 0.0)


def _lsq_terms(xs: np.ndarray, fmt: NumericFormat) -> np.ndarray:
    # d(s * q(x/s))/ds with rounding passed straight through
    inside = _codes(xs, fmt) - xs
    return np.where(xs < fmt.qmin, fmt.qmin, np.where(xs > fmt.qmax, fmt.qmax, inside))


def lsq_scale_grad(upstream, x, s: float, fmt: NumericFormat = INT4) -> float:
    """Gradient of the loss with respect to a single learned step size ``s``."""
    if s <= 0:
        raise InvalidValue("step size must be positive")
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    return float(np.sum(upstream * _lsq_terms(x / s, fmt)))


def scale_grads(upstream, x, config: QuantConfig, learned=None) -> np.ndarray:
    """Per-group d(loss)/d(scale) under the LSQ rule."""
    x = _as_matrix(x)
    xs, _ = _normalized(x, config, learned)
    up = _grouped(np.asarray(upstream, dtype=np.float64).reshape(x.shape), config.granularity)
    return np.sum(up * _lsq_terms(xs, config.format), axis=1)


def learned_param_grad(upstream, x, config: QuantConfig, learned) -> np.ndarray:
    """Gradient with respect to the quantizer's own trainable state.

    LSQ returns one entry per scale, LWC one per group and LAC one per group
    index (summed over rows). The group maximum is treated as a constant.
    """
    x = _as_matrix(x)
    g_s = scale_grads(upstream, x, config, learned)
    if config.quantizer == "lsq":
        return g_s
    gmax = group_absmax(x, config.granularity)
    g_gamma = g_s * gmax / config.format.max_level
    if config.quantizer == "lwc":
        return g_gamma
    if config.quantizer == "lac":
        return g_gamma.reshape(x.shape[0], -1).sum(axis=0)
    raise ConfigError("AbsMax has no trainable state")


def init_learned(x, config: QuantConfig) -> Optional[np.ndarray]:
    """Initial trainable state matching AbsMax on ``x``."""
    x = _as_matrix(x)
    if config.is_identity or config.quantizer == "absmax":
        return None
    if config.quantizer == "lsq":
        return group_scales(x, QuantConfig(config.format, config.granularity))
    n = group_absmax(x, config.granularity).size
    if config.quantizer == "lac":
        n //= x.shape[0]
    return np.ones(n)


LAYER_KINDS = ("qkv", "o", "fc1", "fc2")
ROLES = ("weight", "input")


@dataclass(frozen=True)
class QuantPlan:
    """One QuantConfig per (layer kind, tensor role) pair."""

    entries: dict

    def __post_init__(self):
        want = {(k, r) for k in LAYER_KINDS for r in ROLES}
        if set(self.entries) != want:
            raise ConfigError("a plan needs exactly one entry per layer kind and role")

    def __getitem__(self, key) -> QuantConfig:
        return self.entries[key]

    def __hash__(self):
        return hash(tuple(sorted((k, v) for k, v in self.entries.items())))

    @classmethod
    def uniform(cls, weight: QuantConfig = IDENTITY, act: QuantConfig = IDENTITY) -> "QuantPlan":
        return cls({(k, r): weight if r == "weight" else act for k in LAYER_KINDS for r in ROLES})

    def replace(self, kind: str, role: str, config: QuantConfig) -> "QuantPlan":
        entries = dict(self.entries)
        entries[(kind, role)] = config
        return QuantPlan(entries)

    def with_fc2_input_8bit(self) -> "QuantPlan":
        act = self[("fc2", "input")]
        if act.is_identity:
            return self
        return self.replace("fc2", "input", QuantConfig(INT8, act.granularity, act.quantizer))

    def to_dict(self) -> dict:
        return {k: {r: self[(k, r)].to_dict() for r in ROLES} for k in LAYER_KINDS}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantPlan":
        try:
            return cls({(k, r): QuantConfig.from_dict(d[k][r]) for k in LAYER_KINDS for r in ROLES})
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed plan: missing {e}") from None


def preset_plan(name: str, fmt: NumericFormat = INT4) -> QuantPlan:
    """Build a plan from a name such as ``w4a4_g128``, ``w16a4_g256_fc2_8`` or ``bf16``.

    Weights use AbsMax. Activations use AbsMax below 256 elements per group
    and LAC at 256 and above (per-vector counts as coarse).
    """
    if name == "bf16":
        return QuantPlan.uniform()
    parts = name.split("_")
    fc2_8 = parts[-2:] == ["fc2", "8"]
    if fc2_8:
        parts = parts[:-2]
    if len(parts) == 3 and parts[1:] == ["per", "tensor"]:
        parts = [parts[0], "per_tensor"]
    elif len(parts) == 3 and parts[1:] == ["per", "vector"]:
        parts = [parts[0], "per_vector"]
    if len(parts) != 2 or parts[0] not in ("w4a4", "w4a16", "w16a4"):
        raise ConfigError(f"unknown plan preset {name!r}")
    gran = Granularity.from_name(parts[1])
    coarse = gran.kind != "group" or gran.group_size >= 256
    wcfg = QuantConfig(fmt, gran, "absmax")
    acfg = QuantConfig(fmt, gran, "lac" if coarse and gran.kind != "per_tensor" else "absmax")
    plan = QuantPlan.uniform(
        wcfg if parts[0] != "w16a4" else IDENTITY,
        acfg if parts[0] != "w4a16" else IDENTITY,
    )
    return plan.with_fc2_input_8bit() if fc2_8 else plan


def fake_quantize_ste(x, config: QuantConfig, learned=None) -> tuple[np.ndarray, np.ndarray]:
    """``fake_quantize`` plus the STE pass-through mask, sharing one scale computation."""
    x = _as_matrix(x)
    if config.is_identity:
        return x, np.ones_like(x, dtype=bool)
    xs, s = _normalized(x, config, learned)
    fmt = config.format
    xhat = (_codes(xs, fmt) * s[:, None]).reshape(x.shape)
    mask = ((xs >= fmt.qmin) & (xs <= fmt.qmax)).reshape(x.shape)
    return xhat, mask
