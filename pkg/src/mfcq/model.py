"""LQ model data: coefficients, structural checks and the configuration format.

Every coefficient is a deterministic function of time stored either as a
constant or as a uniformly/irregularly sampled table that is linearly
interpolated. Dynamics and rewards are

    b   = b0 + B x + Bbar mu + C a
    sig = theta + D x + Dbar mu + F a              (idiosyncratic, m = 1)
    sigo = theta_o + Do x + Dbar_o mu + Fo a       (common, n = 1)
    r   = x'Mx + mu'Mbar mu + a'Ra + x'O,   g = x'Px + mu'Pbar mu

where ``mu`` is the mean of the conditional state law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from mfcq.errors import ModelConfigError, TimeRangeError

COEFF_SHAPES: dict[str, tuple[str, ...]] = {
    "b0": ("d",),
    "B": ("d", "d"),
    "Bbar": ("d", "d"),
    "C": ("d", "p"),
    "theta": ("d",),
    "D": ("d", "d"),
    "Dbar": ("d", "d"),
    "F": ("d", "p"),
    "theta_o": ("d",),
    "Do": ("d", "d"),
    "Dbar_o": ("d", "d"),
    "Fo": ("d", "p"),
    "M": ("d", "d"),
    "Mbar": ("d", "d"),
    "R": ("p", "p"),
    "O": ("d",),
}
TERMINAL_SHAPES = {"P": ("d", "d"), "Pbar": ("d", "d")}
SYMMETRIC = ("M", "Mbar", "R", "P", "Pbar")
REQUIRED_COEFFS = ("R",)
SYMMETRY_TOL = 1e-12


def _shape(spec: tuple[str, ...], d: int, p: int) -> tuple[int, ...]:
    return tuple(d if s == "d" else p for s in spec)


def _as_array(name: str, value, shape: tuple[int, ...]) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelConfigError(f"{name}: not numeric ({exc})") from None
    if arr.ndim == 0 and math.prod(shape) == 1:
        arr = arr.reshape(shape)
    if arr.shape != shape:
        raise ModelConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelConfigError(f"{name}: non-finite entries")
    return arr


def _symmetrize(name: str, arr: np.ndarray) -> np.ndarray:
    asym = np.max(np.abs(arr - np.swapaxes(arr, -1, -2))) if arr.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ModelConfigError(f"{name}: not symmetric (max asymmetry {asym:.3g})")
    return 0.5 * (arr + np.swapaxes(arr, -1, -2))


@dataclass(frozen=True)
class Coefficient:
    """A constant or a piecewise-linear table ``{t: [...], v: [...]}``."""

    value: np.ndarray
    times: np.ndarray | None = None

    @property
    def is_constant(self) -> bool:
        return self.times is None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape if self.is_constant else self.value.shape[1:]

    def at(self, t: float) -> np.ndarray:
        if self.is_constant:
            return self.value
        ts = self.times
        if t <= ts[0]:
            return self.value[0]
        if t >= ts[-1]:
            return self.value[-1]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        return (1.0 - w) * self.value[k] + w * self.value[k + 1]

    def on(self, times: np.ndarray) -> np.ndarray:
        """Vectorised evaluation; returns shape ``(len(times), *shape)``."""
        times = np.asarray(times, dtype=float)
        if self.is_constant:
            return np.broadcast_to(self.value, (len(times),) + self.value.shape).copy()
        flat = self.value.reshape(len(self.times), -1)
        out = np.empty((len(times), flat.shape[1]))
        for j in range(flat.shape[1]):
            out[:, j] = np.interp(times, self.times, flat[:, j])
        return out.reshape((len(times),) + self.shape)

    def to_literal(self):
        if self.is_constant:
            return self.value.tolist()
        return {"t": self.times.tolist(), "v": self.value.tolist()}


@dataclass(frozen=True)
class CoefficientSlice:
    """All sixteen coefficient values at one time."""

    b0: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    theta: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray
    F: np.ndarray
    theta_o: np.ndarray
    Do: np.ndarray
    Dbar_o: np.ndarray
    Fo: np.ndarray
    M: np.ndarray
    Mbar: np.ndarray
    R: np.ndarray
    O: np.ndarray  # noqa: E741


@dataclass(frozen=True)
class LQModel:
    d: int
    p: int
    horizon: float
    gamma: float
    coeffs: dict[str, Coefficient]
    P: np.ndarray
    Pbar: np.ndarray
    name: str = ""
    _const_slice: CoefficientSlice | None = field(default=None, repr=False, compare=False)

    beta = 0.0  # discounting is fixed to zero for the LQ class

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ModelConfigError(f"gamma must be positive, got {self.gamma}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ModelConfigError(f"horizon must be positive, got {self.horizon}")
        if all(c.is_constant for c in self.coeffs.values()):
            object.__setattr__(
                self, "_const_slice", CoefficientSlice(**{k: c.value for k, c in self.coeffs.items()})
            )

    @classmethod
    def build(cls, d: int, p: int, horizon: float, gamma: float, *, P=None, Pbar=None, name="", **coeffs):
        """Construct from scalars/arrays; unspecified coefficients are zero.

        A coefficient may also be given as ``{"t": [...], "v": [...]}``.
        """
        unknown = set(coeffs) - set(COEFF_SHAPES)
        if unknown:
            raise ModelConfigError(f"unknown coefficients: {sorted(unknown)}")
        d, p = int(d), int(p)
        if d < 1 or p < 1:
            raise ModelConfigError(f"dimensions must be positive, got d={d}, p={p}")
        built = {}
        for key, spec in COEFF_SHAPES.items():
            shape = _shape(spec, d, p)
            built[key] = _make_coefficient(key, coeffs.get(key, np.zeros(shape)), shape, float(horizon))
        P = _as_array("P", np.zeros((d, d)) if P is None else P, (d, d))
        Pbar = _as_array("Pbar", np.zeros((d, d)) if Pbar is None else Pbar, (d, d))
        return cls(
            d=d,
            p=p,
            horizon=float(horizon),
            gamma=float(gamma),
            coeffs=built,
            P=_symmetrize("P", P),
            Pbar=_symmetrize("Pbar", Pbar),
            name=name,
        )

    def replace(self, **changes) -> "LQModel":
        """Copy with some coefficients / scalars replaced (same keywords as :meth:`build`)."""
        kw = {k: c.to_literal() for k, c in self.coeffs.items()}
        kw.update(P=self.P, Pbar=self.Pbar, name=self.name)
        base = dict(d=self.d, p=self.p, horizon=self.horizon, gamma=self.gamma)
        for key, val in changes.items():
            if key in base:
                base[key] = val
            else:
                kw[key] = val
        return LQModel.build(**base, **kw)

    def at(self, t: float) -> CoefficientSlice:
        return coefficients_at(self, t)

    def slices_on(self, times) -> list[CoefficientSlice]:
        """Coefficient slices at many times, sharing one object when constant."""
        times = np.asarray(times, dtype=float)
        if self._const_slice is not None:
            return [self._const_slice] * len(times)
        stacked = {k: c.on(times) for k, c in self.coeffs.items()}
        return [CoefficientSlice(**{k: v[i] for k, v in stacked.items()}) for i in range(len(times))]

    @property
    def has_idiosyncratic_noise(self) -> bool:
        return any(np.any(self.coeffs[k].value != 0) for k in ("theta", "D", "Dbar", "F"))

    @property
    def has_common_noise(self) -> bool:
        return any(np.any(self.coeffs[k].value != 0) for k in ("theta_o", "Do", "Dbar_o", "Fo"))

    @property
    def controls_common_noise(self) -> bool:
        return bool(np.any(self.coeffs["Fo"].value != 0))


def _make_coefficient(name: str, value, shape, horizon: float) -> Coefficient:
    if isinstance(value, Coefficient):
        if value.shape != shape:
            raise ModelConfigError(f"{name}: expected shape {shape}, got {value.shape}")
        return value
    if isinstance(value, dict):
        if set(value) != {"t", "v"}:
            raise ModelConfigError(f"{name}: a table needs exactly the keys 't' and 'v'")
        ts = np.asarray(value["t"], dtype=float)
        if ts.ndim != 1 or len(ts) < 2:
            raise ModelConfigError(f"{name}: table needs at least two time nodes")
        if not np.all(np.isfinite(ts)) or np.any(np.diff(ts) <= 0):
            raise ModelConfigError(f"{name}: table times must be finite and strictly increasing")
        if ts[0] > 1e-12 or ts[-1] < horizon - 1e-12:
            raise ModelConfigError(f"{name}: table must cover [0, {horizon}]")
        vals = value["v"]
        if len(vals) != len(ts):
            raise ModelConfigError(f"{name}: {len(ts)} times but {len(vals)} values")
        arr = np.stack([_as_array(f"{name}[{i}]", v, shape) for i, v in enumerate(vals)])
        if name in SYMMETRIC:
            arr = _symmetrize(name, arr)
        return Coefficient(arr, ts)
    arr = _as_array(name, value, shape)
    if name in SYMMETRIC:
        arr = _symmetrize(name, arr)
    return Coefficient(arr)


def coefficients_at(model: LQModel, t: float) -> CoefficientSlice:
    """Coefficient values at time ``t``; tables are linearly interpolated."""
    tol = 1e-12 * max(1.0, model.horizon)
    if not (-tol <= t <= model.horizon + tol):
        raise TimeRangeError(f"t={t} outside [0, {model.horizon}]")
    if model._const_slice is not None:
        return model._const_slice
    return CoefficientSlice(**{k: c.at(t) for k, c in model.coeffs.items()})


# ---------------------------------------------------------------- condition (H)


@dataclass(frozen=True)
class ConditionHReport:
    holds: bool
    max_eigenvalues: dict[str, float]
    margins: dict[str, float]
    delta_used: float
    violations: tuple[str, ...]


def validate_condition_H(model: LQModel, delta: float = 1e-6, t_samples: int = 201) -> ConditionHReport:
    """Check P <= 0, P+Pbar <= 0, M(t) <= 0, M(t)+Mbar(t) <= 0 and R(t) <= -delta I.

    Time-dependent conditions are checked on ``t_samples`` uniform points; a
    margin is ``bound - max eigenvalue`` and must be non-negative.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if t_samples < 2:
        raise ValueError("t_samples must be at least 2")
    ts = np.linspace(0.0, model.horizon, int(t_samples))
    M = model.coeffs["M"].on(ts)
    Mbar = model.coeffs["Mbar"].on(ts)
    R = model.coeffs["R"].on(ts)
    top = {
        "P": float(np.linalg.eigvalsh(model.P).max()),
        "P+Pbar": float(np.linalg.eigvalsh(model.P + model.Pbar).max()),
        "M": float(np.linalg.eigvalsh(M).max()),
        "M+Mbar": float(np.linalg.eigvalsh(M + Mbar).max()),
        "R": float(np.linalg.eigvalsh(R).max()),
    }
    bounds = {"P": 0.0, "P+Pbar": 0.0, "M": 0.0, "M+Mbar": 0.0, "R": -float(delta)}
    margins = {k: bounds[k] - top[k] for k in top}
    labels = {
        "P": "P <= 0",
        "P+Pbar": "P + Pbar <= 0",
        "M": "M(t) <= 0",
        "M+Mbar": "M(t) + Mbar(t) <= 0",
        "R": "R(t) <= -delta I",
    }
    violations = tuple(labels[k] for k, m in margins.items() if m < -1e-12)
    return ConditionHReport(
        holds=not violations,
        max_eigenvalues=top,
        margins=margins,
        delta_used=float(delta),
        violations=violations,
    )


# ---------------------------------------------------------------- config documents


def model_to_dict(model: LQModel) -> dict:
    return {
        "name": model.name,
        "dims": {"d": model.d, "p": model.p},
        "horizon": model.horizon,
        "gamma": model.gamma,
        "coeffs": {k: c.to_literal() for k, c in model.coeffs.items()},
        "terminal": {"P": model.P.tolist(), "Pbar": model.Pbar.tolist()},
    }


def dump_model(model: LQModel) -> str:
    return yaml.safe_dump(model_to_dict(model), sort_keys=False, default_flow_style=None)


def load_model(text: str) -> LQModel:
    """Parse a YAML (or JSON) model document into a validated :class:`LQModel`."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ModelConfigError(f"unparseable model document: {exc}") from None
    if not isinstance(doc, dict):
        raise ModelConfigError("model document must be a mapping")
    for key in ("dims", "horizon", "gamma", "coeffs"):
        if key not in doc:
            raise ModelConfigError(f"missing required key '{key}'")
    if "beta" in doc:
        raise ModelConfigError("'beta' is not configurable (fixed to 0)")
    dims = doc["dims"]
    if not isinstance(dims, dict) or "d" not in dims or "p" not in dims:
        raise ModelConfigError("'dims' must contain 'd' and 'p'")
    coeffs = doc["coeffs"] or {}
    if not isinstance(coeffs, dict):
        raise ModelConfigError("'coeffs' must be a mapping")
    for key in REQUIRED_COEFFS:
        if key not in coeffs:
            raise ModelConfigError(f"missing required key 'coeffs.{key}'")
    terminal = doc.get("terminal") or {}
    unknown = set(terminal) - set(TERMINAL_SHAPES)
    if unknown:
        raise ModelConfigError(f"unknown terminal keys: {sorted(unknown)}")
    for key in ("horizon", "gamma"):
        if not isinstance(doc[key], (int, float)) or isinstance(doc[key], bool):
            raise ModelConfigError(f"'{key}' must be a number")
    return LQModel.build(
        dims["d"],
        dims["p"],
        doc["horizon"],
        doc["gamma"],
        P=terminal.get("P"),
        Pbar=terminal.get("Pbar"),
        name=str(doc.get("name", "") or ""),
        **coeffs,
    )


def load_model_file(path) -> LQModel:
    with open(path, encoding="utf-8") as fh:
        return load_model(fh.read())


def slice_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(CoefficientSlice))
