"""Shared value types, configuration schema and image I/O.

Images live in the unit domain ``[0, 1]`` as float64 arrays of shape
``(height, width, 3)``. The byte domain only exists at PNG boundaries.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal, NamedTuple

import numpy as np
from PIL import Image

from .errors import ConfigError, DomainError, ShapeMismatch

Domain = Literal["unit", "byte"]
Mode = Literal["untargeted", "targeted"]
MODES: tuple[str, ...] = ("untargeted", "targeted")
STOP_REASONS: tuple[str, ...] = ("max_steps", "lr_floor", "nan_abort")

# Absolute slack allowed on the L-infinity budget.
LINF_TOL = 1e-6


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageTensor:
    data: np.ndarray
    domain: Domain = "unit"

    def __post_init__(self):
        if self.domain not in ("unit", "byte"):
            raise DomainError(f"unknown domain {self.domain!r}")
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeMismatch(f"expected (H, W, 3) image, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeMismatch(f"empty image of shape {arr.shape}")
        if self.domain == "unit":
            arr = arr.astype(np.float64, copy=False)
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise DomainError("unit-domain image has values outside [0, 1]")
        else:
            if arr.dtype != np.uint8:
                if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
                    raise DomainError("byte-domain image must hold integers")
                if arr.min() < 0 or arr.max() > 255:
                    raise DomainError("byte-domain image has values outside 0..255")
                arr = arr.astype(np.uint8)
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.domain == other.domain and np.array_equal(self.data, other.data)

    __hash__ = None  # type: ignore[assignment]


def to_unit_domain(img: ImageTensor) -> ImageTensor:
    if img.domain != "byte":
        raise DomainError("to_unit_domain expects a byte-domain image")
    return ImageTensor(img.data.astype(np.float64) / 255.0, "unit")


def to_byte_domain(img: ImageTensor) -> ImageTensor:
    """Round a unit image to the nearest 8-bit level."""
    if img.domain != "unit":
        raise DomainError("to_byte_domain expects a unit-domain image")
    return ImageTensor(np.rint(img.data * 255.0).astype(np.uint8), "byte")


def quantize_within(adv: ImageTensor, clean: ImageTensor, epsilon: float) -> ImageTensor:
    """8-bit quantize ``adv`` without leaving the epsilon ball around ``clean``.

    ``clean`` must sit on the 8-bit grid. Entries where rounding would break
    the budget are truncated toward the clean value instead.
    """
    if adv.shape != clean.shape:
        raise ShapeMismatch(f"{adv.shape} vs {clean.shape}")
    c = np.rint(clean.data * 255.0)
    delta = adv.data * 255.0 - c
    q = np.rint(delta)
    over = np.abs(q) > epsilon * 255.0 + 1e-9
    q = np.where(over, np.trunc(delta), q)
    out = np.clip(c + q, 0, 255).astype(np.uint8)
    return to_unit_domain(ImageTensor(out, "byte"))


def load_png(path: str | Path, size: tuple[int, int] | None = None) -> ImageTensor:
    """Read an image file as a unit-domain RGB tensor.

    ``size`` is ``(height, width)``; resizing is bilinear on the 8-bit image
    so the result stays on the 8-bit grid.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return to_unit_domain(ImageTensor(arr, "byte"))


def save_png(img: ImageTensor, path: str | Path) -> None:
    byte = img if img.domain == "byte" else to_byte_domain(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(byte.data, mode="RGB").save(path, format="PNG")


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    source: Literal["image_encoder", "text_encoder"] = "image_encoder"

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ShapeMismatch(f"embedding must be a non-empty vector, got {arr.shape}")
        object.__setattr__(self, "values", _frozen(arr))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.source == other.source and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.05
    lam: float = 0.1
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    scheduler_factor: float = 0.1
    scheduler_patience: int = 30
    max_steps: int = 1000
    min_learning_rate: float = 1e-5
    mode: Mode = "untargeted"
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AttackConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown AttackConfig fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes: Any) -> "AttackConfig":
        return dataclasses.replace(self, **changes)


class Violation(NamedTuple):
    code: str
    field: str
    message: str


def validate_config(cfg: AttackConfig) -> list[Violation]:
    out: list[Violation] = []

    def bad(code: str, name: str, msg: str) -> None:
        out.append(Violation(code, name, msg))

    def real(name: str) -> float | None:
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            bad(f"{name}_not_a_number", name, f"{name}={v!r} is not a finite number")
            return None
        return float(v)

    def integer(name: str) -> int | None:
        v = getattr(cfg, name)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            bad(f"{name}_not_an_integer", name, f"{name}={v!r} is not an integer")
            return None
        return int(v)

    eps = real("epsilon")
    if eps is not None:
        if eps <= 0:
            bad("epsilon_nonpositive", "epsilon", "epsilon must be > 0")
        elif eps > 1:
            bad("epsilon_too_large", "epsilon", "epsilon must be <= 1")
    lam = real("lam")
    if lam is not None and lam < 0:
        bad("lam_negative", "lam", "lam must be >= 0")
    lr = real("learning_rate")
    if lr is not None and lr <= 0:
        bad("learning_rate_nonpositive", "learning_rate", "learning_rate must be > 0")
    for name in ("beta1", "beta2"):
        b = real(name)
        if b is not None and not 0 < b < 1:
            bad(f"{name}_out_of_range", name, f"{name} must lie in (0, 1)")
    factor = real("scheduler_factor")
    if factor is not None and not 0 < factor < 1:
        bad("factor_out_of_range", "scheduler_factor", "scheduler_factor must lie in (0, 1)")
    patience = integer("scheduler_patience")
    if patience is not None and patience < 1:
        bad("patience_nonpositive", "scheduler_patience", "scheduler_patience must be >= 1")
    steps = integer("max_steps")
    if steps is not None and steps < 1:
        bad("max_steps_nonpositive", "max_steps", "max_steps must be >= 1")
    floor = real("min_learning_rate")
    if floor is not None and floor < 0:
        bad("min_learning_rate_negative", "min_learning_rate", "min_learning_rate must be >= 0")
    if cfg.mode not in MODES:
        bad("mode_invalid", "mode", f"mode must be one of {MODES}")
    integer("seed")
    return out


@dataclass(frozen=True, eq=False)
class AttackResult:
    adversarial_image: ImageTensor
    loss_trace: tuple[float, ...]
    cs_final: float
    linf_actual: float
    l2_actual: float
    steps_run: int
    stop_reason: str
    final_loss: float = float("nan")
    best_step: int = -1

    def record(self) -> dict[str, Any]:
        """JSON-ready summary without the pixel data."""
        return {
            "cs_final": self.cs_final,
            "linf_actual": self.linf_actual,
            "l2_actual": self.l2_actual,
            "steps_run": self.steps_run,
            "stop_reason": self.stop_reason,
            "final_loss": self.final_loss,
            "best_step": self.best_step,
            "loss_trace": list(self.loss_trace),
        }


@dataclass(frozen=True)
class RunManifest:
    config: AttackConfig
    input_paths: tuple[str, ...] = ()
    output_dir: str = ""
    encoder_id: str = ""
    timestamp: str = ""
    git_or_version_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "input_paths", tuple(str(p) for p in self.input_paths))

    def to_json(self) -> str:
        payload = {
            "config": self.config.to_dict(),
            "input_paths": list(self.input_paths),
            "output_dir": self.output_dir,
            "encoder_id": self.encoder_id,
            "timestamp": self.timestamp,
            "git_or_version_tag": self.git_or_version_tag,
        }
        return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        raw = json.loads(text)
        return cls(
            config=AttackConfig.from_dict(raw["config"]),
            input_paths=tuple(raw["input_paths"]),
            output_dir=raw["output_dir"],
            encoder_id=raw["encoder_id"],
            timestamp=raw["timestamp"],
            git_or_version_tag=raw["git_or_version_tag"],
        )


def linf_norm(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def l2_norm(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sqrt(np.sum((np.asarray(a) - np.asarray(b)) ** 2)))

