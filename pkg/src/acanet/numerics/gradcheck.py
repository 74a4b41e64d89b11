"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, backward

__all__ = ["GradCheckReport", "NonDeterministicError", "grad_check", "relative_error"]

# Below this magnitude gradients are compared absolutely rather than relatively.
DEFAULT_FLOOR = 1e-6


class NonDeterministicError(RuntimeError):
    """The closure returned different values for identical inputs."""


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class ParamError:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    errors: dict[str, ParamError] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.errors.values()), default=0.0)

    @property
    def worst(self) -> ParamError | None:
        if not self.errors:
            return None
        return max(self.errors.values(), key=lambda e: e.max_rel_error)

    def passed(self, threshold: float) -> bool:
        return self.max_rel_error < threshold

    def __str__(self) -> str:
        lines = []
        for e in sorted(self.errors.values(), key=lambda e: -e.max_rel_error):
            lines.append(
                f"{e.name:40s} {e.max_rel_error:.3e} at {e.worst_index} "
                f"(analytic {e.analytic:.6e}, numeric {e.numeric:.6e})"
            )
        return "\n".join(lines)


def _as_named(inputs) -> dict[str, Tensor]:
    if isinstance(inputs, Mapping):
        named = dict(inputs)
    else:
        named = {f"input{i}": t for i, t in enumerate(inputs)}
    # aliased tensors (shared weights) are checked once
    unique: dict[str, Tensor] = {}
    seen: set[int] = set()
    for name, t in named.items():
        if id(t) not in seen:
            seen.add(id(t))
            unique[name] = t
    return unique


def grad_check(
    closure: Callable[[], Tensor],
    inputs: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = DEFAULT_FLOOR,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``closure()`` against central differences.

    ``closure`` must rebuild the scalar loss from the current ``.data`` of
    ``inputs`` each call.  Inputs must be float64 or wider; run the closure
    in ``np.longdouble`` to push the difference noise well below the
    truncation error.  ``max_coords`` caps the number of coordinates probed
    per tensor (randomly chosen).
    """
    named = _as_named(inputs)
    for name, t in named.items():
        if np.finfo(t.dtype).nmant < np.finfo(np.float64).nmant:
            raise TypeError(f"grad_check needs float64 or wider inputs; {name} is {t.dtype}")
        t.requires_grad = True
        t.zero_grad()

    loss = closure()
    again = closure()
    if loss.size != 1:
        raise ValueError(f"closure must return a scalar, got shape {loss.shape}")
    if not np.array_equal(loss.data, again.data):
        raise NonDeterministicError(f"closure is not deterministic: {loss.item()!r} vs {again.item()!r}")
    backward(loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, t in named.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_vals = analytic.reshape(-1)[coords]
        n_vals = np.empty(len(coords), dtype=t.dtype)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            up = closure().data.reshape(-1)[0]
            flat[c] = orig - eps
            down = closure().data.reshape(-1)[0]
            flat[c] = orig
            n_vals[j] = (up - down) / (2 * eps)
        rel = relative_error(a_vals, n_vals, floor)
        k = int(np.argmax(rel)) if len(rel) else 0
        worst = np.unravel_index(coords[k], t.shape) if len(rel) else ()
        report.errors[name] = ParamError(
            name,
            float(rel[k]) if len(rel) else 0.0,
            tuple(int(i) for i in worst),
            float(a_vals[k]) if len(rel) else 0.0,
            float(n_vals[k]) if len(rel) else 0.0,
        )
    return report
