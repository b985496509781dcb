"""Attention masks and window plans for the cross-attention draft head.

Positions are 1-based throughout.  Masks are dense boolean arrays where
``mask[i - 1, j - 1]`` says whether query ``i`` may attend to key ``j``.
The draft head never attends to its own position, so every mask built here
is strictly lower triangular.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Window:
    start: int  # n: last key position visible to every query in the window
    size: int   # number of query positions n+1 .. n+size

    @property
    def queries(self) -> range:
        return range(self.start + 1, self.start + self.size + 1)


@dataclass(frozen=True)
class WindowPlan:
    length: int
    k: int
    offset: int
    windows: tuple[Window, ...]

    def window_of(self, pos: int) -> Window:
        for w in self.windows:
            if w.start < pos <= w.start + w.size:
                return w
        raise IndexError(f"position {pos} outside 1..{self.length}")

    def starts(self) -> np.ndarray:
        """Per-query window start, indexed by ``pos - 1``."""
        out = np.empty(self.length, dtype=np.int64)
        for w in self.windows:
            out[w.start:w.start + w.size] = w.start
        return out


def strict_causal_mask(length: int) -> np.ndarray:
    if length < 1:
        raise ValueError("length must be >= 1")
    return np.tril(np.ones((length, length), dtype=bool), k=-1)


def causal_mask(length: int) -> np.ndarray:
    """Ordinary self-attention mask (diagonal allowed), used by the target."""
    return np.tril(np.ones((length, length), dtype=bool))


def window_plan(length: int, k: int, offset: int = 0) -> WindowPlan:
    """Tile query positions ``1..length`` into windows of size ``k``.

    Window starts are ``offset, offset + k, ...``; a nonzero offset adds a
    leading truncated window starting at 0, and the last window is cut at
    ``length``.
    """
    if k < 1:
        raise ValueError("window size k must be >= 1")
    if not 0 <= offset < k:
        raise ValueError(f"offset must lie in [0, {k}), got {offset}")
    if length < 1:
        raise ValueError("length must be >= 1")
    windows = []
    if offset > 0:
        windows.append(Window(0, min(offset, length)))
    start = offset
    while start < length:
        windows.append(Window(start, min(k, length - start)))
        start += k
    return WindowPlan(length, k, offset, tuple(windows))


def inverse_block_mask(plan: WindowPlan) -> np.ndarray:
    """Each query sees only keys at or before the start of its window."""
    starts = plan.starts()
    keys = np.arange(1, plan.length + 1)
    return keys[None, :] <= starts[:, None]


def simulation_mask_step(mask: np.ndarray, plan: WindowPlan, step: int) -> np.ndarray:
    """Advance ``mask`` from simulation step ``step - 1`` to ``step`` in place.

    The state predicted at step ``step - 1`` occupies slot n + step - 1 of
    every window starting at n; queries n+step .. end of window gain that
    slot.  Query n+step then sees every earlier position.
    """
    if not 2 <= step <= plan.k:
        raise ValueError(f"simulation step must lie in [2, {plan.k}], got {step}")
    if mask.shape != (plan.length, plan.length):
        raise ValueError("mask does not match plan length")
    for w in plan.windows:
        if step > w.size:
            continue
        slot = w.start + step - 1
        mask[slot:w.start + w.size, slot - 1] = True
    return mask


def simulation_mask(plan: WindowPlan, step: int) -> np.ndarray:
    """Fresh mask as it stands after ``step`` simulation steps."""
    mask = inverse_block_mask(plan)
    for i in range(2, step + 1):
        simulation_mask_step(mask, plan, i)
    return mask


def render(mask: np.ndarray) -> str:
    """ASCII grid, one row per query: 'x' allowed, '.' masked."""
    return "\n".join("".join("x" if v else "." for v in row) for row in mask)
