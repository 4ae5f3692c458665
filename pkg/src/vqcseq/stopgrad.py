"""Stop-gradient with an optional record/replay tape.

Every ``sg[.]`` in the model and losses goes through :func:`stop_gradient`,
and every non-differentiable selection (argmin code indices, sampled
anchors) through :func:`frozen`.  Outside a tape both behave like
``detach``.  Under :meth:`StopGradientTape.record` the values are stored;
under :meth:`StopGradientTape.replay` the stored values are returned in
order instead of being recomputed.  A replayed forward pass is then a
smooth function whose exact derivative is what autograd reports, which is
what finite-difference checks need.
"""

from __future__ import annotations

import contextlib
import contextvars

import torch

_ACTIVE = contextvars.ContextVar("vqcseq_sg_tape", default=None)


class StopGradientTape:
    def __init__(self):
        self._values = []
        self._pos = 0
        self._recording = False

    def __len__(self):
        return len(self._values)

    @contextlib.contextmanager
    def record(self):
        self._values.clear()
        self._recording = True
        token = _ACTIVE.set(self)
        try:
            yield self
        finally:
            _ACTIVE.reset(token)
            self._recording = False

    @contextlib.contextmanager
    def replay(self):
        if not self._values:
            raise RuntimeError("nothing recorded on this tape")
        self._pos = 0
        token = _ACTIVE.set(self)
        try:
            yield self
        finally:
            _ACTIVE.reset(token)
        if self._pos != len(self._values):
            raise RuntimeError(f"replay consumed {self._pos} of {len(self._values)} recorded values; the computation graph changed")

    def _take(self, value):
        if self._recording:
            self._values.append(value.clone() if isinstance(value, torch.Tensor) else value)
            return value
        if self._pos >= len(self._values):
            raise RuntimeError("replay requested more values than were recorded")
        out = self._values[self._pos]
        self._pos += 1
        return out


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    x = x.detach()
    tape = _ACTIVE.get()
    return x if tape is None else tape._take(x)


def frozen(x):
    """Pass through a non-differentiable value (indices, masks, draws)."""
    tape = _ACTIVE.get()
    return x if tape is None else tape._take(x)


sg = stop_gradient
