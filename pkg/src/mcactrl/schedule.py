"""Control windows for global injection / local query and the per-(step, layer) dispatcher.

Step index 0 is the first (noisiest) denoising step. Windows are half-open
``[start, end)``; layer thresholds are inclusive (``l >= layer``). Layer indices
use a 16-layer reference numbering whose decoder starts at 8; ``for_model``
translates them to a concrete denoiser.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError

REFERENCE_LAYERS = 16
REFERENCE_DECODER_START = 8


class EditDecision(enum.Enum):
    GLOBAL_INJECT = "sagi"
    LOCAL_QUERY = "salq"
    STANDARD = "self-attention"


@dataclass(frozen=True)
class ControlSchedule:
    s_gi: int = 0
    e_gi: int = 20
    s_lq: int = 20
    e_lq: int = 48
    layer_gi: int = 0
    layer_lq: int = 8
    total_steps: int = 50

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ControlSchedule":
        values = {}
        names = {f.name for f in fields(cls)}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"expected key=value, got {raw!r}")
            if key not in names:
                raise ConfigError(f"unknown schedule key {key!r}")
            try:
                values[key] = int(val)
            except ValueError:
                raise ConfigError(f"{key} must be an integer, got {val.strip()!r}") from None
        return cls(**values)

    def rescaled(self, steps: int) -> "ControlSchedule":
        """Same windows expressed for a sampler with ``steps`` steps (proportional, floored)."""
        f = lambda x: (x * steps) // self.total_steps  # noqa: E731
        return replace(self, s_gi=f(self.s_gi), e_gi=f(self.e_gi), s_lq=f(self.s_lq), e_lq=f(self.e_lq),
                       total_steps=steps)

    def for_model(self, num_layers: int, decoder_start: int) -> "ControlSchedule":
        return replace(
            self,
            layer_gi=map_reference_layer(self.layer_gi, num_layers, decoder_start),
            layer_lq=map_reference_layer(self.layer_lq, num_layers, decoder_start),
        )


PRESETS: dict[str, ControlSchedule] = {
    "swap-uniform": ControlSchedule(0, 20, 20, 48, 0, 8, 50),
    "gen-uniform": ControlSchedule(0, 35, 35, 48, 0, 0, 50),
}

EMPTY = ControlSchedule(0, 0, 0, 0, 0, 0, 50)


def preset(name: str) -> ControlSchedule:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown schedule preset {name!r}; known: {', '.join(PRESETS)}") from None


def map_reference_layer(layer: int, num_layers: int, decoder_start: int) -> int:
    """Translate a reference layer index into ``num_layers`` layers split at ``decoder_start``.

    Encoder and decoder halves are scaled independently so the first reference
    decoder layer lands on the model's first decoder layer; indices at or past
    the reference end map past the model's last layer.
    """
    if layer <= 0:
        return 0
    if layer >= REFERENCE_LAYERS:
        return num_layers
    if layer < REFERENCE_DECODER_START:
        return (layer * decoder_start) // REFERENCE_DECODER_START
    dec_ref = REFERENCE_LAYERS - REFERENCE_DECODER_START
    return decoder_start + ((layer - REFERENCE_DECODER_START) * (num_layers - decoder_start)) // dec_ref


def edit_dispatch(t: int, l: int, schedule: ControlSchedule) -> EditDecision:
    if schedule.s_gi <= t < schedule.e_gi and l >= schedule.layer_gi:
        return EditDecision.GLOBAL_INJECT
    if schedule.s_lq <= t < schedule.e_lq and l >= schedule.layer_lq:
        return EditDecision.LOCAL_QUERY
    return EditDecision.STANDARD


def validate_schedule(schedule: ControlSchedule, allow_reverse: bool = False) -> list[str]:
    """Every violated ordering clause, as text; empty means valid.

    The default order is injection then query with no gap. ``allow_reverse``
    accepts the query-first ablation order instead (still gap-free).
    """
    s = schedule
    out = []
    if s.total_steps < 1:
        out.append("total_steps >= 1")
    for name in ("s_gi", "e_gi", "s_lq", "e_lq"):
        v = getattr(s, name)
        if not 0 <= v <= s.total_steps:
            out.append(f"0 <= {name} <= total_steps")
    if s.s_gi > s.e_gi:
        out.append("s_gi <= e_gi")
    if s.s_lq > s.e_lq:
        out.append("s_lq <= e_lq")
    if s.layer_gi < 0:
        out.append("layer_gi >= 0")
    if s.layer_lq < 0:
        out.append("layer_lq >= 0")
    if allow_reverse:
        if s.e_lq != s.s_gi:
            out.append("e_lq = s_gi (reverse order, no gap)")
    else:
        if s.e_gi != s.s_lq:
            out.append("e_gi = s_lq (no gap)")
    if max(s.s_gi, s.s_lq) < min(s.e_gi, s.e_lq):
        out.append("SAGI and SALQ windows must not overlap")
    return out
