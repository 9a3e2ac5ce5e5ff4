"""Modality ablation and lighting sweep."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from ..errors import ConfigError
from ..mfef import MFEFNet, ModelConfig
from .metrics import Metrics, evaluate
from .training import PreparedData, Progress, TrainConfig, TrainHistory, _as_prepared, train

MODALITY_NAMES = ("image", "cloud", "gps")

# row order of the classic modality ablation table
DEFAULT_COMBOS: tuple[tuple[bool, bool, bool], ...] = (
    (True, False, False),
    (False, True, False),
    (True, False, True),
    (True, True, False),
    (False, True, True),
    (True, True, True),
)


def combo_name(mask: Sequence[bool]) -> str:
    return "+".join(n for n, m in zip(MODALITY_NAMES, mask) if m)


def parse_combo(name: str) -> tuple[bool, bool, bool]:
    parts = set(name.split("+"))
    unknown = parts - set(MODALITY_NAMES)
    if unknown or not parts:
        raise ConfigError(f"unknown modality combination {name!r}")
    return tuple(n in parts for n in MODALITY_NAMES)


def percent_change(new: float, base: float) -> float:
    return (new - base) / base * 100.0


@dataclass
class AblationRow:
    combo: str
    rmse_day: float
    rmse_night: float | None  # None: combination has no camera, lighting does not apply
    change_pct: float | None

    @classmethod
    def from_cells(cls, combo: str, day: float, night: float | None) -> "AblationRow":
        return cls(combo, day, night, None if night is None else percent_change(night, day))


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def row(self, combo: str) -> AblationRow:
        for r in self.rows:
            if r.combo == combo:
                return r
        raise KeyError(combo)


@dataclass
class AblationResult:
    report: AblationReport
    models: dict[str, MFEFNet] = field(default_factory=dict)
    metrics: dict[tuple[str, str], Metrics] = field(default_factory=dict)  # (combo, "day"|"night")
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    night_alpha: float = 0.14


def ablation_suite(
    data,
    combos: Sequence[Sequence[bool]] = DEFAULT_COMBOS,
    model_cfg: ModelConfig = ModelConfig(width_mult=0.25),
    train_cfg: TrainConfig = TrainConfig(),
    night_alpha: float = 0.14,
    progress: Progress | None = None,
) -> AblationResult:
    """Train one model per modality combination and score it at day and night."""
    combos = [tuple(bool(m) for m in c) for c in combos]
    if not combos:
        raise ConfigError("combos must be nonempty")
    for c in combos:
        if len(c) != 3 or not any(c):
            raise ConfigError(f"combination {c} selects no modality")
    if not 0 < night_alpha < 1:
        raise ConfigError(f"night_alpha must lie in (0, 1), got {night_alpha}")
    data = _as_prepared(data)
    result = AblationResult(AblationReport([]), night_alpha=night_alpha)
    for mask in combos:
        name = combo_name(mask)
        if progress is not None:
            progress(f"training {name}")
        tcfg = TrainConfig(**{**train_cfg.__dict__, "modality_mask": mask})
        model, hist = train(data, model_cfg, tcfg, progress)
        day = evaluate(model, data, "test")
        result.metrics[(name, "day")] = day
        night_rmse = None
        if mask[0]:
            night = evaluate(model, data, "test", night_alpha)
            result.metrics[(name, "night")] = night
            night_rmse = night.rmse_db
        result.report.rows.append(AblationRow.from_cells(name, day.rmse_db, night_rmse))
        result.models[name] = model
        result.histories[name] = hist
        if progress is not None:
            progress(f"{name}: day {day.rmse_db:.3f} dB" + ("" if night_rmse is None else f", night {night_rmse:.3f} dB"))
    return result


@dataclass
class ReductionRow:
    combo: str
    baseline: str
    alpha: float
    reduction_pct: float


@dataclass
class LightingReport:
    alphas: list[float]
    rmse: dict[str, list[float]]  # combo -> RMSE per alpha
    reductions: list[ReductionRow]


def lighting_suite(
    data, models: Mapping[str, MFEFNet], alphas: Sequence[float] = (1.0, 0.5, 0.3, 0.14)
) -> LightingReport:
    """RMSE of every trained combination across a brightness sweep (alpha = 1 is daylight).

    The reduction table gives, per alpha, how much lower each combination's
    RMSE is than each single-modality baseline, in percent of the baseline.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ConfigError("alphas must be nonempty")
    for a in alphas:
        if not 0 < a <= 1:
            raise ConfigError(f"alpha must lie in (0, 1], got {a}")
    data: PreparedData = _as_prepared(data)
    table: dict[str, list[float]] = {}
    for name, model in models.items():
        if model.cfg.modalities[0]:
            table[name] = [evaluate(model, data, "test", None if a == 1.0 else a).rmse_db for a in alphas]
        else:
            day = evaluate(model, data, "test").rmse_db
            table[name] = [day] * len(alphas)
    reductions = []
    baselines = [n for n in table if "+" not in n]
    for base in baselines:
        for name in table:
            if name == base:
                continue
            for k, a in enumerate(alphas):
                reductions.append(ReductionRow(name, base, a, -percent_change(table[name][k], table[base][k])))
    return LightingReport(alphas, table, reductions)
