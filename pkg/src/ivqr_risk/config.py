"""Run configuration: YAML (or a previous run manifest) -> RunConfig."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import DatasetSpec, TimeSeriesPanel, load_csv, yoy_change
from .ivqr import IVQROptions
from .mc import DGPSpec
from .risk import DEFAULT_TAIL_TAUS, DEFAULT_TAUS

ENV_CONFIG = "IVQR_RISK_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    name: str
    series: str
    category: str = "all"


@dataclass(frozen=True)
class DerivedSeries:
    name: str
    source: str
    transform: str = "percent_change"


@dataclass
class EstimationConfig:
    method: str = "auto"
    density_method: str = "qr"
    tau: float = 0.8
    taus: tuple[float, ...] = DEFAULT_TAUS
    grid_points: int = 201
    grid_span_ses: float = 10.0
    refinement_rounds: int = 2
    smoothing_bandwidth: Optional[float] = None
    density_bandwidth: Optional[float] = None
    cov_type: str = "robust"
    contrast_mode: str = "independent"
    bootstrap_reps: int = 200
    tails: tuple[float, float] = DEFAULT_TAIL_TAUS

    def ivqr_options(self, horizon: int) -> IVQROptions:
        return IVQROptions(
            grid_points=self.grid_points,
            grid_span_ses=self.grid_span_ses,
            refinement_rounds=self.refinement_rounds,
            smoothing_bandwidth=self.smoothing_bandwidth,
            density_bandwidth=self.density_bandwidth,
            cov_type=self.cov_type,
            hac_lags=max(horizon - 1, 0),
        )


@dataclass
class SimulationConfig:
    dgp: DGPSpec = field(default_factory=DGPSpec)
    reps: int = 200
    taus: tuple[float, ...] = (0.2, 0.5, 0.8)
    estimators: tuple[str, ...] = ("ivqr_grid",)


@dataclass
class RunConfig:
    data_path: Optional[Path] = None
    date_column: Optional[str] = None
    derived: tuple[DerivedSeries, ...] = ()
    endogenous: str = ""
    controls: tuple[str, ...] = ()
    include_own_rate: bool = True
    instruments: dict[str, tuple[str, ...]] = field(default_factory=dict)
    horizons: tuple[int, ...] = (12,)
    sample_start: Optional[str] = None
    sample_end: Optional[str] = None
    groups: tuple[GroupSpec, ...] = ()
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    seed: int = 0
    source: Optional[Path] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        d["data_path"] = None if self.data_path is None else str(self.data_path)
        return d

    def group(self, name: Optional[str]) -> GroupSpec:
        if not self.groups:
            raise ConfigError("config defines no groups")
        if name is None:
            return self.groups[0]
        for g in self.groups:
            if g.name == name:
                return g
        raise ConfigError(f"unknown group {name!r}; have {[g.name for g in self.groups]}")

    def instrument(self, label: Optional[str]) -> tuple[str, tuple[str, ...]]:
        if not self.instruments:
            raise ConfigError("config defines no instruments")
        if label is None:
            label = next(iter(self.instruments))
        if label not in self.instruments:
            raise ConfigError(f"unknown instrument {label!r}; have {list(self.instruments)}")
        return label, self.instruments[label]

    def dataset_spec(self, group: GroupSpec, horizon: int,
                     instrument: Optional[str] = None) -> DatasetSpec:
        controls = ((group.series,) if self.include_own_rate else ()) + tuple(self.controls)
        zs: tuple[str, ...] = ()
        if self.instruments:
            _, zs = self.instrument(instrument)
        return DatasetSpec(
            dependent_series=group.series,
            endogenous_series=self.endogenous,
            horizon_months=horizon,
            control_series=controls,
            instrument_series=zs,
            sample_start=self.sample_start,
            sample_end=self.sample_end,
            label=f"{group.name}_h{horizon}",
        )

    def load_panel(self) -> TimeSeriesPanel:
        if self.data_path is None:
            raise ConfigError("config has no data.path")
        panel = load_csv(self.data_path, self.date_column)
        for spec in self.derived:
            values = yoy_change(panel[spec.source], spec.transform, panel.dates)
            panel = panel.with_series(spec.name, values)
        self.validate_against(panel)
        return panel

    def validate_against(self, panel: TimeSeriesPanel) -> None:
        names = set(panel.names)
        wanted = {self.endogenous, *self.controls, *(g.series for g in self.groups)}
        for zs in self.instruments.values():
            wanted.update(zs)
        wanted.discard("")
        missing = sorted(wanted - names)
        if missing:
            raise ConfigError(f"series named in config but absent from data: {missing}")


def _tuple(x, cast=lambda v: v):
    if x is None:
        return ()
    if isinstance(x, (list, tuple)):
        return tuple(cast(v) for v in x)
    return (cast(x),)


def parse_config(raw: dict, base: Optional[Path] = None) -> RunConfig:
    if not isinstance(raw, dict) or not raw:
        raise ConfigError("configuration is empty")
    if "manifest_version" in raw:
        raw = raw["config"]
        return _from_manifest(raw)
    known = {"data", "endogenous", "controls", "include_own_rate", "instruments", "horizons",
             "sample", "groups", "estimation", "simulation", "seed"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    data = raw.get("data") or {}
    path = data.get("path")
    if path is not None:
        path = Path(path)
        if not path.is_absolute() and base is not None:
            path = (base / path).resolve()
    derived = tuple(
        DerivedSeries(d["name"], d["source"], d.get("transform", "percent_change"))
        for d in data.get("derived", []) or []
    )
    instruments = raw.get("instruments") or {}
    if isinstance(instruments, (list, str)):
        instruments = {"iv": instruments}
    instruments = {str(k): _tuple(v, str) for k, v in instruments.items()}
    groups = tuple(
        GroupSpec(g["name"], g.get("series", g["name"]), g.get("category", "all"))
        for g in raw.get("groups", []) or []
    )
    sample = raw.get("sample") or {}

    est_raw = dict(raw.get("estimation") or {})
    if "taus" in est_raw:
        est_raw["taus"] = _tuple(est_raw["taus"], float)
    if "tails" in est_raw:
        est_raw["tails"] = _tuple(est_raw["tails"], float)
    try:
        est = EstimationConfig(**est_raw)
    except TypeError as exc:
        raise ConfigError(f"bad estimation section: {exc}") from None

    sim_raw = dict(raw.get("simulation") or {})
    dgp_keys = {"n", "rho", "pi", "alpha_base", "alpha_slope", "seed"}
    dgp_kwargs = {k: sim_raw.pop(k) for k in list(sim_raw) if k in dgp_keys}
    dgp_kwargs.setdefault("seed", int(raw.get("seed", 0)))
    try:
        dgp = DGPSpec(**dgp_kwargs)
        sim = SimulationConfig(
            dgp=dgp,
            reps=int(sim_raw.pop("reps", 200)),
            taus=_tuple(sim_raw.pop("taus", (0.2, 0.5, 0.8)), float),
            estimators=_tuple(sim_raw.pop("estimators", ("ivqr_grid",)), str),
        )
    except TypeError as exc:
        raise ConfigError(f"bad simulation section: {exc}") from None
    if sim_raw:
        raise ConfigError(f"unknown simulation keys: {sorted(sim_raw)}")

    return RunConfig(
        data_path=path,
        date_column=data.get("date_column"),
        derived=derived,
        endogenous=str(raw.get("endogenous", "")),
        controls=_tuple(raw.get("controls"), str),
        include_own_rate=bool(raw.get("include_own_rate", True)),
        instruments=instruments,
        horizons=_tuple(raw.get("horizons", 12), int),
        sample_start=None if sample.get("start") is None else str(sample["start"]),
        sample_end=None if sample.get("end") is None else str(sample["end"]),
        groups=groups,
        estimation=est,
        simulation=sim,
        seed=int(raw.get("seed", 0)),
        source=base,
    )


def _from_manifest(d: dict) -> RunConfig:
    est = dict(d["estimation"])
    est["taus"] = tuple(est["taus"])
    est["tails"] = tuple(est["tails"])
    sim = d["simulation"]
    return RunConfig(
        data_path=None if d["data_path"] is None else Path(d["data_path"]),
        date_column=d["date_column"],
        derived=tuple(DerivedSeries(**x) for x in d["derived"]),
        endogenous=d["endogenous"],
        controls=tuple(d["controls"]),
        include_own_rate=d["include_own_rate"],
        instruments={k: tuple(v) for k, v in d["instruments"].items()},
        horizons=tuple(d["horizons"]),
        sample_start=d["sample_start"],
        sample_end=d["sample_end"],
        groups=tuple(GroupSpec(**g) for g in d["groups"]),
        estimation=EstimationConfig(**est),
        simulation=SimulationConfig(
            dgp=DGPSpec(**sim["dgp"]), reps=sim["reps"], taus=tuple(sim["taus"]),
            estimators=tuple(sim["estimators"]),
        ),
        seed=d["seed"],
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        raw = json.loads(text) if text.strip() else None
    else:
        raw = yaml.safe_load(text)
    if raw is None:
        raise ConfigError(f"{path}: configuration is empty")
    return parse_config(raw, base=path.parent.resolve())
