"""Named experimental setups loaded from the bundled TOML files.

Every physical constant used by the scenarios lives in
``stiffinfer/data/scenarios/*.toml``; this module only interprets them.

Schema (all tables optional unless noted)::

    name, description, published_exact
    [model]    kind = robertson | adiabatic-isobaric | isothermal   (required)
               k (robertson), mechanism, T_anchor, P, T
    [truth]    mu0, s0 or s0_relative, n_truth
    [initial]  phi0                      default initial state if no truth
    [grid]     log10_start, log10_stop, n  (required)
    [presets]  free-form named vectors
    [sampler]  n_warmup, n_draws, n_chains, max_tree_depth, delta, adapt_metric
    [solver]   rtol, atol, atol_sens, max_steps
    [inference_solver]  same keys; used for likelihood evaluations
"""
from __future__ import annotations

import copy
import dataclasses
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bayes import SamplerSettings, TruthSpec
from .mechanism import load_bundled, load_mechanism
from ._kernels import P_ATM
from .stiffode import SolverConfig
from .thermokin import AdiabaticIsobaric, Isothermal, RobertsonModel

__all__ = [
    "Scenario",
    "ScenarioError",
    "list_scenarios",
    "load_scenario",
    "robertson_rate_constants",
    "scenario_h2_autoignition",
    "scenario_quench",
    "scenario_robertson",
]

_ALIASES = {"quench-1075.5": "quench-1075", "h2": "h2-autoignition",
            "h2-adiabatic": "h2-autoignition"}


class ScenarioError(ValueError):
    pass


def _data_dir():
    return resources.files("stiffinfer") / "data" / "scenarios"


def list_scenarios():
    return sorted(p.name[:-5] for p in _data_dir().iterdir() if p.name.endswith(".toml"))


@lru_cache(maxsize=None)
def _read_bundled(name):
    path = _data_dir() / f"{name}.toml"
    if not path.is_file():
        raise ScenarioError(f"unknown scenario {name!r}; available: {', '.join(list_scenarios())}")
    return tomllib.loads(path.read_text(encoding="utf-8"))


def robertson_rate_constants():
    return np.array(_read_bundled("robertson")["model"]["k"], dtype=float)


def _mechanism(ref, base=None):
    if ref is None:
        return None
    if ref.endswith(".yaml") and "/" not in ref and (base is None or not (Path(base) / ref).exists()):
        return load_bundled(ref[:-5])
    return load_mechanism(Path(base or ".") / ref)


def _solver_dict(cfg):
    return {"rtol": cfg.rtol, "atol": cfg.atol, "atol_sens": cfg.atol_sens,
            "max_steps": cfg.max_steps}


@dataclass(frozen=True)
class Scenario:
    name: str
    config: dict = field(repr=False)
    model: object = field(repr=False)
    truth: TruthSpec | None
    phi0: np.ndarray
    t_grid: np.ndarray
    sampler: SamplerSettings
    solver: SolverConfig
    presets: dict = field(default_factory=dict)
    mechanism: object = field(default=None, repr=False)
    inference_solver: SolverConfig | None = None

    @property
    def description(self):
        return self.config.get("description", "")

    @property
    def anchors(self):
        m = self.config["model"]
        out = {k: m[k] for k in ("T_anchor", "P", "T") if k in m}
        if isinstance(self.model, AdiabaticIsobaric):
            out["h0"] = self.model.h0
        return out

    @property
    def species_names(self):
        return list(self.model.species_names)

    def element_matrix(self):
        return self.model.element_matrix()

    def isothermal_variant(self, T=None):
        """Same mixture held at fixed T (default: the anchor temperature)."""
        m = self.config["model"]
        T = float(T if T is not None else m.get("T_anchor", m.get("T")))
        return Isothermal(self.mechanism, T, m.get("P", P_ATM))

    def to_config(self):
        return copy.deepcopy(self.config)

    def to_toml(self):
        return tomli_w.dumps(self.config)

    def resolved(self):
        """JSON-ready view of every resolved value."""
        out = {"name": self.name, "description": self.description,
               "model": self.model.kind, "species": self.species_names,
               "anchors": self.anchors, "phi0": self.phi0.tolist(),
               "t_grid": self.t_grid.tolist(), "n_grid": int(self.t_grid.size),
               "sampler": dataclasses.asdict(self.sampler),
               "solver": _solver_dict(self.solver),
               "inference_solver": _solver_dict(self.inference_solver or self.solver),
               "presets": {k: np.asarray(v).tolist() for k, v in self.presets.items()},
               "published_exact": self.config.get("published_exact", True)}
        if self.truth is not None:
            out["truth"] = {"mu0": self.truth.mu0.tolist(), "s0": self.truth.s0.tolist(),
                            "lower": self.truth.lower.tolist(), "upper": self.truth.upper.tolist(),
                            "n_truth": self.truth.n_truth}
        if isinstance(self.model, RobertsonModel):
            out["k"] = list(self.model.k)
        return out

    @classmethod
    def from_config(cls, config, base_dir=None):
        cfg = copy.deepcopy(config)
        try:
            name = cfg["name"]
            m = cfg["model"]
            kind = m["kind"]
            g = cfg["grid"]
        except KeyError as exc:
            raise ScenarioError(f"scenario config missing required key {exc}") from None
        t_grid = np.logspace(float(g["log10_start"]), float(g["log10_stop"]), int(g["n"]))
        # snap to the decimal grid the exponents describe
        t_grid = 10.0 ** np.round(np.log10(t_grid), 10)

        truth = None
        if "truth" in cfg:
            tr = cfg["truth"]
            mu0 = np.asarray(tr["mu0"], dtype=float)
            if "s0" in tr:
                s0 = np.asarray(tr["s0"], dtype=float)
            elif "s0_relative" in tr:
                s0 = mu0 * float(tr["s0_relative"])
            else:
                raise ScenarioError("truth table needs s0 or s0_relative")
            truth = TruthSpec(mu0, s0, int(tr.get("n_truth", 1000)))
        if "initial" in cfg:
            phi0 = np.asarray(cfg["initial"]["phi0"], dtype=float)
        elif truth is not None:
            phi0 = truth.mu0.copy()
        else:
            raise ScenarioError("scenario needs a [truth] or [initial] table")

        mech = None
        if kind == "robertson":
            model = RobertsonModel(m.get("k"))
        elif kind in ("adiabatic-isobaric", "isothermal"):
            mech = _mechanism(m.get("mechanism"), base_dir)
            if mech is None:
                raise ScenarioError(f"{kind} model requires a mechanism")
            P = float(m.get("P", P_ATM))
            if kind == "adiabatic-isobaric":
                T_anchor = float(m["T_anchor"])
                model = AdiabaticIsobaric.from_temperature(mech, phi0, T_anchor, P)
            else:
                model = Isothermal(mech, float(m["T"]), P)
        else:
            raise ScenarioError(f"unknown model kind {kind!r}")
        if phi0.size != model.n_species:
            raise ScenarioError(f"phi0 has {phi0.size} entries, model has {model.n_species} species")
        sampler = SamplerSettings(**cfg.get("sampler", {}))
        solver = SolverConfig(**cfg.get("solver", {}))
        # likelihood evaluations tolerate a looser solver than rank tracking
        inf_solver = SolverConfig(**cfg["inference_solver"]) if "inference_solver" in cfg else solver
        presets = {k: np.asarray(v, dtype=float) for k, v in cfg.get("presets", {}).items()}
        return cls(name, cfg, model, truth, phi0, t_grid, sampler, solver, presets, mech, inf_solver)

    @classmethod
    def from_toml(cls, text, base_dir=None):
        try:
            return cls.from_config(tomllib.loads(text), base_dir)
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError(f"invalid scenario file: {exc}") from None


def load_scenario(name_or_path):
    """Bundled scenario by name, or a TOML scenario file by path."""
    s = str(name_or_path)
    p = Path(s)
    if s.endswith(".toml") and p.is_file():
        return Scenario.from_toml(p.read_text(encoding="utf-8"), p.parent)
    return Scenario.from_config(_read_bundled(_ALIASES.get(s, s)))


def scenario_robertson():
    return load_scenario("robertson")


def scenario_h2_autoignition():
    return load_scenario("h2-autoignition")


def _quench_presets():
    out = {}
    for name in list_scenarios():
        cfg = _read_bundled(name)
        if cfg["model"]["kind"] == "isothermal" and name.startswith("quench-"):
            out[float(cfg["model"]["T"])] = name
    return out


def scenario_quench(T_fix=None, phi0=None):
    """Isothermal quench preset at T_fix; ``phi0`` overrides the shipped composition.

    ``T_fix=None`` gives the uncooled preset (the highest shipped temperature).
    Other temperatures reuse that preset's composition and grid.
    """
    presets = _quench_presets()
    hottest = presets[max(presets)]
    if T_fix is None:
        T_fix = max(presets)
    T_fix = float(T_fix)
    cfg = copy.deepcopy(_read_bundled(presets.get(T_fix, hottest)))
    if T_fix not in presets:
        cfg["name"] = f"quench-{T_fix:g}"
        cfg["model"]["T"] = T_fix
    if phi0 is not None:
        cfg["initial"]["phi0"] = [float(v) for v in phi0]
    return Scenario.from_config(cfg)
