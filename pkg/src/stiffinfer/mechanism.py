"""Parsing and validation of Cantera-style YAML reaction mechanisms.

Only the subset needed for small gas-phase mechanisms is accepted: one
ideal-gas phase, NASA7 thermo, and elementary / three-body / Troe falloff
reactions. Anything else raises :class:`MechanismParseError`.

Rate parameters are converted to SI on input (m, kmol, s, J/kmol), so
``Reaction.rate.A`` is in (m^3/kmol)^(order-1)/s.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

__all__ = [
    "ATOMIC_MASSES",
    "Arrhenius",
    "Mechanism",
    "MechanismError",
    "MechanismParseError",
    "MechanismValidationError",
    "NASA7",
    "Reaction",
    "Species",
    "Troe",
    "element_matrix",
    "load_bundled",
    "load_mechanism",
    "mechanism_to_yaml",
    "parse_mechanism",
]

# kg/kmol
ATOMIC_MASSES = {
    "H": 1.008,
    "He": 4.002602,
    "C": 12.011,
    "N": 14.007,
    "O": 15.999,
    "Ar": 39.95,
}

_LENGTH = {"m": 1.0, "cm": 1e-2, "mm": 1e-3}
_QUANTITY = {"kmol": 1.0, "mol": 1e-3, "molec": 1.0 / 6.02214076e26}
_ENERGY = {
    "J/kmol": 1.0,
    "J/mol": 1e3,
    "kJ/mol": 1e6,
    "cal/mol": 4184.0,
    "kcal/mol": 4.184e6,
}
_TOP_KEYS = {"description", "generator", "input-files", "cantera-version", "date",
             "units", "phases", "species", "reactions"}
_PHASE_KEYS = {"name", "thermo", "elements", "species", "kinetics", "state"}
_SPECIES_KEYS = {"name", "composition", "thermo", "note"}
_THERMO_KEYS = {"model", "temperature-ranges", "data", "note"}
_REACTION_KEYS = {"equation", "type", "rate-constant", "low-P-rate-constant",
                  "high-P-rate-constant", "Troe", "efficiencies", "duplicate", "note"}


class MechanismError(ValueError):
    """Base class for mechanism problems."""


class MechanismParseError(MechanismError):
    """The document is malformed or uses an unsupported feature."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(field)
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class MechanismValidationError(MechanismError):
    """The document parsed but violates a model invariant."""

    def __init__(self, message, invariant):
        self.invariant = invariant
        super().__init__(f"{invariant}: {message}")


@dataclass(frozen=True)
class NASA7:
    t_min: float
    t_mid: float
    t_max: float
    low: tuple
    high: tuple

    def coeffs(self, T):
        return self.low if T < self.t_mid else self.high


@dataclass(frozen=True)
class Species:
    name: str
    composition: dict
    molar_mass: float
    thermo: NASA7 | None = None


@dataclass(frozen=True)
class Arrhenius:
    A: float
    b: float
    Ea: float  # J/kmol


@dataclass(frozen=True)
class Troe:
    A: float
    T3: float
    T1: float
    T2: float | None = None


@dataclass(frozen=True)
class Reaction:
    equation: str
    reactants: dict
    products: dict
    kind: str = "elementary"
    rate: Arrhenius = None
    low_rate: Arrhenius | None = None
    troe: Troe | None = None
    efficiencies: dict = field(default_factory=dict)
    reversible: bool = True
    duplicate: bool = False


@dataclass(frozen=True)
class Mechanism:
    """Immutable mechanism model; species order defines state-vector order."""

    name: str
    elements: tuple
    atomic_masses: tuple
    species: tuple
    reactions: tuple = ()

    @property
    def n_s(self):
        return len(self.species)

    @property
    def n_e(self):
        return len(self.elements)

    @property
    def n_r(self):
        return len(self.reactions)

    @property
    def species_names(self):
        return tuple(s.name for s in self.species)

    def species_index(self, name):
        try:
            return self.species_names.index(name)
        except ValueError:
            raise KeyError(f"unknown species {name!r}") from None

    @cached_property
    def molar_masses(self):
        return np.array([s.molar_mass for s in self.species])

    @cached_property
    def stoich(self):
        """(nu_reactant, nu_product), each n_r x n_s."""
        nu_f = np.zeros((self.n_r, self.n_s))
        nu_r = np.zeros((self.n_r, self.n_s))
        for r, rxn in enumerate(self.reactions):
            for name, nu in rxn.reactants.items():
                nu_f[r, self.species_index(name)] = nu
            for name, nu in rxn.products.items():
                nu_r[r, self.species_index(name)] = nu
        return nu_f, nu_r

    def validate(self):
        """Check every invariant; raise MechanismValidationError on the first failure."""
        known = set(self.elements)
        for sp in self.species:
            bad = set(sp.composition) - known
            if bad:
                raise MechanismValidationError(
                    f"species {sp.name} uses undeclared element(s) {sorted(bad)}",
                    "species-elements")
            if not sp.molar_mass > 0:
                raise MechanismValidationError(
                    f"species {sp.name} has non-positive molar mass", "molar-mass")
            th = sp.thermo
            if th is not None and not th.t_min < th.t_mid < th.t_max:
                raise MechanismValidationError(
                    f"species {sp.name} NASA7 ranges are not contiguous/ordered",
                    "nasa7-ranges")
        names = set(self.species_names)
        if len(names) != self.n_s:
            raise MechanismValidationError("duplicate species names", "unique-species")
        for r, rxn in enumerate(self.reactions):
            used = set(rxn.reactants) | set(rxn.products) | set(rxn.efficiencies)
            bad = used - names
            if bad:
                raise MechanismValidationError(
                    f"reaction {r + 1} ({rxn.equation}) references undeclared "
                    f"species {sorted(bad)}", "reaction-species")
            coeffs = list(rxn.reactants.values()) + list(rxn.products.values())
            if any(c < 0 for c in coeffs):
                raise MechanismValidationError(
                    f"reaction {r + 1} ({rxn.equation}) has a negative coefficient",
                    "stoichiometry-sign")
            if rxn.kind == "falloff" and (rxn.low_rate is None or rxn.rate is None):
                raise MechanismValidationError(
                    f"falloff reaction {r + 1} ({rxn.equation}) needs both "
                    "low- and high-pressure rates", "falloff-parameters")
            comp = {s.name: s.composition for s in self.species}
            for el in self.elements:
                balance = Fraction(0)
                for name, nu in rxn.products.items():
                    balance += Fraction(nu).limit_denominator(10**6) * comp[name].get(el, 0)
                for name, nu in rxn.reactants.items():
                    balance -= Fraction(nu).limit_denominator(10**6) * comp[name].get(el, 0)
                if balance != 0:
                    raise MechanismValidationError(
                        f"reaction {r + 1} ({rxn.equation}) does not conserve "
                        f"element {el} (net {balance})", "element-balance")
        return self


def element_matrix(mech):
    """n_s x n_e matrix of element mass fractions within each species.

    Entry (i, e) is n_{e,i} W_e / W_i, so each row sums to one and
    ``C.T @ phi`` is the vector of element mass fractions.
    """
    C = np.zeros((mech.n_s, mech.n_e))
    for i, sp in enumerate(mech.species):
        for e, (el, w) in enumerate(zip(mech.elements, mech.atomic_masses)):
            C[i, e] = sp.composition.get(el, 0) * w / sp.molar_mass
    return C


# ---------------------------------------------------------------------------
# YAML loading with line tracking

class _LineDict(dict):
    line = None


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    d = _LineDict(loader.construct_pairs(node, deep=True))
    d.line = node.start_mark.line + 1
    return d


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG,
                            _construct_mapping)


def _line(obj):
    return getattr(obj, "line", None)


def _require_mapping(obj, where, parent=None):
    if not isinstance(obj, dict):
        raise MechanismParseError("expected a mapping", _line(parent), where)
    return obj


def _check_keys(obj, allowed, where):
    extra = set(obj) - allowed
    if extra:
        raise MechanismParseError(f"unsupported key(s) {sorted(extra)}", _line(obj), where)


def _number(value, where, line):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise MechanismParseError(f"expected a number, got {value!r}", line, where)
    return float(value)


_TERM = re.compile(r"^(?:(\d+(?:\.\d*)?|\.\d+)\s*)?([A-Za-z][A-Za-z0-9_()\-,*']*)$")


def _parse_side(text, where, line):
    out = {}
    third_body = False
    for term in re.split(r"\s\+\s", " " + text.strip() + " "):
        term = term.strip()
        if not term:
            continue
        if term == "M":
            third_body = True
            continue
        m = _TERM.match(term)
        if m is None:
            raise MechanismParseError(f"cannot parse term {term!r}", line, where)
        nu = float(m.group(1)) if m.group(1) else 1.0
        name = m.group(2)
        out[name] = out.get(name, 0.0) + nu
    return out, third_body


def _parse_equation(eq, where, line):
    falloff = "(+M)" in eq.replace(" ", "")
    if falloff:
        eq = re.sub(r"\(\s*\+\s*M\s*\)", " ", eq)
    elif re.search(r"\(\s*\+", eq):
        raise MechanismParseError("only (+M) falloff colliders are supported", line, where)
    for arrow, reversible in (("<=>", True), ("=>", False), ("=", True)):
        if arrow in eq:
            lhs, rhs = eq.split(arrow, 1)
            break
    else:
        raise MechanismParseError(f"no reaction arrow in {eq!r}", line, where)
    reactants, tb_l = _parse_side(lhs, where, line)
    products, tb_r = _parse_side(rhs, where, line)
    if tb_l != tb_r:
        raise MechanismParseError("unbalanced third body M", line, where)
    return reactants, products, reversible, falloff, tb_l


def _arrhenius(node, order, units, where):
    node = _require_mapping(node, where)
    _check_keys(node, {"A", "b", "Ea"}, where)
    for key in ("A", "b", "Ea"):
        if key not in node:
            raise MechanismParseError(f"missing {key}", _line(node), where)
    conc = units["quantity"] / units["length"] ** 3  # kmol/m^3 per mechanism unit
    A = _number(node["A"], where + ".A", _line(node)) * conc ** (1.0 - order)
    b = _number(node["b"], where + ".b", _line(node))
    Ea = _number(node["Ea"], where + ".Ea", _line(node)) * units["activation-energy"]
    return Arrhenius(A=A, b=b, Ea=Ea)


def _parse_units(doc):
    raw = doc.get("units", {}) or {}
    _require_mapping(raw, "units", doc)
    _check_keys(raw, {"length", "time", "quantity", "activation-energy"}, "units")
    try:
        length = _LENGTH[raw.get("length", "m")]
        quantity = _QUANTITY[raw.get("quantity", "kmol")]
        energy = raw.get("activation-energy", "cal/mol")
        if energy == "K":
            ea = 8314.46261815324
        else:
            ea = _ENERGY[energy]
    except KeyError as exc:
        raise MechanismParseError(f"unsupported unit {exc.args[0]!r}", _line(raw), "units") from None
    if raw.get("time", "s") != "s":
        raise MechanismParseError("only time unit 's' is supported", _line(raw), "units.time")
    return {"length": length, "quantity": quantity, "activation-energy": ea}


def _parse_species(node, i, elements):
    where = f"species[{i}]"
    node = _require_mapping(node, where)
    _check_keys(node, _SPECIES_KEYS, where)
    name = node.get("name")
    if not isinstance(name, str):
        raise MechanismParseError("species needs a name", _line(node), where)
    where = f"species[{i}] ({name})"
    comp = _require_mapping(node.get("composition"), where + ".composition", node)
    composition = {}
    for el, n in comp.items():
        composition[str(el)] = _number(n, where + ".composition", _line(comp))
    unknown = [el for el in composition if el not in elements]
    if unknown:
        raise MechanismValidationError(
            f"species {name} uses undeclared element(s) {unknown}", "species-elements")
    mw = sum(n * elements[el] for el, n in composition.items())
    th = _require_mapping(node.get("thermo"), where + ".thermo", node)
    _check_keys(th, _THERMO_KEYS, where + ".thermo")
    if th.get("model") != "NASA7":
        raise MechanismParseError(
            f"unsupported thermo model {th.get('model')!r}", _line(th), where + ".thermo.model")
    ranges = th.get("temperature-ranges")
    data = th.get("data")
    if not (isinstance(ranges, list) and len(ranges) == 3):
        raise MechanismParseError("NASA7 needs exactly two temperature ranges",
                                  _line(th), where + ".thermo.temperature-ranges")
    if not (isinstance(data, list) and len(data) == 2 and all(
            isinstance(row, list) and len(row) == 7 for row in data)):
        raise MechanismParseError("NASA7 data must be two rows of 7 coefficients",
                                  _line(th), where + ".thermo.data")
    t = [_number(v, where + ".thermo.temperature-ranges", _line(th)) for v in ranges]
    rows = [tuple(_number(v, where + ".thermo.data", _line(th)) for v in row) for row in data]
    return Species(name=name, composition=composition, molar_mass=mw,
                   thermo=NASA7(t[0], t[1], t[2], rows[0], rows[1]))


def _parse_reaction(node, i, units):
    where = f"reactions[{i}]"
    node = _require_mapping(node, where)
    _check_keys(node, _REACTION_KEYS, where)
    eq = node.get("equation")
    if not isinstance(eq, str):
        raise MechanismParseError("reaction needs an equation", _line(node), where)
    where = f"reactions[{i}] ({eq})"
    reactants, products, reversible, falloff, third_body = _parse_equation(eq, where, _line(node))
    kind = node.get("type", "elementary")
    if kind not in ("elementary", "three-body", "falloff"):
        raise MechanismParseError(f"unsupported reaction type {kind!r}", _line(node), where)
    if falloff and kind != "falloff":
        raise MechanismParseError("(+M) equation must have type falloff", _line(node), where)
    if kind == "falloff" and not falloff:
        raise MechanismParseError("falloff reaction needs (+M) in its equation",
                                  _line(node), where)
    if kind == "three-body" and not third_body:
        raise MechanismParseError("three-body reaction needs + M in its equation",
                                  _line(node), where)
    if kind == "elementary" and third_body:
        raise MechanismParseError("equation has + M but type is not three-body",
                                  _line(node), where)
    order = sum(reactants.values())
    low = troe = None
    if kind == "falloff":
        for key in ("low-P-rate-constant", "high-P-rate-constant"):
            if key not in node:
                raise MechanismValidationError(
                    f"falloff reaction {i + 1} ({eq}) is missing {key}", "falloff-parameters")
        rate = _arrhenius(node["high-P-rate-constant"], order, units, where + ".high-P")
        low = _arrhenius(node["low-P-rate-constant"], order + 1, units, where + ".low-P")
        if "Troe" in node:
            tr = _require_mapping(node["Troe"], where + ".Troe", node)
            _check_keys(tr, {"A", "T3", "T1", "T2"}, where + ".Troe")
            troe = Troe(A=_number(tr["A"], where, _line(tr)), T3=_number(tr["T3"], where, _line(tr)),
                        T1=_number(tr["T1"], where, _line(tr)),
                        T2=_number(tr["T2"], where, _line(tr)) if "T2" in tr else None)
    else:
        if "rate-constant" not in node:
            raise MechanismParseError("missing rate-constant", _line(node), where)
        if "Troe" in node or "low-P-rate-constant" in node:
            raise MechanismParseError("falloff parameters on a non-falloff reaction",
                                      _line(node), where)
        rate = _arrhenius(node["rate-constant"], order + (1 if kind == "three-body" else 0),
                          units, where + ".rate-constant")
    eff = {}
    if "efficiencies" in node:
        if kind == "elementary":
            raise MechanismParseError("efficiencies on an elementary reaction", _line(node), where)
        effnode = _require_mapping(node["efficiencies"], where + ".efficiencies", node)
        eff = {str(k): _number(v, where + ".efficiencies", _line(effnode))
               for k, v in effnode.items()}
    dup = node.get("duplicate", False)
    if not isinstance(dup, bool):
        raise MechanismParseError("duplicate must be a boolean", _line(node), where)
    return Reaction(equation=eq, reactants=reactants, products=products, kind=kind,
                    rate=rate, low_rate=low, troe=troe, efficiencies=eff,
                    reversible=reversible, duplicate=dup)


def parse_mechanism(text):
    """Parse and validate a mechanism document given as a string."""
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise MechanismParseError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                                  mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise MechanismParseError("document root must be a mapping")
    _check_keys(doc, _TOP_KEYS, "<root>")
    units = _parse_units(doc)

    phases = doc.get("phases")
    if not (isinstance(phases, list) and len(phases) == 1):
        raise MechanismParseError("exactly one phase is supported", _line(doc), "phases")
    phase = _require_mapping(phases[0], "phases[0]", doc)
    _check_keys(phase, _PHASE_KEYS, "phases[0]")
    if phase.get("thermo") != "ideal-gas":
        raise MechanismParseError("only ideal-gas phases are supported", _line(phase),
                                  "phases[0].thermo")
    if phase.get("kinetics", "gas") != "gas":
        raise MechanismParseError("only gas kinetics is supported", _line(phase),
                                  "phases[0].kinetics")
    el_names = phase.get("elements")
    if not isinstance(el_names, list) or not el_names:
        raise MechanismParseError("phase needs an element list", _line(phase), "phases[0].elements")
    elements = {}
    for el in el_names:
        if el not in ATOMIC_MASSES:
            raise MechanismParseError(f"unknown element {el!r}", _line(phase), "phases[0].elements")
        elements[el] = ATOMIC_MASSES[el]

    species_nodes = doc.get("species") or []
    defined = {}
    for i, node in enumerate(species_nodes):
        sp = _parse_species(node, i, elements)
        defined[sp.name] = sp
    wanted = phase.get("species")
    if wanted is None:
        wanted = list(defined)
    if not isinstance(wanted, list):
        raise MechanismParseError("phase species must be a list", _line(phase), "phases[0].species")
    missing = [s for s in wanted if s not in defined]
    if missing:
        raise MechanismValidationError(f"phase lists undefined species {missing}",
                                       "phase-species")
    reactions = tuple(_parse_reaction(node, i, units)
                      for i, node in enumerate(doc.get("reactions") or []))
    mech = Mechanism(
        name=str(phase.get("name", "gas")),
        elements=tuple(elements),
        atomic_masses=tuple(elements.values()),
        species=tuple(defined[s] for s in wanted),
        reactions=reactions,
    )
    return mech.validate()


def load_mechanism(path):
    return parse_mechanism(Path(path).read_text(encoding="utf-8"))


def load_bundled(name="h2o2"):
    """Load a mechanism shipped in the package data directory."""
    text = resources.files("stiffinfer").joinpath("data", f"{name}.yaml").read_text("utf-8")
    return parse_mechanism(text)


def _format_side(side):
    terms = []
    for name, nu in side.items():
        terms.append(name if nu == 1 else f"{nu:g} {name}")
    return " + ".join(terms)


def mechanism_to_yaml(mech):
    """Serialize to the canonical SI form accepted by :func:`parse_mechanism`."""
    def arr(rate):
        return {"A": float(rate.A), "b": float(rate.b), "Ea": float(rate.Ea)}

    species = []
    for sp in mech.species:
        if sp.thermo is None:
            raise MechanismError(f"species {sp.name} has no thermo data to serialize")
        th = sp.thermo
        species.append({
            "name": sp.name,
            "composition": {k: (int(v) if float(v).is_integer() else v)
                            for k, v in sp.composition.items()},
            "thermo": {"model": "NASA7",
                       "temperature-ranges": [th.t_min, th.t_mid, th.t_max],
                       "data": [list(th.low), list(th.high)]},
        })
    reactions = []
    for rxn in mech.reactions:
        arrow = " <=> " if rxn.reversible else " => "
        lhs, rhs = _format_side(rxn.reactants), _format_side(rxn.products)
        if rxn.kind == "three-body":
            lhs, rhs = lhs + " + M", rhs + " + M"
        elif rxn.kind == "falloff":
            lhs, rhs = lhs + " (+M)", rhs + " (+M)"
        entry = {"equation": lhs + arrow + rhs}
        if rxn.kind != "elementary":
            entry["type"] = rxn.kind
        if rxn.kind == "falloff":
            entry["low-P-rate-constant"] = arr(rxn.low_rate)
            entry["high-P-rate-constant"] = arr(rxn.rate)
            if rxn.troe is not None:
                tr = {"A": rxn.troe.A, "T3": rxn.troe.T3, "T1": rxn.troe.T1}
                if rxn.troe.T2 is not None:
                    tr["T2"] = rxn.troe.T2
                entry["Troe"] = tr
        else:
            entry["rate-constant"] = arr(rxn.rate)
        if rxn.efficiencies:
            entry["efficiencies"] = dict(rxn.efficiencies)
        if rxn.duplicate:
            entry["duplicate"] = True
        reactions.append(entry)
    doc = {
        "units": {"length": "m", "time": "s", "quantity": "kmol",
                  "activation-energy": "J/kmol"},
        "phases": [{"name": mech.name, "thermo": "ideal-gas",
                    "elements": list(mech.elements),
                    "species": list(mech.species_names), "kinetics": "gas"}],
        "species": species,
        "reactions": reactions,
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)
