"""Text formats: scenario/system files, the pulse-sequence DSL and curve CSV.

All three parsers are total: any input either parses or raises
:class:`SourceError`, which carries a 1-based line and column.

System file
-----------
INI-like sections with ``key = value`` entries and ``#`` comments::

    [scenario]
    name = pcba-thermal-300K
    temperature_k = 300
    field_t = 11.7
    polarization = thermal
    [spins]
    A = 0            # offset in Hz, file order is spin order
    X = 190
    [couplings]
    A X = 8          # Hz
    [dipolar]
    A X = 2.48       # angstrom; "A X" alone means 2.48, a trailing
                     # "inactive" registers the pair but switches it off
    [relaxation]
    tau_c_s = 4.5e-11
    random_field_rate_s = 0.0166
    larmor_mhz = 498.2   # defaults to gamma * field
    [binding]
    bound_fraction = 0.5
    bound_tau_c_s = 6.7e-11
    bound_extra_rate_s = 0.024
    [metadata]
    anything = free text

Sequence DSL
------------
One event per line (or events separated by ``/`` before an event keyword)::

    pulse 90 x
    delay 1/(4*J)
    lock x 2000 5.0 95     # phase, amplitude Hz, duration s, optional offset Hz
    filter t00
    acquire 1 1e-4

Angles and phases are in degrees; ``x``, ``y``, ``-x``, ``-y`` name the four
quadrature phases.  Numeric fields accept arithmetic over named parameters.
"""

from __future__ import annotations

import io
import math
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .analysis import DecayCurve
from .constants import ANGSTROM, GAMMA_1H, ORTHO_HH_DISTANCE, ROOM_TEMPERATURE
from .relaxation import BindingModel, RelaxationModel
from .sequences import (
    FILTER_KINDS,
    PHASE_MX,
    PHASE_MY,
    PHASE_X,
    PHASE_Y,
    Acquire,
    Delay,
    Filter,
    HardPulse,
    Lock,
    SequenceEvent,
    SequenceProgram,
)
from .spin import SpinSystem

DEFAULT_FIELD_T = 11.7
DEFAULT_LOCK_AMPLITUDE_HZ = 2000.0
MAX_NESTING = 64

Text = Union[str, bytes]


class SourceError(ValueError):
    """Parse or validation failure at a 1-based ``line``/``col``."""

    def __init__(self, message: str, line: int, col: int = 1):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(f"line {line}, col {col}: {message}")


def _decode(text: Text) -> str:
    if isinstance(text, str):
        return text
    try:
        return bytes(text).decode("utf-8")
    except UnicodeDecodeError as exc:
        head = bytes(text)[: exc.start]
        line = head.count(b"\n") + 1
        col = exc.start - (head.rfind(b"\n") + 1) + 1
        raise SourceError("input is not valid UTF-8", line, col) from None


def _preimage(target: float, forward: Callable[[float], float], guess: float) -> float:
    """A float ``x`` near ``guess`` with ``forward(x) == target`` exactly."""
    if forward(guess) == target:
        return guess
    up = down = guess
    for _ in range(64):
        up = math.nextafter(up, math.inf)
        if forward(up) == target:
            return up
        down = math.nextafter(down, -math.inf)
        if forward(down) == target:
            return down
    raise ValueError(f"no exactly invertible representation for {target!r}")


def _fmt(x: float) -> str:
    return repr(float(x))


# ====================================================================== system


@dataclass(frozen=True)
class Scenario:
    """Everything one system file describes."""

    name: str
    system: SpinSystem
    relaxation: Optional[RelaxationModel] = None
    binding: Optional[BindingModel] = None
    temperature_k: float = ROOM_TEMPERATURE
    field_t: float = DEFAULT_FIELD_T
    polarization: Optional[float] = None  # None: thermal at field/temperature
    larmor_mhz: float = 0.0
    t1_target_s: Optional[float] = None
    ts_target_s: Optional[float] = None
    singlet_pairs: tuple[tuple[int, int], ...] = ()
    lock_amplitude_hz: float = DEFAULT_LOCK_AMPLITUDE_HZ
    lock_offset_hz: Optional[float] = None  # None: midpoint of the singlet pairs
    metadata: tuple[tuple[str, str], ...] = ()

    @property
    def larmor_rad_s(self) -> float:
        return 2 * math.pi * 1e6 * self.larmor_mhz

    @property
    def lock_offset(self) -> float:
        if self.lock_offset_hz is not None:
            return self.lock_offset_hz
        idx = [k for p in self.singlet_pairs for k in p]
        return float(np.mean([self.system.offsets_hz[k] for k in idx])) if idx else 0.0


def _mhz_to_rad(mhz: float) -> float:
    return 2 * math.pi * 1e6 * mhz


def default_larmor_mhz(field_t: float, gyromagnetic_ratio: float = GAMMA_1H) -> float:
    return gyromagnetic_ratio * field_t / (2 * math.pi * 1e6)


_SECTIONS = ("scenario", "spins", "couplings", "dipolar", "relaxation", "binding", "metadata")
_SCENARIO_KEYS = (
    "name",
    "temperature_k",
    "field_t",
    "polarization",
    "t1_target_s",
    "ts_target_s",
    "singlet_pairs",
    "lock_amplitude_hz",
    "lock_offset_hz",
)
_RELAX_KEYS = ("tau_c_s", "random_field_rate_s", "larmor_mhz")
_BINDING_KEYS = ("bound_fraction", "bound_tau_c_s", "bound_extra_rate_s")
_LABEL = re.compile(r"[A-Za-z0-9_']+\Z")
_META_KEY = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-]*\Z")


@dataclass
class _Entry:
    key: str
    value: str
    line: int
    key_col: int
    value_col: int


def _split_lines(text: str) -> list[tuple[int, str]]:
    out = []
    for n, raw in enumerate(text.split("\n"), start=1):
        raw = raw.rstrip("\r")
        cut = raw.find("#")
        body = raw if cut < 0 else raw[:cut]
        out.append((n, body))
    return out


def _read_sections(text: str) -> dict[str, tuple[int, list[_Entry]]]:
    sections: dict[str, tuple[int, list[_Entry]]] = {}
    current: Optional[list[_Entry]] = None
    for n, body in _split_lines(text):
        stripped = body.strip()
        if not stripped:
            continue
        col = body.index(stripped[0]) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise SourceError("section header must end with ']'", n, col + len(stripped))
            name = stripped[1:-1].strip()
            if name not in _SECTIONS:
                raise SourceError(f"unknown section [{name}]; expected one of {', '.join(_SECTIONS)}", n, col)
            if name in sections:
                raise SourceError(f"duplicate section [{name}]", n, col)
            current = []
            sections[name] = (n, current)
            continue
        if current is None:
            raise SourceError("entry outside of any section", n, col)
        eq = body.find("=")
        if eq < 0:
            key, value, vcol = body.strip(), "", len(body) + 1
        else:
            key = body[:eq].strip()
            value = body[eq + 1 :].strip()
            vcol = eq + 2 + (len(body[eq + 1 :]) - len(body[eq + 1 :].lstrip()))
            if not key:
                raise SourceError("missing key before '='", n, col)
            if not value:
                raise SourceError(f"missing value for {key!r}", n, eq + 2)
        current.append(_Entry(" ".join(key.split()), value, n, col, vcol))
    return sections


def _number(entry: _Entry, lo: Optional[float] = None, strict_lo: bool = False) -> float:
    try:
        v = float(entry.value)
    except ValueError:
        raise SourceError(f"{entry.key}: expected a number, got {entry.value!r}", entry.line, entry.value_col) from None
    if not math.isfinite(v):
        raise SourceError(f"{entry.key}: value must be finite", entry.line, entry.value_col)
    if lo is not None and (v < lo or (strict_lo and v == lo)):
        rel = ">" if strict_lo else ">="
        raise SourceError(f"{entry.key}: must be {rel} {lo:g}, got {v!r}", entry.line, entry.value_col)
    return v


def _keyed(entries: list[_Entry], allowed: Sequence[str], section: str) -> dict[str, _Entry]:
    out: dict[str, _Entry] = {}
    for e in entries:
        if e.key not in allowed:
            raise SourceError(f"unknown key {e.key!r} in [{section}]", e.line, e.key_col)
        if e.key in out:
            raise SourceError(f"duplicate key {e.key!r} in [{section}]", e.line, e.key_col)
        if e.value == "":
            raise SourceError(f"missing value for {e.key!r}", e.line, e.value_col)
        out[e.key] = e
    return out


def _pair_key(e: _Entry, labels: dict[str, int], section: str) -> tuple[int, int]:
    parts = e.key.split()
    if len(parts) != 2:
        raise SourceError(f"[{section}] keys name two spins, got {e.key!r}", e.line, e.key_col)
    idx = []
    for p in parts:
        if p not in labels:
            raise SourceError(f"unknown spin {p!r} in [{section}]", e.line, e.key_col)
        idx.append(labels[p])
    if idx[0] == idx[1]:
        raise SourceError(f"[{section}] pair {e.key!r} repeats a spin", e.line, e.key_col)
    return idx[0], idx[1]


def parse_system(text: Text) -> Scenario:
    """Parse a scenario/system file into validated objects."""
    src = _decode(text)
    sections = _read_sections(src)
    last_line = src.count("\n") + 1
    if "scenario" not in sections:
        raise SourceError("missing [scenario] section", last_line)
    if "spins" not in sections:
        raise SourceError("missing [spins] section", last_line)

    head_line, scen_entries = sections["scenario"]
    scen = _keyed(scen_entries, _SCENARIO_KEYS, "scenario")
    if "name" not in scen:
        raise SourceError("[scenario] needs a name", head_line)
    name = scen["name"].value
    temperature = _number(scen["temperature_k"], 0, True) if "temperature_k" in scen else ROOM_TEMPERATURE
    field_t = _number(scen["field_t"], 0) if "field_t" in scen else DEFAULT_FIELD_T
    polarization = None
    if "polarization" in scen and scen["polarization"].value != "thermal":
        polarization = _number(scen["polarization"], -1)
        if polarization > 1:
            e = scen["polarization"]
            raise SourceError("polarization: must lie in [-1, 1]", e.line, e.value_col)
    targets = {}
    for key in ("t1_target_s", "ts_target_s"):
        targets[key] = _number(scen[key], 0, True) if key in scen else None
    lock_amp = _number(scen["lock_amplitude_hz"], 0) if "lock_amplitude_hz" in scen else DEFAULT_LOCK_AMPLITUDE_HZ
    lock_off = _number(scen["lock_offset_hz"]) if "lock_offset_hz" in scen else None

    spin_line, spin_entries = sections["spins"]
    if not spin_entries:
        raise SourceError("[spins] is empty", spin_line)
    labels: dict[str, int] = {}
    offsets = []
    for e in spin_entries:
        if not _LABEL.match(e.key):
            raise SourceError(f"bad spin label {e.key!r}", e.line, e.key_col)
        if e.key in labels:
            raise SourceError(f"duplicate spin {e.key!r}", e.line, e.key_col)
        if e.value == "":
            raise SourceError(f"missing offset for spin {e.key!r}", e.line, e.value_col)
        labels[e.key] = len(labels)
        offsets.append(_number(e))
    n = len(labels)
    if n > 8:
        raise SourceError(f"{n} spins exceeds the cap of 8", spin_entries[8].line, spin_entries[8].key_col)

    j = np.zeros((n, n))
    seen: set[tuple[int, int]] = set()
    for e in sections.get("couplings", (0, []))[1]:
        a, b = _pair_key(e, labels, "couplings")
        key = tuple(sorted((a, b)))
        if key in seen:
            raise SourceError(f"duplicate coupling {e.key!r}", e.line, e.key_col)
        if e.value == "":
            raise SourceError(f"missing value for coupling {e.key!r}", e.line, e.value_col)
        seen.add(key)
        j[a, b] = j[b, a] = _number(e)

    pairs = []
    active = []
    seen = set()
    for e in sections.get("dipolar", (0, []))[1]:
        a, b = _pair_key(e, labels, "dipolar")
        key = tuple(sorted((a, b)))
        if key in seen:
            raise SourceError(f"duplicate dipolar pair {e.key!r}", e.line, e.key_col)
        seen.add(key)
        words = e.value.split()
        on = True
        if words and words[-1] == "inactive":
            on = False
            words = words[:-1]
        if len(words) > 1:
            raise SourceError(f"{e.key}: expected a distance and optional 'inactive'", e.line, e.value_col)
        if words:
            dist = _number(_Entry(e.key, words[0], e.line, e.key_col, e.value_col), 0, True)
            r = dist * ANGSTROM
        else:
            r = ORTHO_HH_DISTANCE
        pairs.append((key[0], key[1], r))
        if on:
            active.append(key)

    try:
        system = SpinSystem(
            n_spins=n,
            offsets_hz=tuple(offsets),
            j_hz=tuple(map(tuple, j)),
            dipolar_pairs=tuple(pairs),
            labels=tuple(labels),
        )
    except ValueError as exc:
        raise SourceError(str(exc), spin_line) from None

    singlet_pairs: tuple[tuple[int, int], ...] = ()
    if "singlet_pairs" in scen:
        e = scen["singlet_pairs"]
        sp = []
        for chunk in e.value.split(","):
            sp.append(_pair_key(_Entry(chunk.strip(), "", e.line, e.value_col, e.value_col), labels, "scenario"))
        flat = [k for p in sp for k in p]
        if len(set(flat)) != len(flat):
            raise SourceError("singlet_pairs must be disjoint", e.line, e.value_col)
        singlet_pairs = tuple(sp)

    larmor_mhz = default_larmor_mhz(field_t)
    relaxation = None
    if "relaxation" in sections:
        r_line, r_entries = sections["relaxation"]
        rel = _keyed(r_entries, _RELAX_KEYS, "relaxation")
        if "tau_c_s" not in rel:
            raise SourceError("[relaxation] needs tau_c_s", r_line)
        tau = _number(rel["tau_c_s"], 0, True)
        rate = _number(rel["random_field_rate_s"], 0) if "random_field_rate_s" in rel else 0.0
        if "larmor_mhz" in rel:
            larmor_mhz = _number(rel["larmor_mhz"], 0)
        all_pairs = [(a, b) for a, b, _ in pairs]
        relaxation = RelaxationModel(
            tau_c=tau,
            random_field_rate=rate,
            larmor_rad_s=_mhz_to_rad(larmor_mhz),
            dipolar_pairs_active=None if active == all_pairs else tuple(active),
        )
    elif len(active) != len(pairs):
        e = sections["dipolar"][1][0]
        raise SourceError("inactive dipolar pairs need a [relaxation] section", e.line, e.key_col)

    binding = None
    if "binding" in sections:
        b_line, b_entries = sections["binding"]
        bind = _keyed(b_entries, _BINDING_KEYS, "binding")
        missing = [k for k in _BINDING_KEYS if k not in bind]
        if missing:
            raise SourceError(f"[binding] is missing {', '.join(missing)}", b_line)
        f = _number(bind["bound_fraction"], 0)
        if f > 1:
            e = bind["bound_fraction"]
            raise SourceError("bound_fraction: must lie in [0, 1]", e.line, e.value_col)
        binding = BindingModel(
            bound_fraction=f,
            bound_extra_random_field_rate=_number(bind["bound_extra_rate_s"], 0),
            bound_tau_c=_number(bind["bound_tau_c_s"], 0, True),
        )
        if relaxation is None:
            raise SourceError("[binding] needs a [relaxation] section", b_line)

    metadata = []
    meta_seen = set()
    for e in sections.get("metadata", (0, []))[1]:
        if not _META_KEY.match(e.key):
            raise SourceError(f"bad metadata key {e.key!r}", e.line, e.key_col)
        if e.key in meta_seen:
            raise SourceError(f"duplicate key {e.key!r} in [metadata]", e.line, e.key_col)
        if e.value == "":
            raise SourceError(f"missing value for {e.key!r}", e.line, e.value_col)
        meta_seen.add(e.key)
        metadata.append((e.key, e.value))

    return Scenario(
        name=name,
        system=system,
        relaxation=relaxation,
        binding=binding,
        temperature_k=temperature,
        field_t=field_t,
        polarization=polarization,
        larmor_mhz=larmor_mhz,
        t1_target_s=targets["t1_target_s"],
        ts_target_s=targets["ts_target_s"],
        singlet_pairs=singlet_pairs,
        lock_amplitude_hz=lock_amp,
        lock_offset_hz=lock_off,
        metadata=tuple(metadata),
    )


def serialize_system(sc: Scenario) -> str:
    """Canonical text of a scenario; ``parse_system`` inverts it exactly."""
    s = sc.system
    lab = s.labels
    if any(not _LABEL.match(x) for x in lab):
        raise ValueError("spin labels must match [A-Za-z0-9_']+ to be written")
    if "#" in sc.name or "\n" in sc.name or not sc.name.strip() or sc.name != sc.name.strip():
        raise ValueError(f"scenario name {sc.name!r} cannot be written")
    out = ["[scenario]", f"name = {sc.name}"]
    out.append(f"temperature_k = {_fmt(sc.temperature_k)}")
    out.append(f"field_t = {_fmt(sc.field_t)}")
    out.append(f"polarization = {'thermal' if sc.polarization is None else _fmt(sc.polarization)}")
    if sc.t1_target_s is not None:
        out.append(f"t1_target_s = {_fmt(sc.t1_target_s)}")
    if sc.ts_target_s is not None:
        out.append(f"ts_target_s = {_fmt(sc.ts_target_s)}")
    if sc.singlet_pairs:
        out.append("singlet_pairs = " + ", ".join(f"{lab[a]} {lab[b]}" for a, b in sc.singlet_pairs))
    out.append(f"lock_amplitude_hz = {_fmt(sc.lock_amplitude_hz)}")
    if sc.lock_offset_hz is not None:
        out.append(f"lock_offset_hz = {_fmt(sc.lock_offset_hz)}")
    out += ["", "[spins]"]
    out += [f"{lab[k]} = {_fmt(s.offsets_hz[k])}" for k in range(s.n_spins)]
    j = s.j_matrix
    coup = [(a, b) for a in range(s.n_spins) for b in range(a + 1, s.n_spins) if j[a, b] != 0]
    if coup:
        out += ["", "[couplings]"]
        out += [f"{lab[a]} {lab[b]} = {_fmt(j[a, b])}" for a, b in coup]
    rel = sc.relaxation
    if s.dipolar_pairs:
        out += ["", "[dipolar]"]
        active = None if rel is None else rel.dipolar_pairs_active
        for a, b, r in s.dipolar_pairs:
            dist = _preimage(r, lambda x: x * ANGSTROM, r / ANGSTROM)
            flag = "" if active is None or (a, b) in active else " inactive"
            out.append(f"{lab[a]} {lab[b]} = {_fmt(dist)}{flag}")
    if rel is not None:
        out += ["", "[relaxation]", f"tau_c_s = {_fmt(rel.tau_c)}", f"random_field_rate_s = {_fmt(rel.random_field_rate)}"]
        out.append(f"larmor_mhz = {_fmt(sc.larmor_mhz)}")
        if _mhz_to_rad(sc.larmor_mhz) != rel.larmor_rad_s:
            raise ValueError("relaxation larmor_rad_s disagrees with the scenario larmor_mhz")
    if sc.binding is not None:
        b = sc.binding
        out += [
            "",
            "[binding]",
            f"bound_fraction = {_fmt(b.bound_fraction)}",
            f"bound_tau_c_s = {_fmt(b.bound_tau_c)}",
            f"bound_extra_rate_s = {_fmt(b.bound_extra_random_field_rate)}",
        ]
    if sc.metadata:
        out += ["", "[metadata]"]
        for k, v in sc.metadata:
            if not _META_KEY.match(k) or "#" in v or "\n" in v or not v.strip() or v != v.strip():
                raise ValueError(f"metadata entry {k!r} cannot be written")
            out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"


# ==================================================================== sequence

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)"
    r"|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/()])"
)
_KEYWORDS = ("pulse", "delay", "lock", "acquire", "filter")
_NAMED_PHASES = {"x": PHASE_X, "y": PHASE_Y, "-x": PHASE_MX, "-y": PHASE_MY}


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize_line(body: str, n: int) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(body):
        m = _TOKEN.match(body, pos)
        if m is None:
            raise SourceError(f"unexpected character {body[pos]!r}", n, pos + 1)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), n, pos + 1))
        pos = m.end()
    return toks


class _ExprParser:
    """Recursive descent over ``+ - * /``, unary sign and parentheses."""

    def __init__(self, toks: list[_Tok], params: Mapping[str, float], end: _Tok):
        self.toks = toks
        self.i = 0
        self.params = params
        self.end = end

    def peek(self) -> Optional[_Tok]:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def take(self) -> _Tok:
        t = self.peek()
        if t is None:
            raise SourceError("unexpected end of line", self.end.line, self.end.col)
        self.i += 1
        return t

    def expr(self, depth: int = 0) -> float:
        v = self.term(depth)
        while (t := self.peek()) is not None and t.kind == "op" and t.text in "+-":
            self.i += 1
            rhs = self.term(depth)
            v = v + rhs if t.text == "+" else v - rhs
            self._finite(v, t)
        return v

    def term(self, depth: int) -> float:
        v = self.unary(depth)
        while (t := self.peek()) is not None and t.kind == "op" and t.text in "*/":
            self.i += 1
            rhs = self.unary(depth)
            if t.text == "*":
                v = v * rhs
            else:
                if rhs == 0:
                    raise SourceError("division by zero", t.line, t.col)
                v = v / rhs
            self._finite(v, t)
        return v

    def unary(self, depth: int) -> float:
        t = self.peek()
        if t is not None and t.kind == "op" and t.text in "+-":
            if depth > MAX_NESTING:
                raise SourceError("expression nested too deeply", t.line, t.col)
            self.i += 1
            v = self.unary(depth + 1)
            return -v if t.text == "-" else v
        return self.atom(depth)

    def atom(self, depth: int) -> float:
        t = self.take()
        if t.kind == "num":
            v = float(t.text)
            self._finite(v, t)
            return v
        if t.kind == "ident":
            if t.text in _KEYWORDS:
                raise SourceError(f"keyword {t.text!r} inside an expression", t.line, t.col)
            if t.text not in self.params:
                raise SourceError(f"unknown identifier {t.text!r}", t.line, t.col)
            try:
                v = float(self.params[t.text])
            except (TypeError, ValueError):
                raise SourceError(f"parameter {t.text!r} is not a number", t.line, t.col) from None
            self._finite(v, t)
            return v
        if t.text == "(":
            if depth >= MAX_NESTING:
                raise SourceError("expression nested too deeply", t.line, t.col)
            v = self.expr(depth + 1)
            close = self.take()
            if close.text != ")":
                raise SourceError("expected ')'", close.line, close.col)
            return v
        raise SourceError(f"unexpected {t.text!r}", t.line, t.col)

    @staticmethod
    def _finite(v: float, t: _Tok):
        if not math.isfinite(v):
            raise SourceError("expression overflows", t.line, t.col)


def _split_events(toks: list[_Tok]) -> list[list[_Tok]]:
    """Break a token line at '/' tokens that precede an event keyword."""
    groups = [[]]
    for k, t in enumerate(toks):
        nxt = toks[k + 1] if k + 1 < len(toks) else None
        if t.text == "/" and nxt is not None and nxt.kind == "ident" and nxt.text in _KEYWORDS:
            groups.append([])
            continue
        groups[-1].append(t)
    return groups


def _parse_phase(p: _ExprParser) -> float:
    t = p.take()
    sign = 1.0
    first = t
    if t.kind == "op" and t.text in "+-":
        sign = -1.0 if t.text == "-" else 1.0
        t = p.take()
    if t.kind == "ident":
        key = ("-" if sign < 0 else "") + t.text
        if key in _NAMED_PHASES:
            return _NAMED_PHASES[key]
        raise SourceError(f"unknown phase {t.text!r}; use x, y, -x, -y or degrees", t.line, t.col)
    if t.kind == "num":
        v = float(t.text)
        if not math.isfinite(v):
            raise SourceError("phase overflows", t.line, t.col)
        if _take_rad(p):
            return sign * v
        return math.radians(sign * v)
    raise SourceError("expected a phase", first.line, first.col)


def _take_rad(p: _ExprParser) -> bool:
    """Consume an optional ``rad`` unit; angles and phases are degrees otherwise."""
    t = p.peek()
    if t is not None and t.kind == "ident" and t.text == "rad":
        p.take()
        return True
    return False


def _parse_event(toks: list[_Tok], params: Mapping[str, float], line_end: _Tok) -> SequenceEvent:
    head = toks[0]
    if head.kind != "ident" or head.text not in _KEYWORDS:
        raise SourceError(f"expected one of {', '.join(_KEYWORDS)}, got {head.text!r}", head.line, head.col)
    p = _ExprParser(toks[1:], params, line_end)

    def value(what: str, lo: Optional[float] = None) -> float:
        start = p.peek() or line_end
        v = p.expr()
        if lo is not None and v < lo:
            raise SourceError(f"{what} must be >= {lo:g}, got {v!r}", start.line, start.col)
        return v

    kw = head.text
    if kw == "pulse":
        # the phase is the last whitespace-separated word, so "90 -x" is not 90 - x
        body = toks[1:]
        cut = len(body)
        while cut > 1 and body[cut - 2].col + len(body[cut - 2].text) == body[cut - 1].col:
            cut -= 1
        if cut < 2:
            raise SourceError("pulse needs an angle and a phase", (body[0] if body else line_end).line,
                              (body[0] if body else line_end).col)
        p = _ExprParser(body[: cut - 1], params, body[cut - 1])
        angle = value("pulse angle")
        if not _take_rad(p):
            angle = math.radians(angle)
        if p.peek() is not None:
            extra = p.peek()
            raise SourceError(f"unexpected {extra.text!r} in pulse angle", extra.line, extra.col)
        p = _ExprParser(body[cut - 1 :], params, line_end)
        phase = _parse_phase(p)
        ev: SequenceEvent = HardPulse(angle, phase)
    elif kw == "delay":
        ev = Delay(value("delay", 0.0))
    elif kw == "lock":
        phase = _parse_phase(p)
        amp = value("lock amplitude", 0.0)
        dur = value("lock duration", 0.0)
        offset = value("lock offset") if p.peek() is not None else 0.0
        ev = Lock(amp, phase, dur, offset)
    elif kw == "filter":
        t = p.take()
        if t.text not in FILTER_KINDS:
            raise SourceError(f"unknown filter {t.text!r}; known: {', '.join(FILTER_KINDS)}", t.line, t.col)
        ev = Filter(t.text)
    else:
        start = p.peek() or line_end
        pts = value("acquire points", 1.0)
        if pts != int(pts) or pts > 1e7:
            raise SourceError(f"acquire points must be an integer up to 1e7, got {pts!r}", start.line, start.col)
        ev = Acquire(int(pts), value("dwell", 0.0))
    extra = p.peek()
    if extra is not None:
        raise SourceError(f"unexpected {extra.text!r} after {kw} event", extra.line, extra.col)
    return ev


def parse_sequence(
    text: Text, params: Optional[Mapping[str, float]] = None, name: str = ""
) -> SequenceProgram:
    """Parse DSL text into a program with every timing resolved to seconds."""
    src = _decode(text)
    params = dict(params or {})
    for k in params:
        if k in _KEYWORDS:
            raise ValueError(f"parameter name {k!r} is reserved")
    events: list[SequenceEvent] = []
    acquire_at: Optional[_Tok] = None
    for n, body in _split_lines(src):
        toks = _tokenize_line(body, n)
        if not toks:
            continue
        line_end = _Tok("eol", "", n, len(body) + 1)
        for group in _split_events(toks):
            if not group:
                raise SourceError("empty event before '/'", n, toks[0].col)
            ev = _parse_event(group, params, line_end)
            if isinstance(ev, Acquire):
                if acquire_at is not None:
                    raise SourceError(
                        f"duplicate acquire (first at line {acquire_at.line})", group[0].line, group[0].col
                    )
                acquire_at = group[0]
            events.append(ev)
    if not events:
        raise SourceError("sequence has no events", src.count("\n") + 1)
    return SequenceProgram(tuple(events), name=name, parameters=params)


def _num(x: float) -> str:
    s = _fmt(x)
    return f"({s})" if s.startswith("-") else s


def _degrees(rad: float) -> Optional[float]:
    try:
        return _preimage(rad, math.radians, math.degrees(rad))
    except ValueError:
        return None


def _angle_text(angle: float) -> str:
    deg = _degrees(angle)
    return _num(deg) if deg is not None else f"{_num(angle)} rad"


def _phase_text(phase: float) -> str:
    for name, value in _NAMED_PHASES.items():
        if phase == value:
            return name
    deg = _degrees(phase)
    return _fmt(deg) if deg is not None else f"{_fmt(phase)}rad"


def serialize_event(ev: SequenceEvent) -> str:
    if isinstance(ev, HardPulse):
        return f"pulse {_angle_text(ev.angle)} {_phase_text(ev.phase)}"
    if isinstance(ev, Delay):
        return f"delay {_num(ev.duration)}"
    if isinstance(ev, Lock):
        tail = f" {_num(ev.offset)}" if ev.offset != 0 else ""
        return f"lock {_phase_text(ev.phase)} {_num(ev.amplitude)} {_num(ev.duration)}{tail}"
    if isinstance(ev, Filter):
        return f"filter {ev.kind}"
    if isinstance(ev, Acquire):
        return f"acquire {int(ev.points)} {_num(ev.dwell)}"
    raise TypeError(f"cannot serialize {ev!r}")


def serialize_sequence(program: SequenceProgram) -> str:
    """Canonical DSL text, numbers only, one event per line."""
    head = f"# {program.name}\n" if program.name and "\n" not in program.name else ""
    return head + "\n".join(serialize_event(e) for e in program.events) + "\n"


# ======================================================================= curves

_CURVE_HEADER = ("time_s", "amplitude")


def format_curve(curve: DecayCurve) -> str:
    lines = []
    for k, v in curve.metadata.items():
        k, v = str(k), str(v)
        if not _META_KEY.match(k) or "\n" in v or "\r" in v or v != v.strip():
            raise ValueError(f"metadata entry {k!r} cannot be written")
        lines.append(f"# {k} = {v}")
    cols = list(_CURVE_HEADER) + (["sigma"] if curve.sigma is not None else [])
    lines.append(",".join(cols))
    for i in range(len(curve)):
        row = [curve.times[i], curve.amplitudes[i]] + ([curve.sigma[i]] if curve.sigma is not None else [])
        lines.append(",".join(format(float(x), ".17g") for x in row))
    return "\n".join(lines) + "\n"


def parse_curve(text: Text) -> DecayCurve:
    src = _decode(text)
    meta: dict[str, str] = {}
    header: Optional[list[str]] = None
    times: list[float] = []
    amps: list[float] = []
    sig: list[float] = []
    last_t = -math.inf
    for n, raw in enumerate(src.split("\n"), start=1):
        raw = raw.rstrip("\r")
        if not raw.strip():
            continue
        if raw.startswith("#"):
            if header is not None:
                raise SourceError("metadata after the column header", n)
            body = raw[1:].strip()
            if "=" not in body:
                raise SourceError("metadata line must be '# key = value'", n, 2)
            k, v = body.split("=", 1)
            k, v = k.strip(), v.strip()
            if not _META_KEY.match(k):
                raise SourceError(f"bad metadata key {k!r}", n, 3)
            if k in meta:
                raise SourceError(f"duplicate metadata key {k!r}", n, 3)
            meta[k] = v
            continue
        cells = raw.split(",")
        if header is None:
            names = [c.strip() for c in cells]
            if names not in (list(_CURVE_HEADER), list(_CURVE_HEADER) + ["sigma"]):
                raise SourceError(f"expected header 'time_s,amplitude[,sigma]', got {raw!r}", n)
            header = names
            continue
        if len(cells) != len(header):
            raise SourceError(f"expected {len(header)} columns ({','.join(header)}), got {len(cells)}", n)
        vals = []
        col = 1
        for c in cells:
            try:
                v = float(c)
            except ValueError:
                raise SourceError(f"not a number: {c!r}", n, col) from None
            if not math.isfinite(v):
                raise SourceError(f"non-finite value {c!r}", n, col)
            vals.append(v)
            col += len(c) + 1
        if vals[0] <= last_t:
            raise SourceError("times must be strictly increasing", n)
        if len(vals) == 3 and not vals[2] > 0:
            raise SourceError("sigma must be positive", n, len(cells[0]) + len(cells[1]) + 3)
        last_t = vals[0]
        times.append(vals[0])
        amps.append(vals[1])
        if len(vals) == 3:
            sig.append(vals[2])
    if header is None:
        raise SourceError("missing column header", src.count("\n") + 1)
    return DecayCurve(
        np.array(times), np.array(amps), np.array(sig) if header[-1] == "sigma" else None, meta
    )


def write_curve(path: Union[str, os.PathLike], curve: DecayCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_curve(curve))


def read_curve(path: Union[str, os.PathLike]) -> DecayCurve:
    with open(path, "rb") as fh:
        return parse_curve(fh.read())


def format_basis(basis: Sequence[np.ndarray], metadata: Optional[Mapping[str, str]] = None) -> str:
    """Operator basis as CSV rows ``basis_index,entry,real,imag`` (row-major entries)."""
    lines = [f"# {k} = {v}" for k, v in (metadata or {}).items()]
    lines.append(f"# basis_dimension = {len(basis)}")
    if basis:
        lines.append(f"# operator_dim = {basis[0].shape[0]}")
    lines.append("basis_index,entry,real,imag")
    for k, op in enumerate(basis):
        for e, z in enumerate(np.asarray(op).reshape(-1)):
            lines.append(f"{k},{e},{format(float(z.real), '.17g')},{format(float(z.imag), '.17g')}")
    return "\n".join(lines) + "\n"


def parse_basis(text: Text) -> list[np.ndarray]:
    src = _decode(text)
    entries: dict[int, list[complex]] = {}
    dim = None
    header_seen = False
    for n, raw in enumerate(src.split("\n"), start=1):
        raw = raw.strip()
        if not raw:
            continue
        if raw.startswith("#"):
            body = raw[1:].split("=", 1)
            if len(body) == 2 and body[0].strip() == "operator_dim":
                try:
                    dim = int(body[1])
                except ValueError:
                    raise SourceError("operator_dim must be an integer", n) from None
            continue
        if not header_seen:
            if raw != "basis_index,entry,real,imag":
                raise SourceError("expected header 'basis_index,entry,real,imag'", n)
            header_seen = True
            continue
        cells = raw.split(",")
        if len(cells) != 4:
            raise SourceError(f"expected 4 columns, got {len(cells)}", n)
        try:
            k, e = int(cells[0]), int(cells[1])
            z = complex(float(cells[2]), float(cells[3]))
        except ValueError:
            raise SourceError("malformed basis row", n) from None
        row = entries.setdefault(k, [])
        if e != len(row):
            raise SourceError(f"entry {e} out of order for basis operator {k}", n)
        row.append(z)
    if not header_seen:
        raise SourceError("missing column header", src.count("\n") + 1)
    out = []
    for k in sorted(entries):
        flat = np.array(entries[k])
        d = dim or math.isqrt(flat.size)
        if d * d != flat.size:
            raise SourceError(f"basis operator {k} has {flat.size} entries, not a square", 1)
        out.append(flat.reshape(d, d))
    return out
