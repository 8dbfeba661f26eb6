"""Symbolic expressions over an ordered parameter set.

Nodes are immutable. Constants are exact rationals; evaluation happens in
double precision. The only simplifications performed are constant folding
and elimination of additive zeros / multiplicative ones.

Serialization uses prefix-notation JSON arrays::

    expr   := number | ["const", "p/q"] | ["par", name]
            | ["add", expr, ...] | ["mul", expr, ...]
            | ["pow", expr, exponent] | ["log", expr]
            | ["sub", expr, expr] | ["div", expr, expr] | ["neg", expr]

``sub``, ``div`` and ``neg`` are accepted on input only and are rewritten
into ``add``/``mul``/``pow`` nodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational, Real
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DomainError, MissingParameter

__all__ = [
    "Expr", "Const", "Par", "Add", "Mul", "Pow", "Log",
    "DomainError", "MissingParameter",
    "Parameter", "ParameterSet", "Instantiation",
    "const", "par", "add", "mul", "power", "log", "sqrt",
    "evaluate", "evaluate_all", "differentiate",
    "to_json", "from_json",
]


def _frac(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, Rational)):
        return Fraction(x)
    if isinstance(x, Real):
        if not math.isfinite(x):
            raise ValueError(f"non-finite constant {x!r}")
        # decimal literal semantics: 0.1 -> 1/10
        return Fraction(repr(float(x)))
    if isinstance(x, str):
        return Fraction(x)
    raise TypeError(f"cannot convert {type(x).__name__} to a rational constant")


class Expr:
    __slots__ = ("_hash", "_params")

    # arithmetic sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return add(self, mul(-1, _lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), mul(-1, self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return mul(self, power(_lift(other), -1))

    def __rtruediv__(self, other):
        return mul(_lift(other), power(self, -1))

    def __neg__(self):
        return mul(-1, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    # structure ---------------------------------------------------------
    def children(self) -> tuple["Expr", ...]:
        return ()

    def params(self) -> frozenset[int]:
        # nodes are immutable, so the set is computed once per node
        try:
            return self._params
        except AttributeError:
            pass
        if isinstance(self, Par):
            out = frozenset((self.index,))
        else:
            out = frozenset().union(*(c.params() for c in self.children()))
        self._params = out
        return out

    @property
    def is_constant(self) -> bool:
        return isinstance(self, Const)

    def evaluate(self, values: Sequence[float], memo: dict | None = None) -> float:
        return evaluate(self, values, memo)

    def __repr__(self) -> str:
        return f"Expr({to_json(self)!r})"


def _lift(x) -> Expr:
    if isinstance(x, Expr):
        return x
    return Const(_frac(x))


class Const(Expr):
    __slots__ = ("value", "fvalue")

    def __init__(self, value):
        self.value = _frac(value)
        self.fvalue = float(self.value)
        self._hash = None

    def __eq__(self, other):
        return isinstance(other, Const) and other.value == self.value

    def __hash__(self):
        return hash(("c", self.value))


class Par(Expr):
    __slots__ = ("index", "name")

    def __init__(self, index: int, name: str | None = None):
        if index < 0:
            raise ValueError("parameter index must be non-negative")
        self.index = int(index)
        self.name = name if name is not None else f"v{index}"
        self._hash = None

    def __eq__(self, other):
        return isinstance(other, Par) and other.index == self.index

    def __hash__(self):
        return hash(("p", self.index))


class _Nary(Expr):
    __slots__ = ("args",)

    def __init__(self, args: tuple[Expr, ...]):
        self.args = args
        self._hash = None

    def children(self):
        return self.args

    def __eq__(self, other):
        return type(other) is type(self) and other.args == self.args

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((type(self).__name__, self.args))
        return self._hash


class Add(_Nary):
    __slots__ = ()


class Mul(_Nary):
    __slots__ = ()


class Pow(Expr):
    __slots__ = ("base", "exponent")

    def __init__(self, base: Expr, exponent: Fraction):
        self.base = base
        self.exponent = exponent
        self._hash = None

    def children(self):
        return (self.base,)

    def __eq__(self, other):
        return isinstance(other, Pow) and other.base == self.base and other.exponent == self.exponent

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(("pow", self.base, self.exponent))
        return self._hash


class Log(Expr):
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        self.arg = arg
        self._hash = None

    def children(self):
        return (self.arg,)

    def __eq__(self, other):
        return isinstance(other, Log) and other.arg == self.arg

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(("log", self.arg))
        return self._hash


ZERO = Const(0)
ONE = Const(1)


# smart constructors ----------------------------------------------------

def const(value) -> Const:
    return Const(value)


def par(index: int, name: str | None = None) -> Par:
    return Par(index, name)


def add(*terms) -> Expr:
    flat: list[Expr] = []
    total = Fraction(0)
    for t in terms:
        t = _lift(t)
        parts = t.args if isinstance(t, Add) else (t,)
        for p in parts:
            if isinstance(p, Const):
                total += p.value
            else:
                flat.append(p)
    if total != 0:
        flat.append(Const(total))
    if not flat:
        return ZERO
    if len(flat) == 1:
        return flat[0]
    return Add(tuple(flat))


def mul(*factors) -> Expr:
    flat: list[Expr] = []
    coeff = Fraction(1)
    for f in factors:
        f = _lift(f)
        parts = f.args if isinstance(f, Mul) else (f,)
        for p in parts:
            if isinstance(p, Const):
                coeff *= p.value
            else:
                flat.append(p)
    if coeff == 0:
        return ZERO
    if coeff != 1:
        flat.insert(0, Const(coeff))
    if not flat:
        return ONE
    if len(flat) == 1:
        return flat[0]
    return Mul(tuple(flat))


def power(base, exponent) -> Expr:
    base = _lift(base)
    exponent = _frac(exponent)
    if exponent == 0:
        return ONE
    if exponent == 1:
        return base
    if isinstance(base, Const):
        if exponent.denominator == 1:
            if base.value == 0 and exponent < 0:
                raise DomainError("zero raised to a negative power")
            return Const(base.value ** exponent.numerator)
        if base.value < 0:
            raise DomainError("fractional power of a negative constant")
    if isinstance(base, Pow) and exponent.denominator == 1 and base.exponent.denominator == 1:
        return power(base.base, base.exponent * exponent)
    return Pow(base, exponent)


def log(arg) -> Expr:
    arg = _lift(arg)
    if isinstance(arg, Const):
        if arg.value <= 0:
            raise DomainError("log of a non-positive constant")
        if arg.value == 1:
            return ZERO
    return Log(arg)


def sqrt(arg) -> Expr:
    return power(arg, Fraction(1, 2))


# evaluation --------------------------------------------------------------

def evaluate(e: Expr, values: Sequence[float], memo: dict | None = None) -> float:
    """Evaluate ``e`` at the instantiation ``values`` (indexed by parameter id).

    ``memo`` may be shared across calls with the same ``values`` so that
    common subexpressions are evaluated once.
    """
    if isinstance(e, Const):
        return e.fvalue
    if isinstance(e, Par):
        try:
            return float(values[e.index])
        except IndexError:
            raise MissingParameter(e.name) from None
    if memo is not None:
        hit = memo.get(id(e))
        if hit is not None:
            return hit
    if isinstance(e, Add):
        out = 0.0
        for a in e.args:
            out += evaluate(a, values, memo)
    elif isinstance(e, Mul):
        out = 1.0
        for a in e.args:
            out *= evaluate(a, values, memo)
    elif isinstance(e, Pow):
        b = evaluate(e.base, values, memo)
        r = e.exponent
        if r.denominator == 1:
            if b == 0.0 and r < 0:
                raise DomainError("division by zero")
            out = b ** r.numerator
        else:
            if b < 0.0 or (b == 0.0 and r < 0):
                raise DomainError(f"{b!r} raised to {r}")
            out = b ** float(r)
    elif isinstance(e, Log):
        a = evaluate(e.arg, values, memo)
        if a <= 0.0:
            raise DomainError(f"log of {a!r}")
        out = math.log(a)
    else:
        raise TypeError(f"unknown node {type(e).__name__}")
    if memo is not None:
        memo[id(e)] = out
    return out


def evaluate_all(exprs: Iterable[Expr], values: Sequence[float]) -> np.ndarray:
    memo: dict = {}
    return np.array([evaluate(e, values, memo) for e in exprs], dtype=float)


# differentiation -----------------------------------------------------------

def differentiate(e: Expr, v: int | Par, memo: dict | None = None) -> Expr:
    """Symbolic partial derivative of ``e`` with respect to parameter ``v``."""
    index = v.index if isinstance(v, Par) else int(v)
    if memo is None:
        memo = {}
    return _diff(e, index, memo)


def _diff(e: Expr, v: int, memo: dict) -> Expr:
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Par):
        return ONE if e.index == v else ZERO
    key = id(e)
    hit = memo.get(key)
    if hit is not None:
        return hit[1]
    if isinstance(e, Add):
        out = add(*(_diff(a, v, memo) for a in e.args))
    elif isinstance(e, Mul):
        terms = []
        for i, a in enumerate(e.args):
            da = _diff(a, v, memo)
            if da is ZERO or (isinstance(da, Const) and da.value == 0):
                continue
            terms.append(mul(*e.args[:i], da, *e.args[i + 1:]))
        out = add(*terms)
    elif isinstance(e, Pow):
        db = _diff(e.base, v, memo)
        if isinstance(db, Const) and db.value == 0:
            out = ZERO
        else:
            out = mul(Const(e.exponent), power(e.base, e.exponent - 1), db)
    elif isinstance(e, Log):
        da = _diff(e.arg, v, memo)
        out = ZERO if (isinstance(da, Const) and da.value == 0) else mul(da, power(e.arg, -1))
    else:
        raise TypeError(f"unknown node {type(e).__name__}")
    # keep e alive so its id is not recycled while the memo is in use
    memo[key] = (e, out)
    return out


# parameters ----------------------------------------------------------------

@dataclass(frozen=True)
class Parameter:
    id: int
    name: str

    def expr(self) -> Par:
        return Par(self.id, self.name)


class ParameterSet:
    """Finite ordered parameter set; ids are 0..len-1."""

    __slots__ = ("names", "_index")

    def __init__(self, names: Iterable[str] = ()):
        self.names = tuple(str(n) for n in names)
        self._index = {n: i for i, n in enumerate(self.names)}
        if len(self._index) != len(self.names):
            raise ValueError("parameter names must be unique")

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return (Parameter(i, n) for i, n in enumerate(self.names))

    def __getitem__(self, key) -> Parameter:
        if isinstance(key, str):
            return Parameter(self._index[key], key)
        return Parameter(int(key), self.names[key])

    def __contains__(self, name) -> bool:
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, ParameterSet) and other.names == self.names

    def __hash__(self):
        return hash(self.names)

    def __repr__(self):
        return f"ParameterSet({list(self.names)!r})"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise MissingParameter(name) from None

    def par(self, name: str) -> Par:
        return Par(self.index(name), name)

    def pars(self) -> list[Par]:
        return [Par(i, n) for i, n in enumerate(self.names)]


class Instantiation:
    """Immutable real vector indexed by parameter id."""

    __slots__ = ("values",)

    def __init__(self, values: Sequence[float]):
        arr = np.array(values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise ValueError("instantiation values must be finite")
        arr.setflags(write=False)
        self.values = arr

    @classmethod
    def from_mapping(cls, params: ParameterSet, mapping: Mapping[str, float]) -> "Instantiation":
        missing = [n for n in params.names if n not in mapping]
        if missing:
            raise MissingParameter(", ".join(missing))
        extra = set(mapping) - set(params.names)
        if extra:
            raise ValueError(f"unknown parameters {sorted(extra)}")
        return cls([mapping[n] for n in params.names])

    def to_mapping(self, params: ParameterSet) -> dict[str, float]:
        return {n: float(self.values[i]) for i, n in enumerate(params.names)}

    def with_value(self, index: int, value: float) -> "Instantiation":
        arr = self.values.copy()
        arr[index] = value
        return Instantiation(arr)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __repr__(self):
        return f"Instantiation({self.values.tolist()!r})"


def as_values(u) -> np.ndarray:
    if isinstance(u, Instantiation):
        return u.values
    return np.asarray(u, dtype=float).reshape(-1)


# JSON ---------------------------------------------------------------------

def to_json(e: Expr):
    if isinstance(e, Const):
        return _const_json(e.value)
    if isinstance(e, Par):
        return ["par", e.name]
    if isinstance(e, Add):
        return ["add", *(to_json(a) for a in e.args)]
    if isinstance(e, Mul):
        return ["mul", *(to_json(a) for a in e.args)]
    if isinstance(e, Pow):
        return ["pow", to_json(e.base), _const_json(e.exponent)]
    if isinstance(e, Log):
        return ["log", to_json(e.arg)]
    raise TypeError(type(e).__name__)


def _const_json(q: Fraction):
    if q.denominator == 1:
        return int(q.numerator)
    f = float(q)
    if Fraction(repr(f)) == q:
        return f
    return ["const", f"{q.numerator}/{q.denominator}"]


def from_json(obj, params: ParameterSet) -> Expr:
    if isinstance(obj, bool):
        raise ValueError("booleans are not expressions")
    if isinstance(obj, (int, float)):
        return Const(_frac(obj))
    if not isinstance(obj, list) or not obj or not isinstance(obj[0], str):
        raise ValueError(f"malformed expression {obj!r}")
    op, args = obj[0], obj[1:]
    if op == "const":
        return Const(_frac(args[0]))
    if op == "par":
        return params.par(args[0])
    sub = [from_json(a, params) for a in args] if op not in ("pow",) else None
    if op == "add":
        return add(*sub)
    if op == "mul":
        return mul(*sub)
    if op == "sub":
        a, b = sub
        return a - b
    if op == "div":
        a, b = sub
        return a / b
    if op == "neg":
        return -sub[0]
    if op == "log":
        return log(sub[0])
    if op == "pow":
        base = from_json(args[0], params)
        ex = args[1]
        if isinstance(ex, list):
            ex = from_json(ex, params)
            if not isinstance(ex, Const):
                raise ValueError("exponent must be a constant")
            ex = ex.value
        return power(base, _frac(ex))
    raise ValueError(f"unknown operator {op!r}")
