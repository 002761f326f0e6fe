"""Immutable symbolic expressions over named coordinates.

Everything downstream (forms, jet charts, reductions, integration) computes
over these trees.  Expressions are structurally canonical on construction:
sums and products are flattened and sorted, rational constants are folded
exactly (fractions.Fraction, never floats), like factors merge by exponent
addition so x*x^-1 cannot survive, and integer powers of sums expand.  Equality
is structural on canonical form.

Zero testing is probabilistic (seeded rational sampling with high-precision
evaluation of transcendental functions) with an exact fast path through a
rational normal form when the expression is rational in its symbols.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Union

import mpmath

Rational = Union[Fraction, int]

FUNCTIONS = ("exp", "log", "sin", "cos", "tan", "tanh", "arctan", "arctanh")

# Sum powers of sums expand up to this exponent; beyond it the node is kept
# opaque and the sampling zero test takes over.
_EXPAND_POW_LIMIT = 8


class ExprError(Exception):
    pass


class ChartMismatchError(ExprError):
    pass


class SingularEvaluationError(ExprError):
    pass


class SamplingExhaustedError(ExprError):
    pass


class IntegrationRuleFailure(ExprError):
    """An antiderivative fell outside the supported rule set."""


# ---------------------------------------------------------------------------
# nodes


class Expression:
    __slots__ = ("_hash",)

    kind = "?"

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Expression):
            return NotImplemented
        return self.kind == other.kind and self._payload() == other._payload()

    def __hash__(self):
        return self._hash

    def _payload(self):
        raise NotImplementedError

    # -- arithmetic sugar (yields to other operand types, e.g. forms) -------

    def __add__(self, other):
        if not isinstance(other, (Expression, int, Fraction)):
            return NotImplemented
        return add(self, _coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, (Expression, int, Fraction)):
            return NotImplemented
        return add(self, mul(RAT_M1, _coerce(other)))

    def __rsub__(self, other):
        if not isinstance(other, (Expression, int, Fraction)):
            return NotImplemented
        return add(_coerce(other), mul(RAT_M1, self))

    def __mul__(self, other):
        if not isinstance(other, (Expression, int, Fraction)):
            return NotImplemented
        return mul(self, _coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (Expression, int, Fraction)):
            return NotImplemented
        return mul(self, pow_(_coerce(other), -1))

    def __rtruediv__(self, other):
        if not isinstance(other, (Expression, int, Fraction)):
            return NotImplemented
        return mul(_coerce(other), pow_(self, -1))

    def __pow__(self, other):
        return pow_(self, other)

    def __neg__(self):
        return mul(RAT_M1, self)

    def __repr__(self):
        return to_text(self)

    def __str__(self):
        return to_text(self)


class Rat(Expression):
    __slots__ = ("value",)
    kind = "rat"

    def __init__(self, value: Fraction):
        self.value = value
        self._hash = hash(("rat", value))

    def _payload(self):
        return self.value


class Sym(Expression):
    __slots__ = ("name",)
    kind = "sym"

    def __init__(self, name: str):
        self.name = name
        self._hash = hash(("sym", name))

    def _payload(self):
        return self.name


class Func(Expression):
    __slots__ = ("name", "arg")
    kind = "func"

    def __init__(self, name: str, arg: Expression):
        self.name = name
        self.arg = arg
        self._hash = hash(("func", name, arg))

    def _payload(self):
        return (self.name, self.arg)


class Pow(Expression):
    __slots__ = ("base", "exp")
    kind = "pow"

    def __init__(self, base: Expression, exp: Fraction):
        self.base = base
        self.exp = exp
        self._hash = hash(("pow", base, exp))

    def _payload(self):
        return (self.base, self.exp)


class Mul(Expression):
    __slots__ = ("factors",)
    kind = "mul"

    def __init__(self, factors: tuple):
        self.factors = factors
        self._hash = hash(("mul", factors))

    def _payload(self):
        return self.factors


class Add(Expression):
    __slots__ = ("terms",)
    kind = "add"

    def __init__(self, terms: tuple):
        self.terms = terms
        self._hash = hash(("add", terms))

    def _payload(self):
        return self.terms


ZERO = Rat(Fraction(0))
ONE = Rat(Fraction(1))
RAT_M1 = Rat(Fraction(-1))
HALF = Rat(Fraction(1, 2))


def _coerce(x) -> Expression:
    if isinstance(x, Expression):
        return x
    if isinstance(x, (int, Fraction)):
        return rat(x)
    raise TypeError(f"cannot coerce {x!r} into an Expression")


def rat(value: Rational, den: int = 1) -> Expression:
    return Rat(Fraction(value, den))


def sym(name: str) -> Expression:
    return Sym(name)


def syms(names: str) -> list:
    return [Sym(n) for n in names.replace(",", " ").split()]


# ---------------------------------------------------------------------------
# total order


_KIND_RANK = {"rat": 0, "sym": 1, "func": 2, "pow": 3, "mul": 4, "add": 5}


def sort_key(e: Expression):
    k = _KIND_RANK[e.kind]
    if e.kind == "rat":
        return (k, e.value)
    if e.kind == "sym":
        return (k, e.name)
    if e.kind == "func":
        return (k, e.name, sort_key(e.arg))
    if e.kind == "pow":
        return (k, sort_key(e.base), e.exp)
    if e.kind == "mul":
        return (k, tuple(sort_key(f) for f in e.factors))
    return (k, tuple(sort_key(t) for t in e.terms))


# ---------------------------------------------------------------------------
# canonical constructors


def _as_coeff_monomial(e: Expression):
    """Split a canonical term into (rational coefficient, monomial part)."""
    if e.kind == "rat":
        return e.value, ONE
    if e.kind == "mul":
        if e.factors[0].kind == "rat":
            rest = e.factors[1:]
            mono = rest[0] if len(rest) == 1 else Mul(rest)
            return e.factors[0].value, mono
        return Fraction(1), e
    return Fraction(1), e


def add(*xs) -> Expression:
    acc: dict = {}
    const = Fraction(0)
    stack = [_coerce(x) for x in xs]
    stack.reverse()
    while stack:
        t = stack.pop()
        if t.kind == "add":
            stack.extend(reversed(t.terms))
        elif t.kind == "rat":
            const += t.value
        else:
            c, mono = _as_coeff_monomial(t)
            acc[mono] = acc.get(mono, Fraction(0)) + c
    terms = []
    for mono, c in acc.items():
        if c == 0:
            continue
        if c == 1:
            terms.append(mono)
        else:
            terms.append(_mul_raw(c, mono))
    if const != 0:
        terms.append(Rat(const))
    if not terms:
        return ZERO
    terms.sort(key=sort_key)
    if len(terms) == 1:
        return terms[0]
    return Add(tuple(terms))


def _mul_raw(coeff: Fraction, mono: Expression) -> Expression:
    """coeff * mono where mono is a canonical non-add, non-rat monomial."""
    if mono is ONE or mono == ONE:
        return Rat(coeff)
    if mono.kind == "mul":
        return Mul((Rat(coeff),) + mono.factors)
    return Mul((Rat(coeff), mono))


def _as_base_exp(e: Expression):
    if e.kind == "pow":
        return e.base, e.exp
    return e, Fraction(1)


def mul(*xs) -> Expression:
    coeff = Fraction(1)
    bases: dict = {}
    order: list = []
    adds: list = []
    stack = [_coerce(x) for x in xs]
    stack.reverse()
    while stack:
        f = stack.pop()
        if f.kind == "mul":
            stack.extend(reversed(f.factors))
        elif f.kind == "rat":
            coeff *= f.value
        elif f.kind == "add":
            adds.append(f)
        else:
            b, ex = _as_base_exp(f)
            if b not in bases:
                bases[b] = Fraction(0)
                order.append(b)
            bases[b] += ex
    if coeff == 0:
        return ZERO
    factors = []
    exp_arg_parts = []
    for b in order:
        ex = bases[b]
        if b.kind == "func" and b.name == "exp":
            # exp factors merge: exp(a)^p * exp(b)^q = exp(pa + qb)
            exp_arg_parts.append(mul(Rat(ex), b.arg))
            continue
        p = pow_(b, ex)
        if p.kind == "rat":
            coeff *= p.value
        elif p.kind == "mul":
            # rational fold-out from e.g. (2x)^2 style bases
            for g in p.factors:
                if g.kind == "rat":
                    coeff *= g.value
                else:
                    factors.append(g)
        elif p.kind == "add":
            adds.append(p)
        elif p != ONE:
            factors.append(p)
    if exp_arg_parts:
        merged = func("exp", add(*exp_arg_parts))
        if merged.kind == "func" and merged.name == "exp":
            factors.append(merged)
        elif merged != ONE:
            # log folding turned it into a power/product; recombine once
            return mul(Rat(coeff), merged, *factors, *adds)
    if coeff == 0:
        return ZERO
    if adds:
        # distribute over sums: expanded normal form
        expanded = [(coeff, factors)]
        for a in adds:
            nxt = []
            for c, fs in expanded:
                for t in a.terms:
                    tc, tm = _as_coeff_monomial(t)
                    nxt.append((c * tc, fs + ([] if tm == ONE else [tm])))
            expanded = nxt
        return add(*[
            mul(Rat(c), *fs) if fs else Rat(c) for c, fs in expanded
        ])
    factors.sort(key=sort_key)
    if not factors:
        return Rat(coeff)
    if coeff != 1:
        factors.insert(0, Rat(coeff))
    if len(factors) == 1:
        return factors[0]
    return Mul(tuple(factors))


def _nth_root_exact(q: Fraction, n: int) -> Optional[Fraction]:
    """Exact n-th root of a nonnegative rational, or None."""
    def iroot(m: int) -> Optional[int]:
        if m in (0, 1):
            return m
        r = round(m ** (1.0 / n))
        for cand in (r - 1, r, r + 1):
            if cand >= 0 and cand ** n == m:
                return cand
        return None

    a, b = iroot(q.numerator), iroot(q.denominator)
    if a is None or b is None:
        return None
    return Fraction(a, b)


def pow_(base, exp) -> Expression:
    base = _coerce(base)
    if isinstance(exp, Expression):
        if exp.kind != "rat":
            raise ExprError("exponents must be rational constants")
        exp = exp.value
    exp = Fraction(exp)
    if exp == 0:
        return ONE
    if exp == 1:
        return base
    if base.kind == "rat":
        q = base.value
        if exp.denominator == 1:
            n = exp.numerator
            if q == 0:
                if n < 0:
                    raise SingularEvaluationError("0 raised to a negative power")
                return ZERO
            return Rat(q ** n)
        if q == 0:
            return ZERO
        if q > 0:
            r = _nth_root_exact(q, exp.denominator)
            if r is not None:
                return pow_(Rat(r), Fraction(exp.numerator))
        return Pow(base, exp)
    if base.kind == "pow":
        # (b^a)^n merges for integer n; for fractional outer exponents merging
        # is only branch-safe when the inner power already constrains b >= 0
        # (fractional a) or is odd.  (x^2)^(1/2) = |x| must stay unmerged.
        inner_even = base.exp.denominator == 1 and base.exp.numerator % 2 == 0
        if exp.denominator == 1 or not inner_even:
            return pow_(base.base, base.exp * exp)
        return Pow(base, exp)
    if base.kind == "mul" and exp.denominator == 1:
        return mul(*[pow_(f, exp) for f in base.factors])
    if base.kind == "func" and base.name == "exp":
        return func("exp", mul(Rat(exp), base.arg))
    if base.kind == "add":
        if exp.denominator == 1 and 2 <= exp <= _EXPAND_POW_LIMIT:
            out = base
            for _ in range(int(exp) - 1):
                out = mul(out, base)
            return out
        if exp > 1:
            ipart = int(exp)  # floor for positive exp
            frac = exp - ipart
            if frac != 0 and 1 <= ipart <= _EXPAND_POW_LIMIT:
                return mul(pow_(base, Fraction(ipart)), Pow(base, frac))
    return Pow(base, exp)


def _split_log_multiple(t: Expression):
    """Match r*log(w) inside an exp argument; return (r, w) or None."""
    if t.kind == "func" and t.name == "log":
        return Fraction(1), t.arg
    if t.kind == "mul":
        c, mono = _as_coeff_monomial(t)
        if mono.kind == "func" and mono.name == "log":
            return c, mono.arg
    return None


def func(name: str, arg) -> Expression:
    arg = _coerce(arg)
    if name == "sqrt":
        return pow_(arg, Fraction(1, 2))
    if name not in FUNCTIONS:
        raise ExprError(f"unknown function {name!r}")
    if name == "exp":
        if arg == ZERO:
            return ONE
        if arg.kind == "func" and arg.name == "log":
            return arg.arg
        m = _split_log_multiple(arg)
        if m is not None:
            return pow_(m[1], m[0])
        if arg.kind == "add":
            logs, rest = [], []
            for t in arg.terms:
                m = _split_log_multiple(t)
                if m is not None:
                    logs.append(m)
                else:
                    rest.append(t)
            if logs:
                parts = [pow_(w, r) for r, w in logs]
                if rest:
                    parts.append(Func("exp", add(*rest)))
                return mul(*parts)
    elif name == "log":
        if arg == ONE:
            return ZERO
        if arg.kind == "func" and arg.name == "exp":
            return arg.arg
    elif name in ("sin", "tan", "tanh", "arctan", "arctanh"):
        if arg == ZERO:
            return ZERO
        if name == "tanh" and arg.kind == "func" and arg.name == "arctanh":
            return arg.arg
        if name == "arctanh" and arg.kind == "func" and arg.name == "tanh":
            return arg.arg
        if name == "tan" and arg.kind == "func" and arg.name == "arctan":
            return arg.arg
        if name == "arctan" and arg.kind == "func" and arg.name == "tan":
            return arg.arg
    elif name == "cos":
        if arg == ZERO:
            return ONE
    return Func(name, arg)


def sqrt(arg) -> Expression:
    return pow_(arg, Fraction(1, 2))


def exp(arg) -> Expression:
    return func("exp", arg)


def log(arg) -> Expression:
    return func("log", arg)


# ---------------------------------------------------------------------------
# traversal helpers


def free_symbols(e: Expression) -> frozenset:
    if e.kind == "sym":
        return frozenset((e.name,))
    if e.kind == "rat":
        return frozenset()
    if e.kind == "func":
        return free_symbols(e.arg)
    if e.kind == "pow":
        return free_symbols(e.base)
    if e.kind == "mul":
        out = frozenset()
        for f in e.factors:
            out |= free_symbols(f)
        return out
    out = frozenset()
    for t in e.terms:
        out |= free_symbols(t)
    return out


def contains_symbol(e: Expression, name: str) -> bool:
    return name in free_symbols(e)


def is_rational_in(e: Expression, names=None) -> bool:
    """True when e is built purely from +,*,integer powers over symbols."""
    if e.kind in ("rat", "sym"):
        return True
    if e.kind == "func":
        return False
    if e.kind == "pow":
        return e.exp.denominator == 1 and is_rational_in(e.base)
    if e.kind == "mul":
        return all(is_rational_in(f) for f in e.factors)
    return all(is_rational_in(t) for t in e.terms)


# ---------------------------------------------------------------------------
# charts


@dataclass(frozen=True)
class Coordinate:
    """A named chart coordinate with its 0-based position."""

    name: str
    index: int

    def __str__(self):
        return self.name


class Chart:
    """An ordered coordinate chart, optionally carrying dependent symbols.

    Dependent symbols model opaque unknown functions of the base coordinates
    (with formal first partials); the exterior derivative expands them through
    the registered partial-symbol table.
    """

    def __init__(self, names: Iterable[str], excluded=(),
                 dependents: Optional[Mapping[str, Mapping[str, str]]] = None,
                 n_base: Optional[int] = None):
        names = list(names)
        if not names:
            raise ExprError("chart must have at least one coordinate")
        if len(set(names)) != len(names):
            raise ExprError("chart coordinate names must be unique")
        self.coords = tuple(Coordinate(n, i) for i, n in enumerate(names))
        self.names = tuple(names)
        self._index = {n: i for i, n in enumerate(names)}
        self.excluded = tuple(excluded)
        self.dependents = {k: dict(v) for k, v in (dependents or {}).items()}
        self.n_base = len(names) if n_base is None else n_base

    @property
    def dim(self) -> int:
        return len(self.coords)

    def __len__(self):
        return len(self.coords)

    def __iter__(self):
        return iter(self.coords)

    def __contains__(self, name) -> bool:
        if isinstance(name, Coordinate):
            return self._index.get(name.name) == name.index
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, Chart) and self.names == other.names

    def __hash__(self):
        return hash(self.names)

    def __repr__(self):
        return f"Chart({', '.join(self.names)})"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ChartMismatchError(f"{name!r} is not a coordinate of {self!r}")

    def coordinate(self, name: str) -> Coordinate:
        return self.coords[self.index(name)]

    def symbol(self, name: str) -> Expression:
        self.index(name)
        return Sym(name)

    def symbols(self) -> list:
        return [Sym(n) for n in self.names]

    def with_excluded(self, *predicates) -> "Chart":
        return Chart(self.names, self.excluded + tuple(predicates),
                     self.dependents, self.n_base)

    def extended(self, extra_names: Iterable[str]) -> "Chart":
        """New chart with extra independent coordinates appended."""
        if self.dependents:
            raise ExprError("cannot extend a chart carrying dependent symbols")
        return Chart(list(self.names) + list(extra_names), self.excluded)

    def extend_with_unknowns(self, unknown_names: Iterable[str],
                             over: Optional[Iterable[str]] = None) -> "Chart":
        """Adjoin opaque function symbols plus their formal first partials.

        Each unknown u gains partial symbols u_<coord> for every base
        coordinate (or `over`); d(u) expands accordingly.  The appended
        symbols are dependent: basis differentials keep ranging over the
        original coordinates only.
        """
        base = list(over) if over is not None else list(self.names[:self.n_base])
        names = list(self.names)
        deps = {k: dict(v) for k, v in self.dependents.items()}
        for u in unknown_names:
            partials = {}
            names.append(u)
            for b in base:
                pname = f"{u}_{b}"
                partials[b] = pname
                names.append(pname)
            deps[u] = partials
        return Chart(names, self.excluded, deps, self.n_base)


def partials_of(chart: Chart, unknown: str) -> dict:
    return chart.dependents[unknown]


def bind_unknowns(e: Expression, chart: Chart,
                  bindings: Mapping[str, Expression]) -> Expression:
    """Substitute unknown function symbols and their formal partials."""
    table = {}
    for u, val in bindings.items():
        table[u] = val
        for base, pname in chart.dependents.get(u, {}).items():
            table[pname] = diff(val, base)
    return substitute_names(e, table)


# ---------------------------------------------------------------------------
# differentiation and substitution


_DIFF_CACHE: dict = {}


def diff(e: Expression, name: str) -> Expression:
    """Partial derivative treating every symbol as independent."""
    key = (e, name)
    hit = _DIFF_CACHE.get(key)
    if hit is not None:
        return hit
    out = _diff(e, name)
    if len(_DIFF_CACHE) > 200000:
        _DIFF_CACHE.clear()
    _DIFF_CACHE[key] = out
    return out


def _diff(e: Expression, name: str) -> Expression:
    if e.kind == "rat":
        return ZERO
    if e.kind == "sym":
        return ONE if e.name == name else ZERO
    if e.kind == "pow":
        db = diff(e.base, name)
        if db == ZERO:
            return ZERO
        return mul(Rat(e.exp), pow_(e.base, e.exp - 1), db)
    if e.kind == "mul":
        terms = []
        for i, f in enumerate(e.factors):
            df = diff(f, name)
            if df == ZERO:
                continue
            rest = e.factors[:i] + e.factors[i + 1:]
            terms.append(mul(df, *rest))
        return add(*terms) if terms else ZERO
    if e.kind == "add":
        return add(*[diff(t, name) for t in e.terms])
    # function application
    da = diff(e.arg, name)
    if da == ZERO:
        return ZERO
    a = e.arg
    n = e.name
    if n == "exp":
        outer = e
    elif n == "log":
        outer = pow_(a, -1)
    elif n == "sin":
        outer = func("cos", a)
    elif n == "cos":
        outer = mul(RAT_M1, func("sin", a))
    elif n == "tan":
        outer = add(ONE, pow_(func("tan", a), 2))
    elif n == "tanh":
        outer = add(ONE, mul(RAT_M1, pow_(func("tanh", a), 2)))
    elif n == "arctan":
        outer = pow_(add(ONE, pow_(a, 2)), -1)
    elif n == "arctanh":
        outer = pow_(add(ONE, mul(RAT_M1, pow_(a, 2))), -1)
    else:  # pragma: no cover
        raise ExprError(f"no derivative rule for {n}")
    return mul(outer, da)


def differentiate(e: Expression, coord, chart: Optional[Chart] = None) -> Expression:
    """Partial derivative with chart validation (coordinates independent)."""
    if isinstance(coord, Coordinate):
        name = coord.name
    else:
        name = coord
    if chart is not None and name not in chart:
        raise ChartMismatchError(f"{name!r} does not belong to chart {chart!r}")
    return diff(e, name)


def substitute_names(e: Expression, table: Mapping[str, Expression]) -> Expression:
    if not table:
        return e
    return _subst(e, dict(table))


def _subst(e: Expression, table: dict) -> Expression:
    if e.kind == "rat":
        return e
    if e.kind == "sym":
        return table.get(e.name, e)
    if e.kind == "func":
        return func(e.name, _subst(e.arg, table))
    if e.kind == "pow":
        return pow_(_subst(e.base, table), e.exp)
    if e.kind == "mul":
        return mul(*[_subst(f, table) for f in e.factors])
    return add(*[_subst(t, table) for t in e.terms])


def substitute(e: Expression, bindings: Mapping) -> Expression:
    """Simultaneous substitution; keys may be Coordinates, Syms or names."""
    table = {}
    for k, v in bindings.items():
        if isinstance(k, Coordinate):
            table[k.name] = _coerce(v)
        elif isinstance(k, Sym):
            table[k.name] = _coerce(v)
        else:
            table[str(k)] = _coerce(v)
    return substitute_names(e, table)


# ---------------------------------------------------------------------------
# evaluation


def _to_mpf(v):
    if isinstance(v, Fraction):
        return mpmath.mpf(v.numerator) / mpmath.mpf(v.denominator)
    return v


def evaluate(e: Expression, assignment: Mapping[str, Rational],
             prec_bits: int = 96):
    """Evaluate at a point; exact Fraction for rational e, mpf otherwise.

    Raises SingularEvaluationError on poles and real-domain violations
    (log of a nonpositive value, even roots of negatives, |arctanh arg| >= 1).
    """
    with mpmath.workprec(max(prec_bits, 64)):
        v = _eval(e, assignment)
        if not isinstance(v, Fraction):
            if mpmath.isnan(v) or mpmath.isinf(v):
                raise SingularEvaluationError("non-finite evaluation")
            if abs(v) > mpmath.mpf(10) ** 40:
                raise SingularEvaluationError("evaluation overflow")
        return v


def _eval(e: Expression, a: Mapping[str, Rational]):
    if e.kind == "rat":
        return e.value
    if e.kind == "sym":
        try:
            v = a[e.name]
        except KeyError:
            raise SingularEvaluationError(f"unassigned symbol {e.name!r}")
        return Fraction(v) if isinstance(v, (int, Fraction)) else v
    if e.kind == "add":
        vals = [_eval(t, a) for t in e.terms]
        if all(isinstance(v, Fraction) for v in vals):
            return sum(vals, Fraction(0))
        return sum((_to_mpf(v) for v in vals), mpmath.mpf(0))
    if e.kind == "mul":
        out = Fraction(1)
        for f in e.factors:
            v = _eval(f, a)
            if isinstance(out, Fraction) and isinstance(v, Fraction):
                out = out * v
            else:
                out = _to_mpf(out) * _to_mpf(v)
        return out
    if e.kind == "pow":
        b = _eval(e.base, a)
        ex = e.exp
        if isinstance(b, Fraction):
            if ex.denominator == 1:
                if b == 0 and ex < 0:
                    raise SingularEvaluationError("division by zero")
                return b ** ex.numerator
            if b < 0:
                raise SingularEvaluationError("fractional power of a negative value")
            if b == 0:
                if ex < 0:
                    raise SingularEvaluationError("division by zero")
                return Fraction(0)
            r = _nth_root_exact(b, ex.denominator)
            if r is not None:
                return r ** ex.numerator
            return mpmath.mpf(b.numerator) ** ex / mpmath.mpf(b.denominator) ** ex
        bm = _to_mpf(b)
        if bm == 0:
            if ex < 0:
                raise SingularEvaluationError("division by zero")
            return mpmath.mpf(0)
        if bm < 0:
            if ex.denominator == 1:
                return bm ** int(ex)
            raise SingularEvaluationError("fractional power of a negative value")
        return mpmath.power(bm, mpmath.mpf(ex.numerator) / ex.denominator)
    # func
    v = _to_mpf(_eval(e.arg, a))
    n = e.name
    if n == "exp":
        return mpmath.exp(v)
    if n == "log":
        if v <= 0:
            raise SingularEvaluationError("log of a nonpositive value")
        return mpmath.log(v)
    if n == "sin":
        return mpmath.sin(v)
    if n == "cos":
        return mpmath.cos(v)
    if n == "tan":
        return mpmath.tan(v)
    if n == "tanh":
        return mpmath.tanh(v)
    if n == "arctan":
        return mpmath.atan(v)
    if n == "arctanh":
        if abs(v) >= 1:
            raise SingularEvaluationError("arctanh argument outside (-1, 1)")
        return mpmath.atanh(v)
    raise ExprError(f"cannot evaluate function {n}")  # pragma: no cover


# ---------------------------------------------------------------------------
# sparse multivariate polynomials over atoms (rational normal form)


class _PolyCtx:
    """Maps non-rational building blocks ("atoms") to polynomial variables.

    Atoms are symbols, whole function applications, and fractional-power bases
    (a base occurring with denominator q is tracked through a q-th-root atom so
    that all its powers stay consistent).
    """

    def __init__(self):
        self.atoms: list = []
        self.index: dict = {}
        self.root_den: dict = {}  # atom index -> q for root atoms

    def var(self, atom: Expression, root_den: int = 1) -> int:
        key = (atom, root_den)
        i = self.index.get(key)
        if i is None:
            i = len(self.atoms)
            self.index[key] = i
            self.atoms.append(atom)
            self.root_den[i] = root_den
        return i

    def expr_of(self, i: int, power: int) -> Expression:
        q = self.root_den[i]
        return pow_(self.atoms[i], Fraction(power, q))


_POLY_ONE = {(): Fraction(1)}


def _pkey(mono: tuple, n: int) -> tuple:
    return mono + (0,) * (n - len(mono))


def _pstrip(m: tuple) -> tuple:
    """Canonical monomial key: no trailing zero exponents."""
    while m and m[-1] == 0:
        m = m[:-1]
    return m


def _pfix(p: dict) -> dict:
    """Re-key to canonical monomials, merging representations."""
    out: dict = {}
    for m, c in p.items():
        m = _pstrip(m)
        out[m] = out.get(m, Fraction(0)) + c
    return {m: c for m, c in out.items() if c != 0}


def _pnorm(p: dict) -> dict:
    return {m: c for m, c in p.items() if c != 0}


def _padd(a: dict, b: dict) -> dict:
    out = dict(a)
    for m, c in b.items():
        out[m] = out.get(m, Fraction(0)) + c
        if out[m] == 0:
            del out[m]
    return out


def _pscale(a: dict, c: Fraction) -> dict:
    if c == 0:
        return {}
    return {m: v * c for m, v in a.items()}


def _pmul(a: dict, b: dict) -> dict:
    out: dict = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            la, lb = len(ma), len(mb)
            if la < lb:
                ma2 = ma + (0,) * (lb - la)
                m = _pstrip(tuple(x + y for x, y in zip(ma2, mb)))
            elif lb < la:
                mb2 = mb + (0,) * (la - lb)
                m = _pstrip(tuple(x + y for x, y in zip(ma, mb2)))
            else:
                m = _pstrip(tuple(x + y for x, y in zip(ma, mb)))
            out[m] = out.get(m, Fraction(0)) + ca * cb
    return _pnorm(out)


def _ppow(a: dict, n: int) -> dict:
    out = dict(_POLY_ONE)
    base = a
    while n:
        if n & 1:
            out = _pmul(out, base)
        base = _pmul(base, base) if n > 1 else base
        n >>= 1
    return out


def _plead(p: dict):
    return max(p.items(), key=lambda kv: kv[0])


def _pdivexact(num: dict, den: dict) -> Optional[dict]:
    """Exact multivariate division; None when den does not divide num.

    Works in canonical (trailing-zero-stripped) keys throughout; Python's
    tuple order on canonical keys agrees with padded lexicographic order for
    nonnegative exponents, so it is a valid monomial order here.
    """
    num = _pfix(num)
    den = _pfix(den)
    if not num:
        return {}
    if not den:
        return None
    dm, dc = _plead(den)
    q: dict = {}
    r = dict(num)
    guard = 0
    while r:
        guard += 1
        if guard > 20000:
            return None
        rm, rc = _plead(r)
        n = max(len(rm), len(dm))
        qm = _pstrip(tuple(a - b for a, b in zip(_pkey(rm, n), _pkey(dm, n))))
        if any(x < 0 for x in qm):
            return None
        qc = rc / dc
        q[qm] = q.get(qm, Fraction(0)) + qc
        r = _padd(r, _pscale(den, -qc) if not qm else
                  _pmul({qm: -qc}, den))
    return _pnorm(q)


class RationalForm:
    """num / prod(factor^k): expanded numerator with a factored denominator."""

    __slots__ = ("num", "den")

    def __init__(self, num: dict, den: dict):
        self.num = num
        self.den = den  # frozen poly -> positive int power

    @staticmethod
    def const(c: Fraction) -> "RationalForm":
        return RationalForm({(): c} if c != 0 else {}, {})


def _freeze(p: dict) -> tuple:
    return tuple(sorted(p.items()))


def _thaw(f: tuple) -> dict:
    return dict(f)


def _rf_mul(a: RationalForm, b: RationalForm) -> RationalForm:
    den = dict(a.den)
    for f, k in b.den.items():
        den[f] = den.get(f, 0) + k
    return _rf_cancel(RationalForm(_pmul(a.num, b.num), den))


def _rf_add(a: RationalForm, b: RationalForm) -> RationalForm:
    den: dict = {}
    for f in set(a.den) | set(b.den):
        den[f] = max(a.den.get(f, 0), b.den.get(f, 0))
    num_a = a.num
    for f, k in den.items():
        extra = k - a.den.get(f, 0)
        for _ in range(extra):
            num_a = _pmul(num_a, _thaw(f))
    num_b = b.num
    for f, k in den.items():
        extra = k - b.den.get(f, 0)
        for _ in range(extra):
            num_b = _pmul(num_b, _thaw(f))
    return _rf_cancel(RationalForm(_padd(num_a, num_b), den))


def _pcontent(p: dict):
    """(coefficient, monomial, primitive) with a sign-normalized lead."""
    if not p:
        return Fraction(1), (), {}
    n = max(len(m) for m in p)
    mono = None
    for m in p:
        m = _pkey(m, n)
        mono = m if mono is None else tuple(min(a, b) for a, b in zip(mono, m))
    from math import gcd
    num_gcd = 0
    den_lcm = 1
    for c in p.values():
        num_gcd = gcd(num_gcd, abs(c.numerator))
        den_lcm = den_lcm * c.denominator // gcd(den_lcm, c.denominator)
    coef = Fraction(num_gcd, den_lcm) if num_gcd else Fraction(1)
    lead_m, lead_c = _plead({_pkey(m, n): c for m, c in p.items()})
    if lead_c < 0:
        coef = -coef

    def strip(m):
        while m and m[-1] == 0:
            m = m[:-1]
        return m

    prim = {}
    for m, c in p.items():
        m = _pkey(m, n)
        prim[strip(tuple(a - b for a, b in zip(m, mono)))] = c / coef
    return coef, mono, prim


def _rf_cancel(r: RationalForm) -> RationalForm:
    if not r.num:
        return RationalForm({}, {})
    num = r.num
    den: dict = {}
    # split every denominator factor into coefficient * monomial * primitive
    for f, k in r.den.items():
        fp = _thaw(f)
        if fp == _POLY_ONE or not fp:
            continue
        coef, mono, prim = _pcontent(fp)
        if coef != 1:
            num = _pscale(num, Fraction(1) / coef ** k)
        for i, m in enumerate(mono):
            if m > 0:
                unit = _freeze({tuple(0 if j != i else 1
                                      for j in range(i + 1)): Fraction(1)})
                den[unit] = den.get(unit, 0) + m * k
        if prim != _POLY_ONE and prim:
            key = _freeze(prim)
            den[key] = den.get(key, 0) + k
    for f in list(den):
        fp = _thaw(f)
        while den.get(f, 0) > 0:
            q = _pdivexact(num, fp)
            if q is None:
                break
            num = q
            den[f] -= 1
            if den[f] == 0:
                del den[f]
    return RationalForm(num, den)


def _inv_rf(r: RationalForm, ctx_size_hint: int = 0) -> RationalForm:
    if not r.num:
        raise SingularEvaluationError("division by a canonically zero expression")
    num = dict(_POLY_ONE)
    for f, k in r.den.items():
        fp = _thaw(f)
        for _ in range(k):
            num = _pmul(num, fp)
    # numerator becomes a single denominator factor
    den = {_freeze(r.num): 1}
    return _rf_cancel(RationalForm(num, den))


def _to_rf(e: Expression, ctx: _PolyCtx) -> RationalForm:
    if e.kind == "rat":
        return RationalForm.const(e.value)
    if e.kind == "sym":
        i = ctx.var(e)
        return RationalForm({(0,) * i + (1,): Fraction(1)}, {})
    if e.kind == "func":
        i = ctx.var(e)
        return RationalForm({(0,) * i + (1,): Fraction(1)}, {})
    if e.kind == "add":
        out = RationalForm.const(Fraction(0))
        for t in e.terms:
            out = _rf_add(out, _to_rf(t, ctx))
        return out
    if e.kind == "mul":
        out = RationalForm.const(Fraction(1))
        for f in e.factors:
            out = _rf_mul(out, _to_rf(f, ctx))
        return out
    # pow
    ex = e.exp
    if ex.denominator == 1:
        base = _to_rf(e.base, ctx)
        n = ex.numerator
        if n < 0:
            base = _inv_rf(base)
            n = -n
        num = _ppow(base.num, n)
        den: dict = {}
        for f, k in base.den.items():
            den[f] = k * n
        return _rf_cancel(RationalForm(num, den))
    # fractional power: root atom for the base
    i = ctx.var(e.base, ex.denominator)
    power = ex.numerator
    if power >= 0:
        return RationalForm({(0,) * i + (power,): Fraction(1)}, {})
    return RationalForm(dict(_POLY_ONE), {_freeze({(0,) * i + (-power,): Fraction(1)}): 1})


def rational_normal_form(e: Expression):
    """Return (numerator Expression, denominator Expression) with the
    numerator an expanded polynomial over atoms; numerator == 0 iff the
    expression is the zero rational combination of its atoms."""
    ctx = _PolyCtx()
    r = _to_rf(e, ctx)
    return _from_poly(r.num, ctx), _den_expr(r.den, ctx)


def _from_poly(p: dict, ctx: _PolyCtx) -> Expression:
    terms = []
    for mono, c in p.items():
        factors = [Rat(c)]
        for i, k in enumerate(mono):
            if k:
                factors.append(ctx.expr_of(i, k))
        terms.append(mul(*factors))
    return add(*terms) if terms else ZERO


def _den_expr(den: dict, ctx: _PolyCtx) -> Expression:
    fs = []
    for f, k in den.items():
        fs.append(pow_(_from_poly(_thaw(f), ctx), Fraction(k)))
    return mul(*fs) if fs else ONE


def ratsimp(e: Expression) -> Expression:
    """Rewrite as num/den with an expanded numerator; strong simplifier."""
    ctx = _PolyCtx()
    r = _to_rf(e, ctx)
    num = _from_poly(r.num, ctx)
    if not r.den:
        return num
    if num == ZERO:
        return ZERO
    return mul(num, pow_(_den_expr(r.den, ctx), -1))


def numerator_is_zero(e: Expression) -> bool:
    ctx = _PolyCtx()
    return not _to_rf(e, ctx).num


# ---------------------------------------------------------------------------
# probabilistic zero testing


@dataclass(frozen=True)
class ZeroTestPolicy:
    """Sampling policy for the probabilistic equality oracle."""

    samples: int = 25
    low: Fraction = Fraction(-3)
    high: Fraction = Fraction(3)
    max_denominator: int = 7
    tolerance: float = 1e-9
    precision_bits: int = 96
    seed: int = 0
    max_attempts_per_sample: int = 200

    def with_seed(self, seed: int) -> "ZeroTestPolicy":
        return ZeroTestPolicy(self.samples, self.low, self.high,
                              self.max_denominator, self.tolerance,
                              self.precision_bits, seed,
                              self.max_attempts_per_sample)


DEFAULT_POLICY = ZeroTestPolicy()


@dataclass(frozen=True)
class SamplePoint:
    """A chart-indexed exact rational assignment avoiding an excluded locus."""

    values: Mapping[str, Fraction]
    excluded: tuple = ()

    def __getitem__(self, name):
        return self.values[name]


def _draw_value(rng: random.Random, policy: ZeroTestPolicy) -> Fraction:
    q = rng.randint(1, policy.max_denominator)
    lo = policy.low * q
    hi = policy.high * q
    p = rng.randint(int(lo), int(hi))
    return Fraction(p, q)


def draw_sample(names, rng: random.Random, policy: ZeroTestPolicy,
                excluded=(), guards=()) -> SamplePoint:
    """Draw one sample point; excluded predicates must stay away from zero,
    guard expressions must merely evaluate (reject on domain errors)."""
    names = list(names)
    for _ in range(policy.max_attempts_per_sample):
        values = {n: _draw_value(rng, policy) for n in names}
        ok = True
        for pred in excluded:
            try:
                v = evaluate(pred, values, policy.precision_bits)
            except SingularEvaluationError:
                ok = False
                break
            if abs(v) <= policy.tolerance:
                ok = False
                break
        if not ok:
            continue
        for g in guards:
            try:
                evaluate(g, values, policy.precision_bits)
            except SingularEvaluationError:
                ok = False
                break
        if ok:
            return SamplePoint(values, tuple(excluded))
    raise SamplingExhaustedError(
        "could not draw a sample point avoiding the excluded locus")


def _eval_poly_at(p: dict, atom_values: list):
    out = Fraction(0)
    mp_out = None
    for mono, c in p.items():
        term = c
        for i, k in enumerate(mono):
            if k:
                v = atom_values[i]
                if isinstance(term, Fraction) and isinstance(v, Fraction):
                    term = term * v ** k
                else:
                    term = _to_mpf(term) * _to_mpf(v) ** k
        if isinstance(term, Fraction) and mp_out is None:
            out += term
        else:
            if mp_out is None:
                mp_out = _to_mpf(out)
            mp_out += _to_mpf(term)
    return out if mp_out is None else mp_out


def is_identically_zero(e: Expression, chart: Optional[Chart] = None,
                        policy: ZeroTestPolicy = DEFAULT_POLICY,
                        excluded=()) -> bool:
    """Probabilistic zero test with an exact fast path.

    Exact shortcut: canonical zero, or zero numerator of the rational normal
    form; a nonzero numerator decides exactly when the expression is rational
    in plain symbols.  Otherwise the NUMERATOR polynomial is sampled at
    `policy.samples` admissible points (|num| <= tol * max(1, |den|)), which
    sidesteps the catastrophic cancellation the raw nested quotients would
    suffer; points too close to the denominator locus or the excluded locus
    are rejected and redrawn.
    """
    if e == ZERO:
        return True
    ctx = _PolyCtx()
    r = None
    try:
        r = _to_rf(e, ctx)
        if not r.num:
            return True
        if is_rational_in(e):
            return False
    except SingularEvaluationError:
        pass
    names = set(free_symbols(e))
    if chart is not None:
        names |= set(chart.names)
        excluded = tuple(excluded) + tuple(chart.excluded)
    for pred in excluded:
        names |= free_symbols(pred)
    if not names:
        v = evaluate(e, {}, policy.precision_bits)
        return abs(v) <= policy.tolerance
    names = sorted(names)
    rng = random.Random(policy.seed)
    checked = 0
    attempts = 0
    den_factors = [( _thaw(f), k) for f, k in r.den.items()] if r is not None else []
    with mpmath.workprec(max(policy.precision_bits, 64)):
        while checked < policy.samples:
            attempts += 1
            if attempts > policy.max_attempts_per_sample * policy.samples:
                raise SamplingExhaustedError(
                    "excluded locus rejected too many sample draws")
            values = {n: _draw_value(rng, policy) for n in names}
            try:
                bad = False
                for pred in excluded:
                    pv = evaluate(pred, values, policy.precision_bits)
                    if abs(pv) <= policy.tolerance:
                        bad = True
                        break
                if bad:
                    continue
                if r is None:
                    v = evaluate(e, values, policy.precision_bits)
                    if abs(v) > policy.tolerance:
                        return False
                    checked += 1
                    continue
                atom_values = [
                    evaluate(ctx.expr_of(i, 1), values, policy.precision_bits)
                    for i in range(len(ctx.atoms))]
                den_v = Fraction(1)
                den_ok = True
                for fp, k in den_factors:
                    fv = _eval_poly_at(fp, atom_values)
                    if abs(fv) <= policy.tolerance:
                        den_ok = False
                        break
                    den_v = _to_mpf(den_v) * _to_mpf(fv) ** k \
                        if not (isinstance(den_v, Fraction) and isinstance(fv, Fraction)) \
                        else den_v * fv ** k
                if not den_ok:
                    continue
                num_v = _eval_poly_at(r.num, atom_values)
            except SingularEvaluationError:
                continue
            scale = abs(den_v) if abs(den_v) > 1 else 1
            if abs(num_v) > policy.tolerance * scale:
                return False
            checked += 1
    return True


def expressions_equal(a: Expression, b: Expression,
                      chart: Optional[Chart] = None,
                      policy: ZeroTestPolicy = DEFAULT_POLICY,
                      excluded=()) -> bool:
    return is_identically_zero(add(a, mul(RAT_M1, b)), chart, policy, excluded)


# ---------------------------------------------------------------------------
# text rendering (must round-trip through the frontend parser)


def _paren(s: str, needed: bool) -> str:
    return f"({s})" if needed else s


def to_text(e: Expression) -> str:
    return _render(e, 0)


# precedence levels: 0 add, 1 mul, 2 unary-, 3 pow, 4 atom
def _render(e: Expression, ctx: int) -> str:
    if e.kind == "rat":
        v = e.value
        if v.denominator == 1:
            s = str(v.numerator)
            return _paren(s, ctx >= 3 and v < 0) if v < 0 else s
        s = f"{v.numerator}/{v.denominator}"
        return _paren(s, ctx >= 2)
    if e.kind == "sym":
        return e.name
    if e.kind == "func":
        return f"{e.name}({_render(e.arg, 0)})"
    if e.kind == "pow":
        b = _render(e.base, 3)
        if e.base.kind in ("mul", "add", "pow") or (
                e.base.kind == "rat"):
            b = f"({_render(e.base, 0)})"
        ex = e.exp
        if ex.denominator == 1 and ex >= 0:
            return f"{b}^{ex.numerator}"
        return f"{b}^({ex.numerator}/{ex.denominator})" if ex.denominator != 1 \
            else f"{b}^({ex.numerator})"
    if e.kind == "mul":
        factors = list(e.factors)
        neg = False
        if factors[0].kind == "rat" and factors[0].value == -1 and len(factors) > 1:
            neg = True
            factors = factors[1:]
        num_parts, den_parts = [], []
        for f in factors:
            if f.kind == "pow" and f.exp < 0:
                den_parts.append(_render(pow_(f.base, -f.exp), 1))
            else:
                num_parts.append(_render(f, 1))
        s = "*".join(num_parts) if num_parts else "1"
        if den_parts:
            d = "*".join(den_parts)
            if len(den_parts) > 1:
                d = f"({d})"
            elif any(c in d for c in "*/"):
                d = f"({d})"
            s = f"{s}/{d}"
        if neg:
            s = f"-{s}"
            return _paren(s, ctx >= 1)
        return _paren(s, ctx >= 2)
    # add
    parts = []
    for i, t in enumerate(e.terms):
        c, mono = _as_coeff_monomial(t)
        if i and c < 0:
            body = _mul_raw(-c, mono)
            parts.append(f" - {_render(body, 1)}")
        elif i:
            parts.append(f" + {_render(t, 1)}")
        else:
            parts.append(_render(t, 0))
    return _paren("".join(parts), ctx >= 1)
