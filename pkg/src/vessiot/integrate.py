"""Integration of Frobenius-integrable reductions through solvable
structures: integrating factors, the contraction dual coframe, iterated
univariate integration of exact forms, exactness-modulo reduction, invariant
chains and solution projection.

The univariate antiderivative rule set is closed and documented in
`antiderivative`: polynomials and rational powers, c/t, u-substitution against
inner subexpressions, quadratic denominators (arctan / arctanh via sign
probes), inverse square roots of quadratics, exp(a t + b), and integration by
parts (at most twice) for products with log / arctan / arctanh factors.
Anything else raises IntegrationRuleFailure naming the integrand.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .expr import (
    Chart, DEFAULT_POLICY, ExprError, Expression, IntegrationRuleFailure,
    ONE, Rat, RAT_M1, SingularEvaluationError, Sym, ZERO, ZeroTestPolicy, add,
    diff, evaluate, exp, free_symbols, func, is_identically_zero, log, mul,
    pow_, rat, ratsimp, sqrt, substitute, substitute_names, to_text,
)
from .forms import (
    DifferentialForm, Distribution, VectorField, d_coords, d_function,
    exterior_derivative, interior_product, sample_points, wedge, wedge_all,
)
from .jets import EVOLUTION, SECOND_ORDER_YY, PdeProblem
from .linalg import RowReduction, leaf_count, rat_neg, solve_in_span
from .reduction import ReductionCandidate


class NotClosedError(ExprError):
    pass


class ModReductionFailure(ExprError):
    pass


class ZeroContractionError(ExprError):
    pass


# ---------------------------------------------------------------------------
# integrating factors (single integrable 1-form)


@dataclass
class IntegratingFactor:
    mu: Expression
    form: DifferentialForm
    symmetry: VectorField
    verified: bool


def integrating_factor(theta: DifferentialForm, x: VectorField,
                       policy: ZeroTestPolicy = DEFAULT_POLICY) -> IntegratingFactor:
    """mu = 1/(X ⌟ theta); d(mu theta) = 0 is verified, not assumed."""
    contraction = ratsimp(interior_product(x, theta).coefficient())
    ex = theta.chart.excluded
    if is_identically_zero(contraction, policy=policy, excluded=ex):
        raise ZeroContractionError("X ⌟ theta vanishes; no integrating factor")
    mu = ratsimp(pow_(contraction, -1))
    scaled = theta.scaled(mu).simplified()
    verified = exterior_derivative(scaled).simplified().is_zero(policy, ex)
    return IntegratingFactor(mu, scaled, x, verified)


# ---------------------------------------------------------------------------
# dual coframe from a structure


def dual_coframe_from_structure(omega: DifferentialForm,
                                xs: Sequence[VectorField],
                                policy: ZeroTestPolicy = DEFAULT_POLICY):
    """sigma^i = contraction of omega by all X_j, j != i (innermost last);
    omega^i = sigma^i / (X_i ⌟ sigma^i).  Dual to the X's and annihilating
    ker omega by construction."""
    k = len(xs)
    if omega.degree != k:
        raise ExprError("structure size must match the form degree")
    ex = omega.chart.excluded
    out = []
    for i in range(k):
        sigma = omega
        for j in range(k - 1, -1, -1):
            if j == i:
                continue
            sigma = interior_product(xs[j], sigma)
        sigma = sigma.simplified()
        denom = ratsimp(interior_product(xs[i], sigma).coefficient())
        if is_identically_zero(denom, policy=policy, excluded=ex):
            raise ZeroContractionError(
                f"X_{i + 1} ⌟ sigma^{i + 1} vanishes; structure degenerate")
        out.append(sigma.scaled(pow_(denom, -1)).simplified())
    return out


# ---------------------------------------------------------------------------
# univariate antiderivatives


_SIGN_PROBE_POLICY = ZeroTestPolicy(samples=8)


def _sign_probe(e: Expression, names, policy: ZeroTestPolicy) -> int:
    """+1 / -1 when e keeps that sign over sampled points, else 0."""
    rng = random.Random(policy.seed ^ 0x516E)
    seen_pos = seen_neg = False
    for _ in range(24):
        assign = {n: Fraction(rng.randint(-12, 12), rng.randint(1, 4))
                  for n in names}
        try:
            v = evaluate(e, assign, policy.precision_bits)
        except SingularEvaluationError:
            continue
        if v > policy.tolerance:
            seen_pos = True
        elif v < -policy.tolerance:
            seen_neg = True
    if seen_pos and not seen_neg:
        return 1
    if seen_neg and not seen_pos:
        return -1
    return 0


def _subtrees(e: Expression, out: set):
    out.add(e)
    if e.kind == "func":
        _subtrees(e.arg, out)
    elif e.kind == "pow":
        _subtrees(e.base, out)
    elif e.kind == "mul":
        for f in e.factors:
            _subtrees(f, out)
    elif e.kind == "add":
        for t in e.terms:
            _subtrees(t, out)


def _replace_subtree(e: Expression, target: Expression, repl: Expression) -> Expression:
    if e == target:
        return repl
    if e.kind in ("rat", "sym"):
        return e
    if e.kind == "func":
        return func(e.name, _replace_subtree(e.arg, target, repl))
    if e.kind == "pow":
        return pow_(_replace_subtree(e.base, target, repl), e.exp)
    if e.kind == "mul":
        return mul(*[_replace_subtree(f, target, repl) for f in e.factors])
    return add(*[_replace_subtree(t, target, repl) for t in e.terms])


def _poly_in(e: Expression, z: str):
    """Coefficient dict {power: coeff} when e is polynomial in z, else None."""
    out = {}

    def absorb(term, power, coeff):
        out[power] = add(out.get(power, ZERO), coeff)

    terms = e.terms if e.kind == "add" else (e,)
    for t in terms:
        factors = t.factors if t.kind == "mul" else (t,)
        power = Fraction(0)
        coeff = []
        for f in factors:
            if f.kind == "sym" and f.name == z:
                power += 1
            elif f.kind == "pow" and f.base.kind == "sym" and f.base.name == z:
                if f.exp.denominator != 1 or f.exp < 0:
                    return None
                power += f.exp
            elif z in free_symbols(f):
                return None
            else:
                coeff.append(f)
        absorb(t, power, mul(*coeff) if coeff else ONE)
    return out


def _quadratic_in(e: Expression, z: str):
    p = _poly_in(e, z)
    if p is None:
        return None
    if any(k not in (0, 1, 2) for k in p):
        return None
    if p.get(2, ZERO) == ZERO:
        return None
    return p.get(2, ZERO), p.get(1, ZERO), p.get(0, ZERO)


def antiderivative(e: Expression, z: str,
                   policy: ZeroTestPolicy = DEFAULT_POLICY,
                   depth: int = 4) -> Expression:
    """Closed antiderivative of e with respect to z (other symbols constant).

    Raises IntegrationRuleFailure with the offending integrand when the
    expression leaves the supported class.
    """
    if depth <= 0:
        raise IntegrationRuleFailure(f"integration depth exhausted on {e} d{z}")
    e = ratsimp(e)
    if z not in free_symbols(e):
        return mul(e, Sym(z))
    if e.kind == "add":
        return add(*[antiderivative(t, z, policy, depth) for t in e.terms])
    # pull z-free factors out front
    if e.kind == "mul":
        const, rest = [], []
        for f in e.factors:
            (const if z not in free_symbols(f) else rest).append(f)
        if const:
            inner = antiderivative(mul(*rest), z, policy, depth)
            return mul(*(const + [inner]))
    zsym = Sym(z)
    if e == zsym:
        return mul(rat(1, 2), pow_(zsym, 2))
    if e.kind == "pow" and e.base == zsym:
        if e.exp == -1:
            return log(zsym)
        return mul(rat(Fraction(1) / (e.exp + 1)), pow_(zsym, e.exp + 1))
    result = _linear_argument_table(e, z)
    if result is None:
        result = _try_u_substitution(e, z, policy, depth)
    if result is None:
        result = _try_partial_fractions(e, z, policy)
    if result is None:
        result = _try_quadratic_rules(e, z, policy)
    if result is None:
        result = _try_power_denominator(e, z, policy)
    if result is None:
        result = _try_parts(e, z, policy, depth)
    if result is None:
        raise IntegrationRuleFailure(
            f"no antiderivative rule for ({to_text(e)}) d{z}")
    return result


def _linear_argument_table(e: Expression, z: str):
    """Direct rules for f(a z + b) with z-free a, b."""
    if e.kind != "func":
        return None
    w = e.arg
    a = diff(w, z)
    if a == ZERO or z in free_symbols(a):
        return None
    inv_a = pow_(a, -1)
    n = e.name
    if n == "exp":
        return mul(inv_a, e)
    if n == "sin":
        return mul(RAT_M1, inv_a, func("cos", w))
    if n == "cos":
        return mul(inv_a, func("sin", w))
    if n == "tan":
        return mul(RAT_M1, inv_a, log(func("cos", w)))
    if n == "tanh":
        # log(cosh) written through the available alphabet
        return mul(rat(-1, 2), inv_a, log(add(ONE, rat_neg(pow_(func("tanh", w), 2)))))
    if n == "log":
        return mul(inv_a, add(mul(w, e), rat_neg(w)))
    return None


def _try_u_substitution(e: Expression, z: str, policy, depth):
    """Detect e = g(w(z)) * w'(z) and integrate g."""
    cands: set = set()
    _subtrees(e, cands)
    zsym = Sym(z)
    good = []
    for w in cands:
        if w.kind in ("rat", "sym"):
            continue
        if z not in free_symbols(w):
            continue
        good.append(w)
        if w.kind == "func" or w.kind == "pow":
            if z in free_symbols(w.arg if w.kind == "func" else w.base):
                good.append(w.arg if w.kind == "func" else w.base)
    good = [w for w in set(good) if w != zsym]
    good.sort(key=lambda w: -leaf_count(w))
    t = Sym("_t_sub")
    for w in good:
        dw = diff(w, z)
        if dw == ZERO:
            continue
        try:
            q = ratsimp(mul(e, pow_(dw, -1)))
        except SingularEvaluationError:
            continue
        g = _replace_subtree(q, w, t)
        if z in free_symbols(g):
            continue
        try:
            inner = antiderivative(g, "_t_sub", policy, depth - 1)
        except IntegrationRuleFailure:
            continue
        return substitute_names(inner, {"_t_sub": w})
    return None


def _try_quadratic_rules(e: Expression, z: str, policy):
    """1/(quadratic) and 1/sqrt(quadratic) patterns with sign probes."""
    zsym = Sym(z)
    # normalize: e should be q^(-1) or q^(-1/2) (times nothing, z-free factors
    # were already pulled off)
    if e.kind != "pow" or e.exp not in (Fraction(-1), Fraction(-1, 2)):
        return None
    quad = _quadratic_in(e.base, z)
    if quad is None:
        return None
    a2, a1, a0 = quad
    names = free_symbols(e)
    # complete the square: base = a2*(t^2 + d), t = z + a1/(2 a2)
    t = add(zsym, ratsimp(mul(a1, pow_(mul(rat(2), a2), -1))))
    d = ratsimp(add(mul(a0, pow_(a2, -1)),
                    rat_neg(mul(a1, a1, pow_(mul(rat(4), a2, a2), -1)))))
    sign_a = _sign_probe(a2, names, policy)
    if e.exp == Fraction(-1):
        sign_d = _sign_probe(d, names, policy)
        if sign_d > 0:
            rd = sqrt(d)
            out = mul(pow_(mul(a2, rd), -1), func("arctan", mul(t, pow_(rd, -1))))
            return out
        if sign_d < 0:
            rd = sqrt(rat_neg(d))
            out = mul(rat(-1), pow_(mul(a2, rd), -1),
                      func("arctanh", mul(t, pow_(rd, -1))))
            return out
        return None
    # inverse square root
    if sign_a > 0:
        # 1/sqrt(a2)*(t^2+d)^(-1/2): arctanh(t / sqrt(t^2+d)) works for any d
        inner = sqrt(add(pow_(t, 2), d))
        return mul(pow_(sqrt(a2), -1),
                   func("arctanh", mul(t, pow_(inner, -1))))
    if sign_a < 0:
        # base = (-a2)*(E - t^2), E = -d: arctan(t / sqrt(E - t^2))
        ecap = rat_neg(d)
        inner = sqrt(add(ecap, rat_neg(pow_(t, 2))))
        return mul(pow_(sqrt(rat_neg(a2)), -1),
                   func("arctan", mul(t, pow_(inner, -1))))
    return None


def _try_power_denominator(e: Expression, z: str, policy):
    """Rational integrands num(z) / D(z)^k where D is a (possibly expanded)
    perfect power of a polynomial linear in z; integrates through the q-adic
    expansion of the numerator."""
    factors = e.factors if e.kind == "mul" else (e,)
    den_base = None
    den_pow = 0
    num_parts = []
    for f in factors:
        if f.kind == "pow" and f.exp.denominator == 1 and f.exp < 0 \
                and z in free_symbols(f.base):
            if den_base is not None:
                return None
            den_base, den_pow = f.base, -int(f.exp)
        else:
            num_parts.append(f)
    if den_base is None:
        return None
    dpoly = _poly_in(den_base, z)
    if dpoly is None:
        return None
    deg = max(dpoly)
    if deg < 1:
        return None
    # linear root q = a z + b with D = q^deg
    lead = dpoly.get(deg, ZERO)
    try:
        a = pow_(lead, Fraction(1, int(deg)))
    except SingularEvaluationError:
        return None
    b = ratsimp(mul(dpoly.get(deg - 1, ZERO),
                    pow_(mul(rat(deg), pow_(a, int(deg) - 1)), -1))) \
        if deg > 1 else dpoly.get(0, ZERO)
    q = add(mul(a, Sym(z)), b)
    if deg > 1:
        check = ratsimp(add(den_base, rat_neg(pow_(q, int(deg)))))
        if not is_identically_zero(check, policy=_SIGN_PROBE_POLICY):
            return None
    npoly = _poly_in(ratsimp(mul(*num_parts)) if num_parts else ONE, z)
    if npoly is None:
        return None
    if any(k != int(k) for k in npoly):
        return None
    # q-adic expansion of the numerator: num = sum a_j q^j, a_j z-free
    coeffs = {int(k): v for k, v in npoly.items()}
    expansion = {}
    j = 0
    guard = 0
    while coeffs and guard < 50:
        guard += 1
        nd = max(coeffs)
        if nd == 0:
            expansion[j] = ratsimp(coeffs.get(0, ZERO))
            break
        # divide by q once: num = q * s + r
        s = {}
        cur = dict(coeffs)
        for p in range(nd, 0, -1):
            c = cur.get(p, ZERO)
            if c == ZERO:
                continue
            sc = ratsimp(mul(c, pow_(a, -1)))
            s[p - 1] = add(s.get(p - 1, ZERO), sc)
            cur[p] = ZERO
            cur[p - 1] = add(cur.get(p - 1, ZERO), rat_neg(mul(sc, b)))
        expansion[j] = ratsimp(cur.get(0, ZERO))
        coeffs = {k: v for k, v in s.items() if ratsimp(v) != ZERO}
        j += 1
    total_pow = deg * den_pow
    out = []
    for j, aj in expansion.items():
        if aj == ZERO:
            continue
        p = j - total_pow
        if p == -1:
            out.append(mul(aj, pow_(a, -1), log(q)))
        else:
            out.append(mul(aj, pow_(mul(rat(p + 1), a), -1), pow_(q, p + 1)))
    return add(*out) if out else ZERO


_PARTS_FUNCS = ("log", "arctan", "arctanh")


def _try_parts(e: Expression, z: str, policy, depth):
    """Integration by parts against a single log/arctan/arctanh factor."""
    factors = e.factors if e.kind == "mul" else (e,)
    pivots = [f for f in factors
              if (f.kind == "func" and f.name in _PARTS_FUNCS) or
                 (f.kind == "pow" and f.base.kind == "func"
                  and f.base.name in _PARTS_FUNCS and f.exp.denominator == 1
                  and f.exp > 0)]
    if not pivots:
        return None
    g = pivots[0]
    rest = mul(*[f for f in factors if f is not g]) if len(factors) > 1 else ONE
    try:
        big_p = antiderivative(rest, z, policy, depth - 1)
        dg = diff(g, z)
        tail = antiderivative(ratsimp(mul(big_p, dg)), z, policy, depth - 1)
    except IntegrationRuleFailure:
        return None
    return add(mul(big_p, g), rat_neg(tail))


# ---------------------------------------------------------------------------
# exact and exact-modulo integration


def _component(form: DifferentialForm, i: int) -> Expression:
    return form.comps.get((i,), ZERO)


def integrate_exact(omega: DifferentialForm,
                    policy: ZeroTestPolicy = DEFAULT_POLICY,
                    check_closed: bool = True,
                    orders: Optional[Sequence[Sequence[int]]] = None) -> Expression:
    """gamma with d(gamma) = omega by iterated univariate integration.

    Follows the recursion sigma_i = integral of (omega_i - d(sum of earlier
    sigmas)/dz_i); retries a few coordinate orders before giving up.
    """
    chart = omega.chart
    nb = chart.n_base
    if omega.degree != 1:
        raise ExprError("integrate_exact expects a 1-form")
    if check_closed and not exterior_derivative(omega).simplified().is_zero(
            policy, chart.excluded):
        raise NotClosedError("form is not closed")
    if orders is None:
        default = list(range(nb))
        by_size = sorted(default, key=lambda i: leaf_count(_component(omega, i)))
        orders = [default, list(reversed(default)), by_size]
    last_err: Optional[Exception] = None
    for order in orders:
        try:
            gamma = ZERO
            for i in order:
                name = chart.names[i]
                integrand = ratsimp(add(_component(omega, i),
                                        rat_neg(diff(gamma, name))))
                if integrand == ZERO:
                    continue
                gamma = add(gamma, antiderivative(integrand, name, policy))
            resid = (d_function(chart, gamma) - omega).simplified()
            if not resid.is_zero(policy, chart.excluded):
                raise NotClosedError(
                    "recovered primitive does not differentiate back")
            return ratsimp(gamma)
        except (IntegrationRuleFailure, NotClosedError,
                SingularEvaluationError) as err:
            last_err = err
    raise last_err if last_err is not None else \
        IntegrationRuleFailure("no coordinate order integrated")


@dataclass
class _Adapted:
    """Adapted-coframe split of a form against prior exact differentials."""

    pivots: list            # pivot coordinate index per prior
    comp_idx: list          # complement coordinate indices
    subs: dict              # pivot index -> (dgamma coeffs, complement coeffs)


def _adapt(priors_d: Sequence[DifferentialForm], chart: Chart,
           excluded) -> _Adapted:
    nb = chart.n_base
    j = len(priors_d)
    g = [[_component(f, i) for i in range(nb)] for f in priors_d]
    red = RowReduction(g, excluded=excluded)
    if red.rank < j:
        raise ModReductionFailure("prior differentials are dependent")
    pivots = [c for _, c in red.pivots]
    comp_idx = [i for i in range(nb) if i not in pivots]
    # solve G_P * X = I for the pivot block
    gp = [[g[l][p] for p in pivots] for l in range(j)]
    eye = [[ONE if a == b else ZERO for b in range(j)] for a in range(j)]
    red2 = RowReduction(gp, eye, excluded=excluded)
    inv = []
    for col in range(j):
        sol = red2.solve_column(col)
        if sol is None:
            raise ModReductionFailure("pivot block is singular")
        inv.append(sol)  # inv[col][row]: X[:, col]
    subs = {}
    for pi, p in enumerate(pivots):
        dg_coeffs = [inv[m][pi] for m in range(j)]
        comp_coeffs = {}
        for i in comp_idx:
            acc = ZERO
            for m in range(j):
                acc = add(acc, mul(rat_neg(inv[m][pi]), g[m][i]))
            acc = ratsimp(acc)
            if acc != ZERO:
                comp_coeffs[i] = acc
        subs[p] = (dg_coeffs, comp_coeffs)
    return _Adapted(pivots, comp_idx, subs)


def _strip_oneform(omega: DifferentialForm, ad: _Adapted,
                   priors_d: Sequence[DifferentialForm]):
    """omega = sum A_l dgamma_l + omega_perp; returns (A list, omega_perp)."""
    chart = omega.chart
    j = len(priors_d)
    a_coeffs = [ZERO] * j
    perp: dict = {}
    for (i,), c in omega.comps.items():
        if i in ad.subs:
            dg, compc = ad.subs[i]
            for m in range(j):
                a_coeffs[m] = add(a_coeffs[m], mul(c, dg[m]))
            for ci, cc in compc.items():
                perp[(ci,)] = add(perp.get((ci,), ZERO), mul(c, cc))
        else:
            perp[(i,)] = add(perp.get((i,), ZERO), c)
    a_coeffs = [ratsimp(a) for a in a_coeffs]
    return a_coeffs, DifferentialForm(chart, 1, perp, simplify=True)


def _eta_decomposition(w2: DifferentialForm, ad: _Adapted,
                       priors_d: Sequence[DifferentialForm],
                       policy: ZeroTestPolicy):
    """Express the 2-form w2 as sum eta_l ∧ dgamma_l; the complement-pair part
    must vanish (else the form is not exact modulo the priors)."""
    chart = w2.chart
    j = len(priors_d)
    # rewrite in the adapted basis by substituting pivot differentials
    # comp keys: ('c', i) complement, ('g', m) prior
    acc: dict = {}

    def add_pair(ka, kb, c):
        if ka == kb:
            return
        sign = 1
        if (ka[0], ka[1]) > (kb[0], kb[1]):
            ka, kb = kb, ka
            sign = -1
        key = (ka, kb)
        acc[key] = add(acc.get(key, ZERO), mul(rat(sign), c))

    def basis_of(i):
        if i in ad.subs:
            dg, compc = ad.subs[i]
            out = [(("g", m), dg[m]) for m in range(j) if dg[m] != ZERO]
            out += [(("c", ci), cc) for ci, cc in compc.items()]
            return out
        return [(("c", i), ONE)]

    for (i1, i2), c in w2.comps.items():
        for ka, ca in basis_of(i1):
            for kb, cb in basis_of(i2):
                add_pair(ka, kb, mul(c, ca, cb))
    etas = [dict() for _ in range(j)]
    for (ka, kb), c in acc.items():
        c = ratsimp(c)
        if c == ZERO:
            continue
        if ka[0] == "c" and kb[0] == "c":
            if not is_identically_zero(c, policy=policy,
                                       excluded=chart.excluded):
                raise ModReductionFailure(
                    "form is not exact modulo the prior invariants")
            continue
        if ka[0] == "c" and kb[0] == "g":
            # c * dz_i ∧ dgamma_m -> eta_m gains +c dz_i
            etas[kb[1]][("c", ka[1])] = add(
                etas[kb[1]].get(("c", ka[1]), ZERO), c)
        elif ka[0] == "g" and kb[0] == "g":
            # c * dgamma_a ∧ dgamma_b -> eta_a gains -c dgamma_b
            etas[ka[1]][("g", kb[1])] = add(
                etas[ka[1]].get(("g", kb[1]), ZERO), rat_neg(c))
        else:  # ("g", m) then ("c", i): ordered keys make this unreachable
            etas[ka[1]][("c", kb[1])] = add(
                etas[ka[1]].get(("c", kb[1]), ZERO), rat_neg(c))
    out = []
    for m in range(j):
        form: dict = {}
        for key, c in etas[m].items():
            c = ratsimp(c)
            if c == ZERO:
                continue
            if key[0] == "c":
                form[(key[1],)] = add(form.get((key[1],), ZERO), c)
        real = DifferentialForm(chart, 1, form)
        for key, c in etas[m].items():
            if key[0] == "g" and ratsimp(c) != ZERO:
                real = real + priors_d[key[1]].scaled(ratsimp(c))
        out.append(real.simplified())
    return out


def _solve_exp_factor(omega: DifferentialForm, domega: DifferentialForm,
                      priors: Sequence, policy: ZeroTestPolicy):
    """Find rational constants k_l with d(omega) = sum k_l omega ∧ dgamma_l."""
    chart = omega.chart
    wedges = [wedge(omega, d).simplified() for _, d in priors]
    keys = sorted(set(domega.comps) |
                  set().union(*[set(w.comps) for w in wedges]) if wedges else set())
    if not keys:
        return None
    rng = random.Random(policy.seed ^ 0xFAC7)
    rows, rhs = [], []
    names = set(chart.names)
    for f in [domega] + wedges:
        for c in f.comps.values():
            names |= free_symbols(c)
    names = sorted(names)
    attempts = 0
    while len(rows) < 4 * max(len(priors), 1) and attempts < 200:
        attempts += 1
        assign = {n: Fraction(rng.randint(-18, 18), rng.randint(1, 5))
                  for n in names}
        try:
            ok = True
            for pred in chart.excluded:
                if abs(evaluate(pred, assign, policy.precision_bits)) <= policy.tolerance:
                    ok = False
                    break
            if not ok:
                continue
            for key in keys:
                row = [float(evaluate(w.comps.get(key, ZERO), assign,
                                      policy.precision_bits)) for w in wedges]
                b = float(evaluate(domega.comps.get(key, ZERO), assign,
                                   policy.precision_bits))
                rows.append(row)
                rhs.append(b)
        except SingularEvaluationError:
            continue
    if not rows:
        return None
    a = np.array(rows)
    b = np.array(rhs)
    sol, res, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    ks = [Fraction(float(v)).limit_denominator(12) for v in sol]
    if all(k == 0 for k in ks):
        return None
    resid = domega
    for k, w in zip(ks, wedges):
        resid = resid - w.scaled(rat(k))
    if not resid.simplified().is_zero(policy, chart.excluded):
        return None
    return ks


def _leaf_parametrization(omega_perp: DifferentialForm, priors: Sequence,
                          ad: "_Adapted", policy: ZeroTestPolicy):
    """Integrate on the level sets of the priors by solving them for the
    pivot coordinates, integrating the restricted form over the complement
    coordinates with the level labels as symbolic constants, and substituting
    the invariants back for the labels."""
    chart = omega_perp.chart
    consts = [f"_C{l + 1}" for l in range(len(priors))]
    subs: dict = {}
    unsolved = list(range(len(priors)))
    pivots_left = [chart.names[p] for p in ad.pivots]
    for _ in range(len(priors)):
        hit = None
        for l in unsolved:
            eq = ratsimp(substitute_names(
                add(priors[l][0], rat_neg(Sym(consts[l]))), subs))
            for pname in pivots_left:
                if pname not in free_symbols(eq):
                    continue
                try:
                    val = _solve_for(eq, pname)
                except (SolveForError, SingularEvaluationError, ExprError):
                    continue
                hit = (l, pname, val)
                break
            if hit:
                break
        if hit is None:
            return None
        l, pname, val = hit
        subs = {k: ratsimp(substitute_names(v, {pname: val}))
                for k, v in subs.items()}
        subs[pname] = ratsimp(val)
        unsolved.remove(l)
        pivots_left.remove(pname)
    comp_names = [chart.names[i] for i in ad.comp_idx]
    leaf_chart = Chart(comp_names + consts, excluded=[
        substitute_names(p, subs) for p in chart.excluded],
        n_base=len(comp_names))
    comps = {}
    for (i,), c in omega_perp.comps.items():
        c2 = ratsimp(substitute_names(c, subs))
        if c2 != ZERO:
            comps[(leaf_chart.index(chart.names[i]),)] = c2
    w_leaf = DifferentialForm(leaf_chart, 1, comps)
    try:
        gamma_leaf = integrate_exact(w_leaf, policy)
    except (IntegrationRuleFailure, NotClosedError):
        return None
    back = {consts[l]: priors[l][0] for l in range(len(priors))}
    return ratsimp(substitute_names(gamma_leaf, back))


def integrate_modulo(omega: DifferentialForm, priors: Sequence,
                     policy: ZeroTestPolicy = DEFAULT_POLICY,
                     depth: int = 3) -> Expression:
    """gamma with omega - d(gamma) in the function span of the prior exact
    differentials.

    priors: list of (gamma_expression, dgamma_form) pairs.  Moves, verified at
    each step: try exact integration directly; multiply by an integrating
    factor exp(sum k_l gamma_l) when d(omega) = sum k_l omega ∧ dgamma_l has a
    rational solution; strip the prior components in an adapted coframe; and
    solve d(omega) = sum eta_l ∧ dgamma_l, recursively integrating the eta's
    into additive corrections.
    """
    chart = omega.chart
    if not priors:
        return integrate_exact(omega, policy)
    if depth <= 0:
        raise ModReductionFailure("mod-reduction depth exhausted")
    priors_d = [d for _, d in priors]

    def finish(gamma, mu_log, verify=True):
        if mu_log != ZERO:
            gamma = ratsimp(mul(exp(rat_neg(mu_log)), gamma))
        if verify and not _mod_residual_ok(omega, gamma, priors_d, policy):
            return None
        return gamma

    dcur = exterior_derivative(omega).simplified()
    if dcur.is_zero(policy, chart.excluded):
        out = finish(integrate_exact(omega, policy, check_closed=False), ZERO)
        if out is not None:
            return out
    ad = _adapt(priors_d, chart, chart.excluded)
    _, perp = _strip_oneform(omega, ad, priors_d)
    dperp = exterior_derivative(perp).simplified()
    if dperp.is_zero(policy, chart.excluded):
        try:
            out = finish(integrate_exact(perp, policy, check_closed=False), ZERO)
            if out is not None:
                return out
        except IntegrationRuleFailure:
            pass
    # primary move: integrate directly on the prior level sets
    try:
        gamma = _leaf_parametrization(perp, priors, ad, policy)
    except (SingularEvaluationError, ExprError):
        gamma = None
    if gamma is not None:
        out = finish(gamma, ZERO)
        if out is not None:
            return out
    # fallback: exponential integrating factor, then additive corrections
    mu_log = ZERO
    current = perp
    for _ in range(3):
        dcur = exterior_derivative(current).simplified()
        if dcur.is_zero(policy, chart.excluded):
            try:
                out = finish(integrate_exact(current, policy,
                                             check_closed=False), mu_log)
                if out is not None:
                    return out
            except IntegrationRuleFailure:
                break
        ks = _solve_exp_factor(current, dcur, priors, policy)
        if ks is None and mu_log == ZERO and current is not omega:
            dfull = exterior_derivative(omega).simplified()
            ks_full = _solve_exp_factor(omega, dfull, priors, policy)
            if ks_full is not None:
                ks = ks_full
                current = omega
        if ks is not None:
            log_terms = [mul(rat(k), g) for k, (g, _) in zip(ks, priors)
                         if k != 0]
            mu_log = add(mu_log, *log_terms)
            current = current.scaled(exp(add(*log_terms))).simplified()
            continue
        try:
            etas = _eta_decomposition(dcur, ad, priors_d, policy)
        except ModReductionFailure:
            break
        corrected = current
        progress = False
        for m, eta in enumerate(etas):
            if eta.is_zero_structurally():
                continue
            c_m = integrate_modulo(eta, priors, policy, depth - 1)
            corrected = corrected - priors_d[m].scaled(c_m)
            progress = True
        if not progress:
            break
        current = corrected.simplified()
    raise ModReductionFailure(
        "could not reduce the form to an exact representative")


def _mod_residual_ok(omega: DifferentialForm, gamma: Expression,
                     priors_d: Sequence[DifferentialForm],
                     policy: ZeroTestPolicy) -> bool:
    """(omega - d gamma) must wedge-annihilate against the prior
    differentials (the testable content of exactness modulo)."""
    chart = omega.chart
    resid = (omega - d_function(chart, gamma)).simplified()
    if resid.is_zero_structurally():
        return True
    check = wedge_all([resid] + list(priors_d)).simplified()
    return check.is_zero(policy, chart.excluded)


# ---------------------------------------------------------------------------
# invariant chains


@dataclass
class ChainLevel:
    index: int                    # paper-style index (matches X_i)
    invariant: Expression
    dual_form: DifferentialForm
    annihilation_checked: int = 0
    verified: bool = False


@dataclass
class InvariantChain:
    """Ordered invariants gamma^1..gamma^k paired with the structure fields
    that produced them (gamma^k integrates first; each gamma^i is exact modulo
    the later ones)."""

    problem: PdeProblem
    candidate: ReductionCandidate
    structure: list
    levels: list                  # ChainLevel, index 1..k
    omega_bar: DifferentialForm

    @property
    def invariants(self) -> list:
        return [l.invariant for l in self.levels]

    def dgammas(self) -> list:
        ch = self.candidate.chart
        return [d_function(ch, l.invariant).simplified() for l in self.levels]


def chain_integrate(candidate: ReductionCandidate,
                    structure: Sequence[VectorField],
                    policy: ZeroTestPolicy = DEFAULT_POLICY,
                    annihilation_points: int = 100) -> InvariantChain:
    """Integrate the reduced distribution through the solvable structure.

    Produces one invariant per structure field, integrating from the last
    field backwards; each level is exact modulo the previously found
    invariants and every invariant is verified to be annihilated by both
    reduced generators.
    """
    omega_bar = candidate.omega_bar().simplified()
    duals = dual_coframe_from_structure(omega_bar, structure, policy)
    k = len(structure)
    levels: list = [None] * k
    priors: list = []
    for i in range(k - 1, -1, -1):
        gamma = integrate_modulo(duals[i], priors, policy)
        gamma = ratsimp(gamma)
        priors.append((gamma, d_function(candidate.chart, gamma).simplified()))
        levels[i] = ChainLevel(i + 1, gamma, duals[i])
    chain = InvariantChain(candidate.problem, candidate, list(structure),
                           levels, omega_bar)
    verify_chain(chain, policy, annihilation_points)
    return chain


def verify_chain(chain: InvariantChain,
                 policy: ZeroTestPolicy = DEFAULT_POLICY,
                 annihilation_points: int = 100) -> bool:
    """Annihilation by both reduced generators at many points plus functional
    independence of the full invariant list."""
    cand = chain.candidate
    chart = cand.chart
    strong = ZeroTestPolicy(samples=annihilation_points,
                            tolerance=policy.tolerance,
                            precision_bits=policy.precision_bits,
                            seed=policy.seed)
    ok = True
    for level in chain.levels:
        passed = True
        for vb in (cand.vbar1, cand.vbar2):
            val = ratsimp(vb(level.invariant))
            if not is_identically_zero(val, policy=strong,
                                       excluded=chart.excluded):
                passed = False
        level.annihilation_checked = annihilation_points
        level.verified = passed
        ok = ok and passed
    top = wedge_all(chain.dgammas() + d_coords(chart, "x", "y"))
    if top.simplified().is_zero(policy, chart.excluded):
        ok = False
    return ok


def matches_up_to_earlier(chain: InvariantChain, index: int,
                          printed: Expression,
                          policy: ZeroTestPolicy = DEFAULT_POLICY) -> bool:
    """Wedge-equivalence with the printed invariant: d(gamma -/+ printed)
    wedged against the differentials of the later-integrated invariants
    vanishes (a sign flip counts as a match)."""
    chart = chain.candidate.chart
    level = chain.levels[index - 1]
    earlier = [d_function(chart, l.invariant).simplified()
               for l in chain.levels[index:]]
    for cand in (add(level.invariant, rat_neg(printed)),
                 add(level.invariant, printed)):
        resid = d_function(chart, cand).simplified()
        if earlier:
            resid = wedge_all([resid] + earlier).simplified()
        if resid.is_zero(policy, chart.excluded):
            return True
    return False


def is_invariant_function(chain: InvariantChain, f: Expression,
                          policy: ZeroTestPolicy = DEFAULT_POLICY) -> bool:
    """Is f a function of the chain invariants (df in their span)?"""
    chart = chain.candidate.chart
    resid = wedge_all([d_function(chart, f)] + chain.dgammas()).simplified()
    return resid.is_zero(policy, chart.excluded)


# ---------------------------------------------------------------------------
# projection to explicit solutions


@dataclass
class ProjectedSolution:
    problem: PdeProblem
    explicit: Optional[Expression]       # u(x, y, c_1..c_k) when solvable
    constants: list
    level_sets: list                     # [(gamma_i, c_i)] implicit form
    eliminated: dict


class SolveForError(ExprError):
    pass


def _solve_for(eq: Expression, target: str) -> Expression:
    """Solve eq = 0 for target: linear isolation plus invertible wrappers."""
    zsym = Sym(target)
    a = ratsimp(diff(eq, target))
    if a != ZERO and target not in free_symbols(a):
        b = ratsimp(substitute_names(eq, {target: ZERO}))
        return ratsimp(mul(rat_neg(b), pow_(a, -1)))
    # single wrapped occurrence: A*g(w) + B = 0 with target only inside g
    nodes: set = set()
    _subtrees(eq, nodes)
    wrappers = [n for n in nodes
                if n.kind == "func" and target in free_symbols(n.arg)]
    for g in wrappers:
        t = Sym("_w_solve")
        outer = _replace_subtree(eq, g, t)
        if target in free_symbols(outer):
            continue
        val = _solve_for(outer, "_w_solve")
        inverse = {"log": "exp", "exp": "log", "tanh": "arctanh",
                   "arctanh": "tanh", "tan": "arctan", "arctan": "tan",
                   "sin": None, "cos": None}[g.name]
        if inverse is None:
            raise SolveForError(f"cannot invert {g.name}")
        return _solve_for(add(g.arg, rat_neg(func(inverse, val))), target)
    # wrapped power: A*w^e + B with target inside w, e fractional or negative
    powers = [n for n in nodes
              if n.kind == "pow" and target in free_symbols(n.base)
              and (n.exp.denominator != 1 or n.exp < 0)]
    for pw in powers:
        t = Sym("_w_solve")
        outer = _replace_subtree(eq, pw, t)
        if target in free_symbols(outer):
            continue
        val = _solve_for(outer, "_w_solve")
        return _solve_for(add(pw.base, rat_neg(pow_(val, Fraction(1) / pw.exp))),
                          target)
    raise SolveForError(f"cannot isolate {target} in {to_text(eq)}")


def project_solution(chain: InvariantChain,
                     constant_names: Optional[Sequence[str]] = None,
                     policy: ZeroTestPolicy = DEFAULT_POLICY) -> ProjectedSolution:
    """Eliminate the fiber coordinates from {gamma_i = c_i} by greedy
    back-substitution; falls back to the implicit level-set description."""
    p = chain.problem
    k = len(chain.levels)
    names = list(constant_names) if constant_names else \
        [f"c{i + 1}" for i in range(k)]
    consts = [Sym(n) for n in names]
    eqs = {i: ratsimp(add(chain.levels[i].invariant, rat_neg(consts[i])))
           for i in range(k)}
    targets = [n for n in p.fiber_names if n != "u"][::-1] + ["u"]
    # highest-order fiber coordinates first, u last
    order_pref = {n: i for i, n in enumerate(targets)}
    solved: dict = {}
    remaining = dict(eqs)
    todo = [n for n in p.fiber_names]
    progress = True
    while todo and progress and remaining:
        progress = False
        # prefer equations isolating a target with no other unsolved fiber
        # coordinates; fall back to solving in terms of them (resolved below)
        for strictness in (0, 1):
            hit = None
            for target in sorted(todo, key=lambda n: order_pref.get(n, 99)):
                for i, eq in sorted(remaining.items()):
                    cur = ratsimp(substitute_names(eq, solved))
                    if target not in free_symbols(cur):
                        continue
                    others = (free_symbols(cur) & set(todo)) - {target}
                    if strictness == 0 and others:
                        continue
                    try:
                        val = _solve_for(cur, target)
                    except (SolveForError, SingularEvaluationError, ExprError):
                        continue
                    hit = (i, target, val)
                    break
                if hit:
                    break
            if hit:
                break
        if hit:
            i, target, val = hit
            solved[target] = ratsimp(val)
            del remaining[i]
            todo.remove(target)
            progress = True
    # back-substitute until the values close over (x, y, constants)
    fiber = set(p.fiber_names)
    for _ in range(len(solved) + 1):
        changed = False
        for name in list(solved):
            cur = solved[name]
            dangling = free_symbols(cur) & fiber
            if dangling & set(solved):
                table = {d: solved[d] for d in dangling if d in solved}
                nxt = ratsimp(substitute_names(cur, table))
                if nxt != cur:
                    solved[name] = nxt
                    changed = True
        if not changed:
            break
    level_sets = [(chain.levels[i].invariant, names[i]) for i in range(k)]
    if "u" in solved and not (free_symbols(solved["u"]) & fiber):
        return ProjectedSolution(p, solved["u"], names, level_sets, solved)
    return ProjectedSolution(p, None, names, level_sets, solved)


def verify_solution(p: PdeProblem, u_expr: Expression,
                    constant_names: Sequence[str] = (),
                    policy: ZeroTestPolicy = DEFAULT_POLICY) -> bool:
    """Substitute an explicit u(x, y; c) into the PDE and zero-test the
    residual over the independent variables and constants."""
    names = ["x", "y"] + [n for n in constant_names]
    extra = free_symbols(u_expr) - set(names)
    names += sorted(extra)
    chart = Chart(names)
    u = u_expr
    u_x = diff(u, "x")
    u_y = diff(u, "y")
    u_xx = diff(u_x, "x")
    u_xy = diff(u_x, "y")
    u_yy = diff(u_y, "y")
    subs = {"u": u, "u_x": u_x, "u_y": u_y, "u_xx": u_xx, "u_xy": u_xy,
            "u_yy": u_yy}
    if p.kind == SECOND_ORDER_YY:
        resid = add(u_yy, rat_neg(substitute_names(p.F, subs)))
    else:
        resid = add(u_x, rat_neg(substitute_names(p.F, subs)))
    return is_identically_zero(ratsimp(resid), policy=policy,
                               excluded=p.chart.excluded)
