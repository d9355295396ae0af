"""Sparse multivariate polynomial arithmetic over named variables.

Polynomials store a map from exponent tuples to float coefficients and are
canonical (no zero terms) and immutable after construction.  They carry the
output-space functions of the toolkit: safe/target level sets, basis
monomials, and the synthesized feedback terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


def _canonical(terms: dict[tuple[int, ...], float], nvars: int) -> dict[tuple[int, ...], float]:
    out: dict[tuple[int, ...], float] = {}
    for exps, coef in terms.items():
        exps = tuple(int(e) for e in exps)
        if len(exps) != nvars:
            raise ValueError(f"exponent vector {exps} has length {len(exps)}, expected {nvars}")
        if any(e < 0 for e in exps):
            raise ValueError(f"negative exponent in {exps}")
        c = out.get(exps, 0.0) + float(coef)
        if c != 0.0:
            out[exps] = c
        elif exps in out:
            del out[exps]
    return out


def _grlex_key(exps: tuple[int, ...]) -> tuple:
    # graded lexicographic: total degree first, then lex on the exponent vector
    return (sum(exps), tuple(-e for e in exps))


@dataclass(frozen=True)
class Polynomial:
    """Sparse polynomial sum_alpha c_alpha * y^alpha over an ordered variable list."""

    variables: tuple[str, ...]
    terms: dict[tuple[int, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "terms", _canonical(self.terms, len(self.variables)))

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zero(variables) -> "Polynomial":
        return Polynomial(tuple(variables), {})

    @staticmethod
    def constant(variables, c: float) -> "Polynomial":
        v = tuple(variables)
        return Polynomial(v, {tuple(0 for _ in v): float(c)})

    @staticmethod
    def var(variables, name: str) -> "Polynomial":
        v = tuple(variables)
        if name not in v:
            raise KeyError(f"unknown variable {name!r}")
        e = tuple(1 if w == name else 0 for w in v)
        return Polynomial(v, {e: 1.0})

    @staticmethod
    def monomial(variables, exps, coef: float = 1.0) -> "Polynomial":
        return Polynomial(tuple(variables), {tuple(exps): float(coef)})

    # -- evaluation and calculus ----------------------------------------------

    def eval(self, y) -> float:
        if len(y) != len(self.variables):
            raise ValueError(f"point has dimension {len(y)}, polynomial has {len(self.variables)} variables")
        total = 0.0
        for exps, coef in self.terms.items():
            v = coef
            for yi, e in zip(y, exps):
                if e:
                    v *= yi ** e
            total += v
        return total

    def partial(self, var: str) -> "Polynomial":
        if var not in self.variables:
            raise KeyError(f"unknown variable {var!r}")
        i = self.variables.index(var)
        out: dict[tuple[int, ...], float] = {}
        for exps, coef in self.terms.items():
            e = exps[i]
            if e == 0:
                continue
            d = list(exps)
            d[i] = e - 1
            key = tuple(d)
            out[key] = out.get(key, 0.0) + coef * e
        return Polynomial(self.variables, out)

    def gradient(self) -> list["Polynomial"]:
        return [self.partial(v) for v in self.variables]

    def grad_eval(self, y):
        import numpy as np

        return np.array([self.partial(v).eval(y) for v in self.variables])

    # -- ring arithmetic --------------------------------------------------------

    def _aligned(self, other: "Polynomial") -> "Polynomial":
        if other.variables == self.variables:
            return other
        if set(other.variables) - set(self.variables):
            raise ValueError(f"cannot align variables {other.variables} into {self.variables}")
        idx = [other.variables.index(v) if v in other.variables else None for v in self.variables]
        terms: dict[tuple[int, ...], float] = {}
        for exps, coef in other.terms.items():
            new = tuple(exps[j] if j is not None else 0 for j in idx)
            terms[new] = terms.get(new, 0.0) + coef
        return Polynomial(self.variables, terms)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.variables, other)
        other = self._aligned(other)
        terms = dict(self.terms)
        for exps, coef in other.terms.items():
            terms[exps] = terms.get(exps, 0.0) + coef
        return Polynomial(self.variables, terms)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.variables, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.variables, other)
        return self + (-self._aligned(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Polynomial(self.variables, {e: c * other for e, c in self.terms.items()})
        other = self._aligned(other)
        terms: dict[tuple[int, ...], float] = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                key = tuple(a + b for a, b in zip(e1, e2))
                terms[key] = terms.get(key, 0.0) + c1 * c2
        return Polynomial(self.variables, terms)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        if n < 0 or n != int(n):
            raise ValueError("only non-negative integer powers")
        out = Polynomial.constant(self.variables, 1.0)
        for _ in range(int(n)):
            out = out * self
        return out

    def __eq__(self, other):
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self.variables == other.variables and self.terms == other.terms

    def __hash__(self):
        return hash((self.variables, frozenset(self.terms.items())))

    # -- introspection ----------------------------------------------------------

    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(e) for e in self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def __repr__(self):
        if not self.terms:
            return "0"
        parts = []
        for exps in sorted(self.terms, key=_grlex_key):
            coef = self.terms[exps]
            mono = "*".join(
                f"{v}^{e}" if e > 1 else v
                for v, e in zip(self.variables, exps)
                if e
            )
            parts.append(f"{coef:g}*{mono}" if mono else f"{coef:g}")
        return " + ".join(parts).replace("+ -", "- ")

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        keys = sorted(self.terms, key=_grlex_key)
        return {
            "variables": list(self.variables),
            "terms": [{"exps": list(e), "coef": self.terms[e]} for e in keys],
        }

    @staticmethod
    def from_dict(d: dict) -> "Polynomial":
        terms = {tuple(t["exps"]): float(t["coef"]) for t in d["terms"]}
        return Polynomial(tuple(d["variables"]), terms)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "Polynomial":
        return Polynomial.from_dict(json.loads(s))


def monomial_exponents(nvars: int, max_degree: int) -> list[tuple[int, ...]]:
    """All exponent vectors with total degree <= max_degree, graded-lex ordered."""
    out: list[tuple[int, ...]] = []

    def rec(prefix, remaining, slots):
        if slots == 0:
            out.append(tuple(prefix))
            return
        for e in range(remaining + 1):
            rec(prefix + [e], remaining - e, slots - 1)

    rec([], max_degree, nvars)
    out.sort(key=_grlex_key)
    return out


@dataclass(frozen=True)
class BasisSet:
    """Ordered monomial basis B(y) used to parameterize feedback terms linearly."""

    variables: tuple[str, ...]
    monomials: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        monos = tuple(tuple(int(e) for e in m) for m in self.monomials)
        if len(set(monos)) != len(monos):
            raise ValueError("duplicate monomials in basis")
        for m in monos:
            if len(m) != len(self.variables):
                raise ValueError("monomial length does not match variable count")
        object.__setattr__(self, "monomials", tuple(sorted(monos, key=_grlex_key)))

    @staticmethod
    def total_degree(variables, max_degree: int) -> "BasisSet":
        v = tuple(variables)
        return BasisSet(v, tuple(monomial_exponents(len(v), max_degree)))

    def __len__(self):
        return len(self.monomials)

    def eval(self, y):
        import numpy as np

        if len(y) != len(self.variables):
            raise ValueError("dimension mismatch")
        vals = np.empty(len(self.monomials))
        for k, exps in enumerate(self.monomials):
            v = 1.0
            for yi, e in zip(y, exps):
                if e:
                    v *= yi ** e
            vals[k] = v
        return vals

    def polynomials(self) -> list[Polynomial]:
        return [Polynomial.monomial(self.variables, m) for m in self.monomials]

    def combine(self, coefs) -> Polynomial:
        """Linear combination sum_k coefs[k] * monomial_k as a Polynomial."""
        if len(coefs) != len(self.monomials):
            raise ValueError("coefficient count does not match basis size")
        terms: dict[tuple[int, ...], float] = {}
        for c, m in zip(coefs, self.monomials):
            c = float(c)
            if c != 0.0:
                terms[m] = terms.get(m, 0.0) + c
        return Polynomial(self.variables, terms)

    def to_dict(self) -> dict:
        return {"variables": list(self.variables), "monomials": [list(m) for m in self.monomials]}

    @staticmethod
    def from_dict(d: dict) -> "BasisSet":
        return BasisSet(tuple(d["variables"]), tuple(tuple(m) for m in d["monomials"]))
