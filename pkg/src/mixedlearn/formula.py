"""R-style model formulas and design structures.

Grammar::

    formula  := [response ("+" response)*] "~" rhs
    rhs      := term ("+" term)*
    term     := NAME | "1" | "0" | "-1" | "(" slopes "|" NAME ")"
    slopes   := part ("+" part)*        part := NAME | "1" | "0"

``(x|g)`` carries an implicit intercept, ``(1|g)`` is intercept only and
``(0 + x|g)`` drops the intercept. Interactions and nested ``a/b`` grouping
are not part of the language.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

INTERCEPT = "(Intercept)"
MAX_CATEGORIES = 2 ** 16

_TOKEN = re.compile(r"\s*(?:(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<num>\d+)|(?P<op>[~+\-()|]))")


class FormulaSyntaxError(ValueError):
    pass


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class FixedTerm:
    name: str
    kind: str = "continuous"  # continuous | categorical | intercept


@dataclass(frozen=True)
class RandomTerm:
    slopes: tuple[str, ...]
    include_intercept: bool
    group: str

    @property
    def columns(self) -> tuple[str, ...]:
        """Slope-term labels in z column order."""
        return ((INTERCEPT,) if self.include_intercept else ()) + self.slopes

    @property
    def label(self) -> str:
        return f"({_print_slopes(self)} | {self.group})"


@dataclass(frozen=True)
class FormulaAst:
    responses: tuple[str, ...]
    fixed: tuple[FixedTerm, ...]
    random: tuple[RandomTerm, ...]

    @property
    def has_intercept(self) -> bool:
        return any(t.kind == "intercept" for t in self.fixed)

    @property
    def fixed_columns(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.fixed if t.kind != "intercept")

    def with_schema(self, schema: Mapping[str, str] | None) -> "FormulaAst":
        """Return a copy whose fixed terms carry kinds from ``schema``."""
        schema = schema or {}
        fixed = tuple(
            t if t.kind == "intercept"
            else FixedTerm(t.name, "categorical" if schema.get(t.name) == "categorical" else "continuous")
            for t in self.fixed
        )
        return FormulaAst(self.responses, fixed, self.random)

    def __str__(self) -> str:
        return print_formula(self)


def _tokenize(text: str) -> list[str]:
    tokens, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise FormulaSyntaxError(f"unexpected character {text[pos:].strip()[:1]!r} at position {pos}")
        tokens.append(m.group("name") or m.group("num") or m.group("op"))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.i = 0

    def peek(self) -> str | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise FormulaSyntaxError("unexpected end of formula")
        self.i += 1
        return tok

    def expect(self, tok: str) -> None:
        got = self.take()
        if got != tok:
            raise FormulaSyntaxError(f"expected {tok!r}, found {got!r}")

    def name(self) -> str:
        tok = self.take()
        if not re.fullmatch(r"[A-Za-z_.][A-Za-z0-9_.]*", tok):
            raise FormulaSyntaxError(f"expected a column name, found {tok!r}")
        return tok

    def random_term(self) -> RandomTerm:
        self.expect("(")
        if self.peek() == "|":
            raise FormulaSyntaxError("empty slope specification before '|'")
        intercept = True
        slopes: list[str] = []
        while True:
            tok = self.take()
            if tok == "1":
                intercept = True
            elif tok == "0":
                intercept = False
            elif tok == "-" and self.peek() == "1":
                self.take()
                intercept = False
            elif re.fullmatch(r"[A-Za-z_.][A-Za-z0-9_.]*", tok):
                if tok in slopes:
                    raise FormulaSyntaxError(f"duplicate slope {tok!r}")
                slopes.append(tok)
            else:
                raise FormulaSyntaxError(f"unexpected {tok!r} in random term")
            if self.peek() in ("+", "-"):
                if self.peek() == "+":
                    self.take()
                continue
            break
        self.expect("|")
        if self.peek() in (None, ")"):
            raise FormulaSyntaxError("random term is missing its grouping column")
        group = self.name()
        if self.peek() == "/":
            raise FormulaSyntaxError("nested grouping is not supported; write two terms")
        self.expect(")")
        if not intercept and not slopes:
            raise FormulaSyntaxError(f"random term for {group!r} has neither intercept nor slopes")
        return RandomTerm(tuple(slopes), intercept, group)


def parse_formula(text: str) -> FormulaAst:
    """Parse formula text into a :class:`FormulaAst`."""
    if not text or not text.strip():
        raise FormulaSyntaxError("empty formula")
    if "~" not in text:
        raise FormulaSyntaxError("formula has no '~'")
    depth = 0
    for ch in text:
        depth += ch == "("
        depth -= ch == ")"
        if depth < 0:
            raise FormulaSyntaxError("unbalanced parentheses")
    if depth:
        raise FormulaSyntaxError("unbalanced parentheses")

    p = _Parser(_tokenize(text))
    responses: list[str] = []
    while p.peek() != "~":
        responses.append(p.name())
        if p.peek() == "+":
            p.take()
        elif p.peek() != "~":
            raise FormulaSyntaxError(f"unexpected {p.peek()!r} in response list")
    p.expect("~")

    intercept = True
    fixed: list[str] = []
    random: list[RandomTerm] = []
    sign = "+"
    while True:
        tok = p.peek()
        if tok is None:
            raise FormulaSyntaxError("formula ends after an operator")
        if tok == "(":
            if sign == "-":
                raise FormulaSyntaxError("random terms cannot be subtracted")
            term = p.random_term()
            if term in random:
                raise FormulaSyntaxError(f"duplicate random term {term.label}")
            random.append(term)
        elif tok in ("0", "1"):
            p.take()
            intercept = (tok == "1") != (sign == "-")
        else:
            name = p.name()
            if sign == "-":
                raise FormulaSyntaxError(f"cannot remove term {name!r}")
            if name in fixed:
                raise FormulaSyntaxError(f"duplicate fixed term {name!r}")
            fixed.append(name)
        nxt = p.peek()
        if nxt is None:
            break
        if nxt not in ("+", "-"):
            raise FormulaSyntaxError(f"unexpected {nxt!r}")
        sign = p.take()

    terms = [FixedTerm(n) for n in fixed]
    if intercept:
        terms.append(FixedTerm(INTERCEPT, "intercept"))
    return FormulaAst(tuple(responses), tuple(terms), tuple(random))


def _print_slopes(term: RandomTerm) -> str:
    if not term.slopes:
        return "1"
    body = " + ".join(term.slopes)
    return body if term.include_intercept else f"0 + {body}"


def print_formula(ast: FormulaAst) -> str:
    """Canonical text; ``parse_formula(print_formula(a)) == a``."""
    lhs = " + ".join(ast.responses)
    rhs: list[str] = []
    names = list(ast.fixed_columns)
    if not ast.has_intercept:
        rhs.append("0")
    rhs.extend(names)
    rhs.extend(t.label for t in ast.random)
    if not rhs:
        rhs.append("1")
    elif ast.has_intercept and not names and not ast.random:
        rhs = ["1"]
    return (f"{lhs} ~ " if lhs else "~ ") + " + ".join(rhs)


# ---------------------------------------------------------------- design

def level_label(value) -> str:
    """Normalized string label for a group or category value."""
    if isinstance(value, (float, np.floating)):
        if np.isnan(value):
            raise DesignError("missing value in a grouping or categorical column")
        if float(value).is_integer():
            return str(int(value))
    if value is None:
        raise DesignError("missing value in a grouping or categorical column")
    return str(value)


@dataclass
class DesignMatrices:
    x_cont: np.ndarray
    cont_names: tuple[str, ...]
    x_cat: np.ndarray
    cat_names: tuple[str, ...]
    cat_levels: dict[str, list[str]]
    z_slopes: list[np.ndarray]
    group_index: list[np.ndarray]
    level_maps: dict[str, dict[str, int]]
    random_terms: tuple[RandomTerm, ...]
    n_rows: int = 0
    # term index -> constant map from fitted level effects to extra levels
    extra_levels: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(len(self.cat_levels[c]) for c in self.cat_names)

    def n_levels(self, group: str) -> int:
        return len(self.level_maps[group])

    def take(self, rows: np.ndarray) -> "DesignMatrices":
        """Row subset sharing the level maps."""
        return DesignMatrices(
            self.x_cont[rows], self.cont_names, self.x_cat[rows], self.cat_names, self.cat_levels,
            [z[rows] for z in self.z_slopes], [g[rows] for g in self.group_index],
            self.level_maps, self.random_terms, len(rows), self.extra_levels,
        )


def _numeric(data: Mapping, name: str, what: str) -> np.ndarray:
    if name not in data:
        raise DesignError(f"column {name!r} not found in data")
    col = np.asarray(data[name])
    if col.dtype.kind not in "biuf":
        try:
            col = col.astype(np.float64)
        except (TypeError, ValueError):
            raise DesignError(f"{what} column {name!r} is not numeric") from None
    return col.astype(np.float64)


def _codes(values, levels: list[str], index: dict[str, int], grow: bool, unknown: int) -> np.ndarray:
    out = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        lab = level_label(v)
        code = index.get(lab)
        if code is None:
            if grow:
                code = index[lab] = len(levels)
                levels.append(lab)
            else:
                code = unknown
        out[i] = code
    return out


def build_design(ast: FormulaAst, data: Mapping, schema: Mapping[str, str] | None = None,
                 level_maps: Mapping[str, Mapping[str, int]] | None = None,
                 cat_levels: Mapping[str, Sequence[str]] | None = None) -> DesignMatrices:
    """Build fixed and random design structures from column data.

    Passing ``level_maps``/``cat_levels`` from a fitted design freezes the
    codings: unseen group levels get index -1 and unseen categories get the
    reserved code equal to the cardinality.
    """
    ast = ast.with_schema(schema)
    columns = [t.name for t in ast.fixed if t.kind != "intercept"]
    columns += [c for r in ast.random for c in (*r.slopes, r.group)]
    for name in columns:
        if name not in data:
            raise DesignError(f"column {name!r} not found in data")
    n = len(np.asarray(data[columns[0]])) if columns else None
    if n is None:
        if not len(data):
            raise DesignError("data has no columns")
        n = len(np.asarray(next(iter(data.values()))))

    cont_names = [t.name for t in ast.fixed if t.kind == "continuous"]
    cont = [_numeric(data, c, "continuous") for c in cont_names]
    if ast.has_intercept:
        cont.append(np.ones(n))
        cont_names.append(INTERCEPT)
    x_cont = np.column_stack(cont) if cont else np.zeros((n, 0))
    if not np.all(np.isfinite(x_cont)):
        bad = [c for c, col in zip(cont_names, cont) if not np.all(np.isfinite(col))]
        raise DesignError(f"missing or non-finite values in column(s) {bad}")

    cat_names = [t.name for t in ast.fixed if t.kind == "categorical"]
    frozen_cats = cat_levels is not None
    levels_out: dict[str, list[str]] = {}
    codes = []
    for c in cat_names:
        levels = list(cat_levels[c]) if frozen_cats else []
        index = {lab: i for i, lab in enumerate(levels)}
        codes.append(_codes(np.asarray(data[c], dtype=object), levels, index, not frozen_cats, len(levels)))
        if len(levels) > MAX_CATEGORIES:
            raise DesignError(f"categorical column {c!r} has more than {MAX_CATEGORIES} levels")
        levels_out[c] = levels
    x_cat = np.column_stack(codes) if codes else np.zeros((n, 0), dtype=np.int64)

    frozen_groups = level_maps is not None
    maps: dict[str, dict[str, int]] = {g: dict(m) for g, m in (level_maps or {}).items()}
    z_slopes, group_index = [], []
    for term in ast.random:
        if term.group not in maps:
            if frozen_groups:
                raise DesignError(f"no level map for grouping column {term.group!r}")
            maps[term.group] = {}
        index = maps[term.group]
        levels = list(index)
        group_index.append(_codes(np.asarray(data[term.group], dtype=object), levels, index,
                                  not frozen_groups, -1))
        zcols = [np.ones(n)] if term.include_intercept else []
        for s in term.slopes:
            col = _numeric(data, s, "slope")
            if not np.all(np.isfinite(col)):
                raise DesignError(f"missing or non-finite values in slope column {s!r}")
            zcols.append(col)
        z_slopes.append(np.column_stack(zcols))

    return DesignMatrices(x_cont, tuple(cont_names), x_cat, tuple(cat_names), levels_out,
                          z_slopes, group_index, maps, ast.random, n)
