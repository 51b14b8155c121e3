"""The rule language mapping environment conditions to extractor choices and
parameter adjustments.

Grammar (comments run from '#' to end of line; tokens are case-sensitive):

    program      := rule* default_rule
    rule         := "when" pattern "{" action (";" action)* "}"
    pattern      := test ("," test)* | "*"
    test         := FIELD "=" VALUE
    action       := "select" EXTRACTOR | "adjust" PARAM "*" POSITIVE_NUMBER
    default_rule := "default" "{" action (";" action)* "}"

Evaluation scans rules in order. Every matching rule contributes its
adjustments, which compose multiplicatively per parameter; the first matching
select wins, with the mandatory default rule (which matches everything)
providing the fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum

from .extractors import ExtractorKind

# The fixed condition vocabulary. Extending it is a schema change for every
# file format that mentions conditions.
CONDITION_VOCAB: dict[str, tuple[str, ...]] = {
    "scene": ("indoor", "outdoor"),
    "agent": ("car", "drone", "human"),
    "lighting": ("bright", "dark"),
    "motion": ("fast", "slow"),
    "reflective": ("yes", "no"),
    "texture": ("high", "low"),
}

PARAM_NAMES = ("nf", "sf", "nl", "st")

EXTRACTOR_TOKENS = {
    "corner": ExtractorKind.CORNER_BINARY,
    "blob": ExtractorKind.BLOB_HISTOGRAM,
}


@dataclass(frozen=True)
class EnvConditions:
    """Fully-populated per-frame environment labels."""

    scene: str
    agent: str
    lighting: str
    motion: str
    reflective: str
    texture: str

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            allowed = CONDITION_VOCAB[f.name]
            if value not in allowed:
                raise ValueError(f"{f.name}={value!r} not in {allowed}")

    def as_dict(self) -> dict[str, str]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "EnvConditions":
        return cls(**{k: d[k] for k in CONDITION_VOCAB})


# --- errors -------------------------------------------------------------------

class DslError(Exception):
    """Base for all DSL front-end errors; carries a source position."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class DslLexError(DslError):
    pass


class DslParseError(DslError):
    def __init__(self, message: str, line: int, col: int, expected: tuple[str, ...] = ()):
        if expected:
            message = f"{message} (expected {' or '.join(expected)})"
        super().__init__(message, line, col)
        self.expected = expected


class DslSemanticError(DslError):
    pass


# --- AST ----------------------------------------------------------------------

@dataclass(frozen=True)
class SelectAction:
    extractor: ExtractorKind


@dataclass(frozen=True)
class AdjustAction:
    param: str
    factor: float


Action = SelectAction | AdjustAction


@dataclass(frozen=True)
class Rule:
    """A condition pattern plus its actions; empty tests means the wildcard."""

    tests: tuple[tuple[str, str], ...]
    actions: tuple[Action, ...]
    is_default: bool = False

    def matches(self, env: EnvConditions) -> bool:
        d = env.as_dict()
        return all(d[f] == v for f, v in self.tests)


@dataclass(frozen=True)
class DslProgram:
    rules: tuple[Rule, ...]
    default: Rule

    def __post_init__(self):
        if not self.default.is_default:
            raise ValueError("default rule must be marked is_default")
        if any(r.is_default for r in self.rules):
            raise ValueError("only the terminal rule may be the default")


# --- lexer ----------------------------------------------------------------------

class TokKind(Enum):
    IDENT = "identifier"
    NUMBER = "number"
    LBRACE = "'{'"
    RBRACE = "'}'"
    SEMI = "';'"
    COMMA = "','"
    EQ = "'='"
    STAR = "'*'"
    EOF = "end of input"


@dataclass(frozen=True)
class Token:
    kind: TokKind
    text: str
    line: int
    col: int


_PUNCT = {"{": TokKind.LBRACE, "}": TokKind.RBRACE, ";": TokKind.SEMI,
          ",": TokKind.COMMA, "=": TokKind.EQ, "*": TokKind.STAR}


def _lex(src: str) -> list[Token]:
    toks: list[Token] = []
    line, col = 1, 1
    i = 0
    n = len(src)
    while i < n:
        ch = src[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and src[i] != "\n":
                i += 1
            continue
        if ch in _PUNCT:
            toks.append(Token(_PUNCT[ch], ch, line, col))
            i += 1
            col += 1
            continue
        if ch.isalpha() or ch == "_":
            start = i
            while i < n and (src[i].isalnum() or src[i] == "_"):
                i += 1
            text = src[start:i]
            toks.append(Token(TokKind.IDENT, text, line, col))
            col += len(text)
            continue
        if ch.isdigit():
            start = i
            while i < n and src[i].isdigit():
                i += 1
            if i < n and src[i] == "." and i + 1 < n and src[i + 1].isdigit():
                i += 1
                while i < n and src[i].isdigit():
                    i += 1
            if i < n and src[i] in "eE":
                j = i + 1
                if j < n and src[j] in "+-":
                    j += 1
                if j < n and src[j].isdigit():
                    i = j
                    while i < n and src[i].isdigit():
                        i += 1
            text = src[start:i]
            toks.append(Token(TokKind.NUMBER, text, line, col))
            col += len(text)
            continue
        raise DslLexError(f"unexpected character {ch!r}", line, col)
    toks.append(Token(TokKind.EOF, "", line, col))
    return toks


# --- parser ---------------------------------------------------------------------

class _Parser:
    def __init__(self, toks: list[Token]):
        self.toks = toks
        self.pos = 0

    @property
    def cur(self) -> Token:
        return self.toks[self.pos]

    def advance(self) -> Token:
        tok = self.cur
        self.pos += 1
        return tok

    def expect(self, kind: TokKind, *expected_desc: str) -> Token:
        if self.cur.kind is not kind:
            desc = expected_desc or (kind.value,)
            raise DslParseError(
                f"unexpected {self.cur.kind.value}"
                + (f" {self.cur.text!r}" if self.cur.text else ""),
                self.cur.line, self.cur.col, expected=desc,
            )
        return self.advance()

    def keyword(self) -> str | None:
        if self.cur.kind is TokKind.IDENT:
            return self.cur.text
        return None

    def program(self) -> DslProgram:
        rules: list[Rule] = []
        while True:
            kw = self.keyword()
            if kw == "when":
                rules.append(self.rule())
            elif kw == "default":
                break
            elif self.cur.kind is TokKind.EOF:
                raise DslParseError(
                    "missing default rule", self.cur.line, self.cur.col,
                    expected=("'when'", "'default'"),
                )
            else:
                raise DslParseError(
                    f"unexpected {self.cur.kind.value} {self.cur.text!r}",
                    self.cur.line, self.cur.col, expected=("'when'", "'default'"),
                )
        default = self.default_rule()
        if self.cur.kind is not TokKind.EOF:
            raise DslParseError(
                "the default rule must come last", self.cur.line, self.cur.col,
                expected=("end of input",),
            )
        return DslProgram(rules=tuple(rules), default=default)

    def rule(self) -> Rule:
        self.expect(TokKind.IDENT)  # 'when', already checked
        tests = self.pattern()
        actions = self.action_block()
        return Rule(tests=tests, actions=actions)

    def default_rule(self) -> Rule:
        self.expect(TokKind.IDENT)  # 'default', already checked
        actions = self.action_block()
        return Rule(tests=(), actions=actions, is_default=True)

    def pattern(self) -> tuple[tuple[str, str], ...]:
        if self.cur.kind is TokKind.STAR:
            self.advance()
            return ()
        tests = [self.test()]
        while self.cur.kind is TokKind.COMMA:
            self.advance()
            tests.append(self.test())
        return tuple(tests)

    def test(self) -> tuple[str, str]:
        ftok = self.expect(TokKind.IDENT, "condition field", "'*'")
        if ftok.text not in CONDITION_VOCAB:
            raise DslSemanticError(
                f"unknown condition field {ftok.text!r}", ftok.line, ftok.col
            )
        self.expect(TokKind.EQ)
        vtok = self.expect(TokKind.IDENT, "condition value")
        if vtok.text not in CONDITION_VOCAB[ftok.text]:
            raise DslSemanticError(
                f"unknown value {vtok.text!r} for field {ftok.text!r} "
                f"(one of {', '.join(CONDITION_VOCAB[ftok.text])})",
                vtok.line, vtok.col,
            )
        return ftok.text, vtok.text

    def action_block(self) -> tuple[Action, ...]:
        self.expect(TokKind.LBRACE)
        actions = [self.action()]
        while self.cur.kind is TokKind.SEMI:
            self.advance()
            actions.append(self.action())
        self.expect(TokKind.RBRACE, "';'", "'}'")
        return tuple(actions)

    def action(self) -> Action:
        tok = self.expect(TokKind.IDENT, "'select'", "'adjust'")
        if tok.text == "select":
            etok = self.expect(TokKind.IDENT, "extractor name")
            if etok.text not in EXTRACTOR_TOKENS:
                raise DslSemanticError(
                    f"unknown extractor {etok.text!r} "
                    f"(one of {', '.join(EXTRACTOR_TOKENS)})",
                    etok.line, etok.col,
                )
            return SelectAction(extractor=EXTRACTOR_TOKENS[etok.text])
        if tok.text == "adjust":
            ptok = self.expect(TokKind.IDENT, "parameter name")
            if ptok.text not in PARAM_NAMES:
                raise DslSemanticError(
                    f"unknown parameter {ptok.text!r} (one of {', '.join(PARAM_NAMES)})",
                    ptok.line, ptok.col,
                )
            self.expect(TokKind.STAR)
            ntok = self.expect(TokKind.NUMBER, "positive number")
            factor = float(ntok.text)
            if not (factor > 0.0) or factor == float("inf"):
                raise DslSemanticError(
                    f"adjust factor must be positive and finite, got {ntok.text}",
                    ntok.line, ntok.col,
                )
            return AdjustAction(param=ptok.text, factor=factor)
        raise DslParseError(
            f"unexpected identifier {tok.text!r}", tok.line, tok.col,
            expected=("'select'", "'adjust'"),
        )


def parse(text: str) -> DslProgram:
    """Parse DSL source; raises DslLexError, DslParseError or DslSemanticError
    with line/column positions."""
    return _Parser(_lex(text)).program()


# --- printer --------------------------------------------------------------------

def _fmt_factor(f: float) -> str:
    return repr(float(f))


def _fmt_action(a: Action) -> str:
    if isinstance(a, SelectAction):
        name = a.extractor.value
        return f"select {name}"
    return f"adjust {a.param} *{_fmt_factor(a.factor)}"


def _fmt_rule(r: Rule) -> str:
    body = "; ".join(_fmt_action(a) for a in r.actions)
    if r.is_default:
        return f"default {{ {body} }}"
    pattern = "*" if not r.tests else ", ".join(f"{f}={v}" for f, v in r.tests)
    return f"when {pattern} {{ {body} }}"


def print_program(prog: DslProgram) -> str:
    """Canonical source text; parse(print_program(p)) is structurally p."""
    lines = [_fmt_rule(r) for r in prog.rules]
    lines.append(_fmt_rule(prog.default))
    return "\n".join(lines) + "\n"


# --- evaluation -------------------------------------------------------------------

def evaluate(
    prog: DslProgram, env: EnvConditions
) -> tuple[ExtractorKind | None, dict[str, float]]:
    """Run a program against fully-populated conditions.

    Returns the selected extractor (None only if no matching rule, including
    the default, carries a select) and the per-parameter multiplier composed
    from every matching adjust action.
    """
    factors = {p: 1.0 for p in PARAM_NAMES}
    selected: ExtractorKind | None = None
    for rule in (*prog.rules, prog.default):
        if not rule.matches(env):
            continue
        for action in rule.actions:
            if isinstance(action, AdjustAction):
                factors[action.param] *= action.factor
            elif selected is None:
                selected = action.extractor
    return selected, factors


def load_program(path) -> DslProgram:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read())


def save_program(prog: DslProgram, path, header_comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        fh.write(print_program(prog))
