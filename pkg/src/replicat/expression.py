"""The RSE set-expression language.

Selects sets of storage elements by attribute matching and set algebra:

    expr   := term (('|' | '\\') term)*
    term   := factor ('&' factor)*
    factor := '(' expr ')' | key '=' value | rse_name | '*'

``&`` (intersection) binds tighter than ``|`` (union) and ``\\``
(difference), which share a precedence level and associate left.
Whitespace is ignored. ``*`` is the set of all registered RSEs. A bare name
resolves through the implicit ``name`` attribute, so ``SITE-A`` and
``name=SITE-A`` are the same thing, except that the bare form insists the
RSE exists.
"""

import re
from dataclasses import dataclass

from .errors import ExpressionSyntaxError, UnknownRse


@dataclass(frozen=True)
class All:
    pass


@dataclass(frozen=True)
class RseLiteral:
    name: str


@dataclass(frozen=True)
class AttributeMatch:
    key: str
    value: str


@dataclass(frozen=True)
class Union:
    left: object
    right: object


@dataclass(frozen=True)
class Intersection:
    left: object
    right: object


@dataclass(frozen=True)
class Difference:
    left: object
    right: object


_TOKEN = re.compile(r"\s*([A-Za-z0-9._-]+|[=&|\\()*])")

_END = ("end", "", -1)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            offset = len(text) - len(text[pos:].lstrip())
            raise ExpressionSyntaxError(
                f"unexpected character {text[offset]!r}", offset)
        value = match.group(1)
        kind = "ident" if value[0] not in "=&|\\()*" else value
        tokens.append((kind, value, match.start(1)))
        pos = match.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.index = 0

    def peek(self):
        return self.tokens[self.index]

    def advance(self):
        token = self.tokens[self.index]
        self.index += 1
        return token

    def parse(self):
        if self.peek()[0] == "end":
            raise ExpressionSyntaxError("empty expression", 0)
        ast = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected {value!r}", pos)
        return ast

    def expr(self):
        node = self.term()
        while self.peek()[0] in ("|", "\\"):
            op = self.advance()[0]
            right = self.term()
            node = Union(node, right) if op == "|" else Difference(node, right)
        return node

    def term(self):
        node = self.factor()
        while self.peek()[0] == "&":
            self.advance()
            node = Intersection(node, self.factor())
        return node

    def factor(self):
        kind, value, pos = self.peek()
        if kind == "(":
            self.advance()
            node = self.expr()
            k, v, p = self.peek()
            if k != ")":
                raise ExpressionSyntaxError("expected ')'", p)
            self.advance()
            return node
        if kind == "*":
            self.advance()
            return All()
        if kind == "ident":
            self.advance()
            if self.peek()[0] == "=":
                self.advance()
                vkind, vvalue, vpos = self.peek()
                if vkind != "ident":
                    raise ExpressionSyntaxError("expected attribute value", vpos)
                self.advance()
                return AttributeMatch(value, vvalue)
            return RseLiteral(value)
        raise ExpressionSyntaxError(f"unexpected {value!r}" if value
                                    else "unexpected end of expression", pos)


def parse(text: str):
    if not isinstance(text, str):
        raise ExpressionSyntaxError("expression must be a string", 0)
    return _Parser(text).parse()


def evaluate(ast, registry: dict) -> set:
    """Evaluate an AST into a set of RSE names.

    ``registry`` maps rse_name to its attribute dict (with the implicit
    ``name`` attribute included). Attribute matches can legitimately be
    empty; only a bare literal naming no existing RSE is an error.
    """
    if isinstance(ast, All):
        return set(registry)
    if isinstance(ast, AttributeMatch):
        return {name for name, attrs in registry.items()
                if attrs.get(ast.key) == ast.value}
    if isinstance(ast, RseLiteral):
        matched = {name for name, attrs in registry.items()
                   if attrs.get("name") == ast.name}
        if not matched:
            raise UnknownRse(ast.name)
        return matched
    if isinstance(ast, Union):
        return evaluate(ast.left, registry) | evaluate(ast.right, registry)
    if isinstance(ast, Intersection):
        return evaluate(ast.left, registry) & evaluate(ast.right, registry)
    if isinstance(ast, Difference):
        return evaluate(ast.left, registry) - evaluate(ast.right, registry)
    raise TypeError(f"not an expression node: {ast!r}")


def unparse(ast) -> str:
    """Render an AST back to text; reparsing yields an equal AST."""
    if isinstance(ast, All):
        return "*"
    if isinstance(ast, RseLiteral):
        return ast.name
    if isinstance(ast, AttributeMatch):
        return f"{ast.key}={ast.value}"
    ops = {Union: "|", Intersection: "&", Difference: "\\"}
    op = ops[type(ast)]

    def wrap(child):
        text = unparse(child)
        return f"({text})" if isinstance(child, (Union, Intersection,
                                                 Difference)) else text

    return f"{wrap(ast.left)}{op}{wrap(ast.right)}"


def resolve(text: str, registry: dict) -> set:
    return evaluate(parse(text), registry)
