"""Hand-rolled SQL lexer with 1-based line/column positions.

Keywords are recognized case-insensitively and identifiers are folded to
lower case at the token level, which is what makes canonical unparsing (and
with it result-cache keys) stable.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ParseError

KEYWORDS = {
    "activate", "add", "all", "alter", "and", "application", "as", "asc",
    "between", "by", "create", "default", "delete", "desc", "disable",
    "distinct", "drop", "enable", "explain", "external", "extract", "false",
    "from", "group", "having", "in", "inner", "insert", "into", "is",
    "join", "kill", "limit", "mapping", "matched", "materialized", "merge",
    "move", "not", "null", "on", "or", "order", "partitioned", "plan",
    "pool", "rebuild", "resource", "rule", "select", "set", "stored",
    "table", "tblproperties", "then", "to", "true", "union", "update",
    "user", "using", "values", "view", "when", "where", "with",
}

IDENT = "IDENT"
NUMBER = "NUMBER"
STRING_LIT = "STRING"
SYMBOL = "SYMBOL"
KEYWORD = "KEYWORD"
EOF = "EOF"

_SYMBOLS = ("<=", ">=", "!=", "<>", "(", ")", ",", ".", ";", "=", "<", ">", "+", "-", "*", "/")


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int
    value: object = None


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    i = 0
    line = 1
    col = 1
    n = len(text)

    def err(msg: str):
        return ParseError(msg, line=line, column=col)

    while i < n:
        c = text[i]
        if c == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c == "-" and i + 1 < n and text[i + 1] == "-":  # line comment
            while i < n and text[i] != "\n":
                i += 1
            continue
        start_line, start_col = line, col
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j].lower()
            kind = KEYWORD if word in KEYWORDS else IDENT
            tokens.append(Token(kind, word, start_line, start_col))
            col += j - i
            i = j
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or (text[j] == "." and not seen_dot)):
                if text[j] == ".":
                    # "1." followed by an identifier is a qualified name, not a float
                    if j + 1 >= n or not text[j + 1].isdigit():
                        break
                    seen_dot = True
                j += 1
            raw = text[i:j]
            value = float(raw) if "." in raw else int(raw)
            tokens.append(Token(NUMBER, raw, start_line, start_col, value))
            col += j - i
            i = j
            continue
        if c == "'":
            j = i + 1
            buf = []
            while True:
                if j >= n:
                    raise err("unterminated string literal")
                if text[j] == "'":
                    if j + 1 < n and text[j + 1] == "'":
                        buf.append("'")
                        j += 2
                        continue
                    j += 1
                    break
                if text[j] == "\n":
                    raise err("newline in string literal")
                buf.append(text[j])
                j += 1
            tokens.append(Token(STRING_LIT, text[i:j], start_line, start_col, "".join(buf)))
            col += j - i
            i = j
            continue
        for sym in _SYMBOLS:
            if text.startswith(sym, i):
                tokens.append(Token(SYMBOL, sym, start_line, start_col))
                i += len(sym)
                col += len(sym)
                break
        else:
            raise err(f"unexpected character {c!r}")
    tokens.append(Token(EOF, "", line, col))
    return tokens
