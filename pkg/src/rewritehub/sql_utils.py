import hashlib
import re
from typing import List, Optional, Set, Tuple

from sqlglot.dialects.postgres import Postgres
from sqlglot.errors import TokenError
from sqlglot.tokens import Token, TokenType

__all__ = [
    'canonicalize_sql',
    'sql_digest',
    'outer_order_by',
    'query_identifiers',
    'mentions_query_details',
    'normalize_text',
]

# Token types whose text is data or a name, never a keyword
_OPAQUE_TYPES = {'VAR', 'IDENTIFIER', 'NUMBER', 'PARAMETER'}


def _tokenize(sql: str) -> Optional[List[Token]]:
    """
    Tokens of `sql` under the PostgreSQL dialect (dollar-quoted and E'' strings included); None if the text does
    not tokenize, e.g. an unterminated literal.
    """
    try:
        return Postgres.Tokenizer().tokenize(sql)
    except TokenError:
        return None


def _raw(sql: str, token: Token) -> str:
    return sql[token.start:token.end + 1]


def _is_opaque(token: Token) -> bool:
    name = token.token_type.name
    return name in _OPAQUE_TYPES or name.endswith('STRING')


def _strip_semicolons(text: str) -> str:
    while True:
        stripped = text.rstrip().rstrip(';').rstrip()
        if stripped == text:
            return text
        text = stripped


def canonicalize_sql(sql: str) -> str:
    """
    Normalize SQL text for identity and embedding: comments are dropped, whitespace runs collapse to one space,
    keywords are lowercased and trailing semicolons are stripped. Literals (dollar-quoted ones included), numbers,
    names and quoted identifiers are kept byte for byte. The transform is idempotent and never fails; text that
    does not tokenize only loses surrounding whitespace and trailing semicolons.

    :param sql: SQL text.
    :return: Canonical SQL text.
    """
    tokens = _tokenize(sql)
    if tokens is None:
        return _strip_semicolons(sql.strip())
    while tokens and tokens[-1].token_type == TokenType.SEMICOLON:
        tokens.pop()

    parts: List[str] = []
    previous_end = None
    for token in tokens:
        if previous_end is not None and token.start > previous_end + 1:
            parts.append(' ')
        raw = _raw(sql, token)
        parts.append(raw if _is_opaque(token) else ' '.join(raw.split()).lower())
        previous_end = token.end
    return ''.join(parts)


def sql_digest(sql: str) -> str:
    """
    Short stable digest of the canonical form, usable as an opaque query id.
    """
    return hashlib.sha256(canonicalize_sql(sql).encode('utf-8')).hexdigest()[:16]


def outer_order_by(sql: str) -> Tuple[bool, bool]:
    """
    Token-level check for an ORDER BY on the outermost query block.

    :return: (has_order_by, certain). `certain` is False when the text does not tokenize or parentheses do not
    balance, in which case the nesting depth used for the decision is unreliable.
    """
    tokens = _tokenize(sql)
    if tokens is None:
        return False, False
    depth = 0
    balanced = True
    found = False
    for token in tokens:
        if token.token_type == TokenType.L_PAREN:
            depth += 1
        elif token.token_type == TokenType.R_PAREN:
            depth -= 1
            if depth < 0:
                balanced = False
                depth = 0
        elif token.token_type == TokenType.ORDER_BY and depth == 0:
            found = True
    return found, balanced and depth == 0


def query_identifiers(sql: str, min_length: int = 3) -> Set[str]:
    """
    Lowercased table, column and alias names of a query: unquoted names that are not function calls, plus the
    contents of quoted identifiers.

    :param sql: SQL text.
    :param min_length: Shorter names are ignored; one- and two-letter aliases collide with ordinary English.
    """
    tokens = _tokenize(sql) or []
    names = set()
    for index, token in enumerate(tokens):
        if token.token_type not in (TokenType.VAR, TokenType.IDENTIFIER):
            continue
        following = tokens[index + 1] if index + 1 < len(tokens) else None
        if token.token_type == TokenType.VAR and following is not None and following.token_type == TokenType.L_PAREN:
            continue
        if len(token.text) >= min_length:
            names.add(token.text.lower())
    return names


def mentions_query_details(description: str, identifiers: Set[str]) -> bool:
    """
    True if a rule description names any of the given query identifiers as a whole word.
    """
    words = set(re.findall(r'[a-z0-9_$]+', description.lower()))
    return bool(words & identifiers)


def normalize_text(text: str) -> str:
    """
    Lowercase, strip list markers, quotes and trailing punctuation, collapse whitespace. Used to compare rule
    descriptions and LLM selections.
    """
    text = text.strip().lower()
    text = re.sub(r'^\s*(?:\d+[.)]|[-*•])\s+', '', text)
    text = text.replace('“', '').replace('”', '').replace('"', '').replace('`', '').replace('*', '')
    text = re.sub(r'\s+', ' ', text)
    return text.strip(' .;:!')
