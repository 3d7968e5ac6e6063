import enum
import re
import string
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from rewritehub.errors import MissingSlot, NoSqlFound, PreconditionError
from rewritehub.llm import Conversation
from rewritehub.sql_utils import normalize_text
from rewritehub.types import Bindings

__all__ = [
    'TemplateId',
    'PromptTemplate',
    'TEMPLATES',
    'RULE_DESCRIPTION_REQUEST',
    'render',
    'render_text',
    'RewriteResponse',
    'parse_rewrite_response',
    'EquivalenceReply',
    'parse_equivalence_verdict',
    'parse_group_selection',
    'parse_condition',
]


class TemplateId(str, enum.Enum):
    ZERO_SHOT_REWRITE = 'ZeroShotRewrite'
    HINTED_REWRITE = 'HintedRewrite'
    GROUP_PREDICT = 'GroupPredict'
    SEMANTIC_CHECK = 'SemanticCheck'
    SEMANTIC_FIX = 'SemanticFix'
    CONDITION_ELICIT = 'ConditionElicit'
    SYNTAX_FIX = 'SyntaxFix'


RULE_DESCRIPTION_REQUEST = ('Describe the rewrite rules you are using (you must not include any specific query '
                            'details in the rules, e.g., table names, column names, etc). Be concise.')

UNSEEN_RULE = 'Unseen rule'


@dataclass(frozen=True)
class PromptTemplate:
    template_id: TemplateId
    text: str
    list_slots: Tuple[str, ...] = ()

    @property
    def slots(self) -> Tuple[str, ...]:
        return tuple(name for _, name, _, _ in string.Formatter().parse(self.text) if name)


TEMPLATES: Dict[TemplateId, PromptTemplate] = {
    TemplateId.ZERO_SHOT_REWRITE: PromptTemplate(
        TemplateId.ZERO_SHOT_REWRITE,
        '{query}\n'
        'Rewrite this query to improve performance.'),
    TemplateId.HINTED_REWRITE: PromptTemplate(
        TemplateId.HINTED_REWRITE,
        '{query}\n'
        'Rewrite this query to improve performance. ' + RULE_DESCRIPTION_REQUEST + '\n'
        'Here are some hints that you might consider when rewriting the query:\n'
        '{hints}',
        list_slots=('hints',)),
    TemplateId.GROUP_PREDICT: PromptTemplate(
        TemplateId.GROUP_PREDICT,
        '{rule}\n'
        'Please select the rewrite rule that is strictly the same as the above rule and give your explanation '
        '(just give one answer). If not, please select the first item “' + UNSEEN_RULE + '”.\n'
        'Options:\n'
        '{candidates}',
        list_slots=('candidates',)),
    TemplateId.SEMANTIC_CHECK: PromptTemplate(
        TemplateId.SEMANTIC_CHECK,
        'q1:{original}\n'
        'q2:{candidate}\n'
        'q1 is the original query, q2 is the rewritten query of q1.\n'
        'For q1, break it down step by step and then describe what it does in one sentence. Do the same for q2.\n'
        'Give an example, using tables, to show that these two queries are not equivalent if there\'s any such '
        'case. Otherwise, just say they are equivalent.'),
    TemplateId.SEMANTIC_FIX: PromptTemplate(
        TemplateId.SEMANTIC_FIX,
        'Based on your analysis, which part of q2 should be modified so that it becomes equivalent to q1? '
        'Show the modified version of q2.'),
    TemplateId.CONDITION_ELICIT: PromptTemplate(
        TemplateId.CONDITION_ELICIT,
        'Rule: {rule}\n'
        'Specify the conditions for applying the rule above. Answer in one sentence and do not include any '
        'specific query details, e.g., table names, column names, etc.'),
    TemplateId.SYNTAX_FIX: PromptTemplate(
        TemplateId.SYNTAX_FIX,
        'q1:{original}\n'
        'q2:{candidate}\n'
        'q2 is a rewrite of q1 but the database cannot run it. The database reports:\n'
        '{error}\n'
        'Correct q2 so that it runs without changing what it computes. Return only the corrected SQL.'),
}


def _format_list(template_id: TemplateId, slot: str, values) -> str:
    if isinstance(values, str):
        values = [values]
    items = [str(v).strip() for v in values if v is not None and str(v).strip()]
    if not items:
        raise MissingSlot(template_id, slot)
    if template_id == TemplateId.GROUP_PREDICT:
        items = [UNSEEN_RULE] + items
    return '\n'.join(f'{index}. {item}' for index, item in enumerate(items, start=1))


def render_text(template_id: TemplateId, bindings: Bindings | None = None) -> str:
    """
    Render a template's text. List slots (hints, candidates) accept a sequence and are rendered as a numbered list;
    the GroupPredict options list always starts with "Unseen rule".

    :raises MissingSlot: If a slot is unbound, None, empty, or an empty list.
    """
    template = TEMPLATES[TemplateId(template_id)]
    bindings = bindings or {}
    values = {}
    for slot in template.slots:
        value = bindings.get(slot)
        if slot in template.list_slots:
            values[slot] = _format_list(template.template_id, slot, value if value is not None else [])
            continue
        if value is None or not str(value).strip():
            raise MissingSlot(template.template_id, slot)
        values[slot] = str(value).strip()
    return template.text.format(**values)


def render(template_id: TemplateId, bindings: Bindings | None = None) -> Conversation:
    """
    Render a template into a single-turn conversation.

    :param template_id: Template to render.
    :param bindings: Slot name to value.
    :return: Conversation with one user turn, tagged with the template id.
    :raises MissingSlot: If any slot is unbound or empty.
    """
    template_id = TemplateId(template_id)
    return Conversation.single(render_text(template_id, bindings), template_id=template_id.value)


# --- Response parsing -------------------------------------------------------------------------------------------

_FENCE_RE = re.compile(r'```[ \t]*([A-Za-z0-9_+-]*)[^\n]*\n(.*?)```', re.DOTALL)
_SQL_START_RE = re.compile(r'^\s*(select|with)\b', re.IGNORECASE)
_LIST_ITEM_RE = re.compile(r'^\s*(?:\d+[.)]|[-*•])\s+(.+?)\s*$')
_EMPHASIS_RE = re.compile(r'(\*\*|__|`)')
_SQL_LINE_RE = re.compile(r'^\s*select\b.*\bfrom\b', re.IGNORECASE)
_RULE_LABEL_RE = re.compile(r'^(?:rule\s*\d*\s*[:.-])\s*', re.IGNORECASE)


@dataclass(frozen=True)
class RewriteResponse:
    sql: str
    rules: Tuple[str, ...]


def _extract_sql(text: str) -> Tuple[str, int]:
    """
    :return: (sql, offset just past the SQL in `text`).
    """
    for match in _FENCE_RE.finditer(text):
        body = match.group(2).strip()
        if body:
            return body, match.end()

    lines = text.splitlines(keepends=True)
    offset = 0
    for index, line in enumerate(lines):
        if _SQL_START_RE.match(line):
            collected = []
            end = offset
            for following in lines[index:]:
                if not following.strip():
                    break
                collected.append(following.rstrip('\n'))
                end += len(following)
                if following.rstrip().endswith(';'):
                    break
            return '\n'.join(collected).strip(), end
        offset += len(line)
    raise NoSqlFound('Reply contains no SQL block.')


def _clean_rule(text: str) -> str:
    text = _EMPHASIS_RE.sub('', text)
    text = _RULE_LABEL_RE.sub('', text.strip())
    return re.sub(r'\s+', ' ', text).strip()


def parse_rewrite_response(text: str) -> RewriteResponse:
    """
    Split a rewrite reply into the candidate SQL and the rule descriptions listed after it. The first fenced block
    wins; without fences, the first line starting with SELECT/WITH opens the SQL, which runs up to a blank line or
    a terminating semicolon.

    :raises PreconditionError: If `text` is empty.
    :raises NoSqlFound: If no SQL can be located.
    """
    if not text or not text.strip():
        raise PreconditionError('Rewrite reply is empty.')
    sql, end = _extract_sql(text)
    rules: List[str] = []
    for line in text[end:].splitlines():
        match = _LIST_ITEM_RE.match(line)
        if not match:
            continue
        rule = _clean_rule(match.group(1))
        if rule and not _SQL_LINE_RE.match(rule) and rule not in rules:
            rules.append(rule)
    return RewriteResponse(sql=sql, rules=tuple(rules))


_NEGATIVE_RE = re.compile(r"\bnot\s+(?:semantically\s+|logically\s+)?equivalent\b|\bnon-?equivalent\b|\binequivalent\b|"
                          r"\bare\s*n[o']?t\s+(?:semantically\s+|logically\s+)?equivalent\b", re.IGNORECASE)
_AFFIRMATIVE_RE = re.compile(r"^(?:yes[,.!]?\s*)?(?:semantically\s+)?equivalent\b|"
                             r"\b(?:they|queries|q1\s+and\s+q2|both)\s+are\s+(?:semantically\s+|logically\s+)?"
                             r"equivalent\b", re.IGNORECASE)
_HEDGE_RE = re.compile(r"\?|\b(?:might|may|maybe|probably|likely|unclear|not\s+sure|hard\s+to\s+say|depends)\b",
                       re.IGNORECASE)
_MARKER_RE = re.compile(r'equivalen', re.IGNORECASE)
_SENTENCE_END_RE = re.compile(r'(?<=[.!?])\s+')


@dataclass(frozen=True)
class EquivalenceReply:
    """
    The model's equivalence verdict. `payload` is the full reply (breakdown and counterexample).
    """
    equivalent: bool
    payload: str


def _verdict_region(text: str) -> str:
    """
    The last sentence of the reply that speaks of equivalence; the breakdown comes first and a counterexample
    may follow the verdict.
    """
    sentences = []
    for line in text.splitlines():
        line = _EMPHASIS_RE.sub('', line).strip().lstrip('#').strip()
        line = re.sub(r'^(?:answer|verdict|conclusion)\s*:\s*', '', line, flags=re.IGNORECASE)
        sentences.extend(sentence for sentence in _SENTENCE_END_RE.split(line) if sentence)
    for sentence in reversed(sentences):
        if _MARKER_RE.search(sentence):
            return sentence[:300]
    return ''


def parse_equivalence_verdict(text: str) -> EquivalenceReply:
    """
    Read the verdict from the concluding sentence about equivalence of a SemanticCheck reply. A negated
    equivalence marker in it means NotEquivalent; only an unhedged affirmative means Equivalent; anything else,
    including a reply that never states a verdict, is NotEquivalent.
    """
    region = _verdict_region(text or '')
    if _NEGATIVE_RE.search(region):
        return EquivalenceReply(equivalent=False, payload=text)
    if _AFFIRMATIVE_RE.search(region) and not _HEDGE_RE.search(region):
        return EquivalenceReply(equivalent=True, payload=text)
    return EquivalenceReply(equivalent=False, payload=text)


_OPTION_NUMBER_RE = re.compile(r'^\s*(?:option\s*)?(\d+)\s*[.):]?\s*(.*)$', re.IGNORECASE)


def parse_group_selection(text: str, candidates: Sequence[str]) -> Optional[int]:
    """
    Map a GroupPredict reply back to a candidate.

    :param text: Assistant reply.
    :param candidates: Candidate descriptions in option order (option 1, "Unseen rule", is implicit).
    :return: Index into `candidates`, or None for "Unseen rule" and for anything that cannot be matched.
    """
    answer = ''
    for line in (text or '').splitlines():
        line = _EMPHASIS_RE.sub('', line).strip()
        line = re.sub(r'^answer\s*:\s*', '', line, flags=re.IGNORECASE)
        if line:
            answer = line
            break
    if not answer:
        return None

    number_match = _OPTION_NUMBER_RE.match(answer)
    rest = answer
    number = None
    if number_match:
        number = int(number_match.group(1))
        rest = number_match.group(2)

    normalized = normalize_text(rest)
    if normalize_text(UNSEEN_RULE) in normalized:
        return None

    options = [normalize_text(candidate) for candidate in candidates]
    if normalized:
        for index, option in enumerate(options):
            if option == normalized:
                return index
        # Only candidates quoted in full by the reply count
        contained = [index for index, option in enumerate(options) if option and option in normalized]
        contained = [index for index in contained
                     if not any(other != index and options[index] in options[other] for other in contained)]
        if number is not None and number - 2 in contained:
            return number - 2
        if len(contained) == 1:
            return contained[0]
        return None

    if number is not None and not normalized:
        if 2 <= number <= len(candidates) + 1:
            return number - 2
    return None


def parse_condition(text: str, max_length: int = 500) -> Optional[str]:
    """
    First paragraph of a ConditionElicit reply, whitespace-collapsed; None if the reply is empty.
    """
    for paragraph in re.split(r'\n\s*\n', text or ''):
        paragraph = re.sub(r'\s+', ' ', _EMPHASIS_RE.sub('', paragraph)).strip()
        if paragraph:
            return paragraph[:max_length]
    return None
