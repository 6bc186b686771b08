"""Codec between structured page transcripts and single-string page labels.

A page label concatenates every individual's tagged cell values into one
string: each value is preceded by its tag token (``<s-h>Gendre <f>Pierre``),
fields are separated by a single space, records by a newline. Heads of
household carry ``<s-h>`` instead of ``<s>``, which doubles as the household
boundary signal.

The encoder is strict (valid records in, canonical field order out). Two
decoders are provided: ``decode_strict`` is the exact inverse of the encoder
and rejects malformed input, while ``decode_lenient`` accepts arbitrary noisy
recognizer output, repairs what it can and reports warnings instead of
failing.

Also hosts the seeded synthetic page generator used to build test corpora.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Mapping, NamedTuple, Optional, Union

from .domain import (
    DEFAULT_ALPHABET,
    FIELD_ORDER,
    EntityTag,
    PageTranscript,
    PersonRecord,
    TagAlphabet,
    validate_record,
)

#: Maximum number of output tokens a recognizer prediction may contain; one
#: tag token or one text character counts as one token.
DEFAULT_TOKEN_BUDGET = 2800

_LEADING_TAGS = (EntityTag.SURNAME_HEAD, EntityTag.SURNAME)


class CodecError(Exception):
    pass


class TokenBudgetExceeded(CodecError):
    def __init__(self, count: int, budget: int):
        super().__init__(f"label needs {count} tokens, budget is {budget}")
        self.count = count
        self.budget = budget


class MalformedLabel(CodecError):
    """Strict-decode failure. ``position`` is a 1-based character offset."""

    def __init__(self, position: int, reason: str):
        super().__init__(f"malformed label at position {position}: {reason}")
        self.position = position
        self.reason = reason


class InvalidProfile(ValueError):
    pass


@dataclass(frozen=True)
class LabelString:
    """A full-page label and the token budget it was encoded under."""

    text: str
    token_budget: int = DEFAULT_TOKEN_BUDGET

    def __str__(self) -> str:
        return self.text


class WarningKind(Enum):
    UNKNOWN_TOKEN = "UnknownToken"
    EMPTY_FIELD = "EmptyField"
    RECORD_WITHOUT_SURNAME = "RecordWithoutSurname"
    DUPLICATE_FIELD_IN_RECORD = "DuplicateFieldInRecord"


class DecodeWarning(NamedTuple):
    position: int  # 1-based character offset of the offending token or text
    kind: WarningKind


@dataclass(frozen=True)
class DecodeReport:
    """Lenient decode result: best-effort transcript plus ordered warnings."""

    transcript: PageTranscript
    warnings: tuple[DecodeWarning, ...]


def count_tokens(text: str, alphabet: TagAlphabet = DEFAULT_ALPHABET) -> int:
    """Count label tokens: each tag surface form is 1, every other char is 1."""
    tags = 0
    tag_chars = 0
    for m in alphabet._pattern.finditer(text):
        tags += 1
        tag_chars += len(m.group(0))
    return tags + (len(text) - tag_chars)


def encode(
    page: PageTranscript,
    *,
    token_budget: int = DEFAULT_TOKEN_BUDGET,
    alphabet: TagAlphabet = DEFAULT_ALPHABET,
) -> LabelString:
    """Encode a page transcript into its canonical label string.

    Fields are emitted in the fixed canonical order regardless of the
    in-memory insertion order, absent fields are skipped, and equal inputs
    always produce equal output.

    Raises:
        ValueError: if any record fails its invariants.
        TokenBudgetExceeded: if the encoded page would exceed ``token_budget``.
    """
    lines = []
    for i, record in enumerate(page.records):
        violations = validate_record(record)
        if violations:
            raise ValueError(f"record {i} is invalid: {', '.join(violations)}")
        parts = [
            f"{alphabet.token_for(tag)}{record.fields[tag]}"
            for tag in FIELD_ORDER
            if tag in record.fields
        ]
        if parts:
            lines.append(" ".join(parts))
    text = "\n".join(lines)
    count = count_tokens(text, alphabet)
    if count > token_budget:
        raise TokenBudgetExceeded(count, token_budget)
    return LabelString(text, token_budget)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

_TAG = "tag"
_TEXT = "text"
_UNKNOWN = "unknown"
_NEWLINE = "newline"

# An out-of-alphabet token is a compact <...> chunk; anything looser (spaces,
# nesting, no closing bracket) degrades to a lone "<" so that a stray bracket
# can never swallow a legitimate tag further along the line.
_UNKNOWN_TOKEN_RE = re.compile(r"<[^<>\s]{0,16}>")


def _scan(text: str, alphabet: TagAlphabet) -> Iterator[tuple[str, int, object]]:
    """Tokenize a label into (kind, 1-based position, payload) events.

    Unknown tokens are well-formed ``<...>`` chunks outside the alphabet, or
    a lone ``<`` that never closes.
    """
    i = 0
    n = len(text)
    buf_start = 0
    while i < n:
        c = text[i]
        if c == "\n":
            if buf_start < i:
                yield _TEXT, buf_start + 1, text[buf_start:i]
            yield _NEWLINE, i + 1, None
            i += 1
            buf_start = i
        elif c == "<":
            tag = alphabet.match_at(text, i)
            if tag is not None:
                if buf_start < i:
                    yield _TEXT, buf_start + 1, text[buf_start:i]
                yield _TAG, i + 1, tag
                i += len(alphabet.token_for(tag))
            else:
                m = _UNKNOWN_TOKEN_RE.match(text, i)
                token = m.group(0) if m else "<"
                if buf_start < i:
                    yield _TEXT, buf_start + 1, text[buf_start:i]
                yield _UNKNOWN, i + 1, token
                i += len(token)
            buf_start = i
        else:
            i += 1
    if buf_start < n:
        yield _TEXT, buf_start + 1, text[buf_start:n]


class _Parser:
    """Shared state machine behind strict and lenient decoding."""

    def __init__(self, strict: bool):
        self.strict = strict
        self.records: list[PersonRecord] = []
        self.warnings: list[DecodeWarning] = []
        self.fields: dict[EntityTag, str] = {}
        self.record_start: Optional[int] = None
        self.cur_tag: Optional[EntityTag] = None
        self.cur_pos = 0
        self.buf: list[str] = []
        self.dropping = False

    def warn(self, position: int, kind: WarningKind) -> None:
        self.warnings.append(DecodeWarning(position, kind))

    def close_field(self) -> None:
        if self.cur_tag is None:
            return
        value = "".join(self.buf)
        # The encoder writes no space around values; decoding accepts one
        # leading space after the tag and strips the one-space separator.
        if value.startswith(" "):
            value = value[1:]
        if value.endswith(" "):
            value = value[:-1]
        if value == "":
            if self.strict:
                raise MalformedLabel(self.cur_pos, f"empty value for {self.cur_tag.name}")
            self.warn(self.cur_pos, WarningKind.EMPTY_FIELD)
        else:
            self.fields[self.cur_tag] = value
        self.cur_tag = None
        self.buf = []

    def close_record(self) -> None:
        self.close_field()
        if self.fields:
            if not self.strict and not any(t in self.fields for t in _LEADING_TAGS):
                self.warn(self.record_start or 1, WarningKind.RECORD_WITHOUT_SURNAME)
            self.records.append(PersonRecord(self.fields))
        self.fields = {}
        self.record_start = None

    def feed(self, kind: str, pos: int, payload: object) -> None:
        if kind == _NEWLINE:
            self.dropping = False
            self.close_record()
        elif kind == _TAG:
            tag = payload
            self.dropping = False
            if tag in _LEADING_TAGS:
                # A surname token always opens a new record.
                if self.fields or self.cur_tag is not None:
                    self.close_record()
            elif tag in self.fields or tag is self.cur_tag:
                if self.strict:
                    raise MalformedLabel(pos, f"duplicate field {tag.name}")
                self.warn(pos, WarningKind.DUPLICATE_FIELD_IN_RECORD)
                self.close_record()
            else:
                self.close_field()
            if self.record_start is None:
                self.record_start = pos
            self.cur_tag = tag
            self.cur_pos = pos
            self.buf = []
        elif kind == _TEXT:
            if self.dropping:
                return
            if self.cur_tag is None:
                if self.strict:
                    raise MalformedLabel(pos, "text before the first tag")
                self.warn(pos, WarningKind.UNKNOWN_TOKEN)
            else:
                self.buf.append(payload)
        elif kind == _UNKNOWN:
            if self.strict:
                raise MalformedLabel(pos, f"unknown token {payload!r}")
            if self.dropping:
                return
            self.close_field()
            self.warn(pos, WarningKind.UNKNOWN_TOKEN)
            # Text trailing an unknown token is dropped up to the next tag
            # or record boundary.
            self.dropping = True

    def finish(self) -> None:
        self.close_record()
        self.warnings.sort(key=lambda w: (w.position, w.kind.value))


def _label_text(label: Union[LabelString, str]) -> str:
    return label.text if isinstance(label, LabelString) else label


def decode_strict(
    label: Union[LabelString, str],
    *,
    page_id: str = "",
    page_index: int = 0,
    alphabet: TagAlphabet = DEFAULT_ALPHABET,
) -> PageTranscript:
    """Decode a label produced by :func:`encode` (or an equivalent string).

    Exact inverse of the encoder: ``decode_strict(encode(p)) == p`` when the
    page metadata is passed through.

    Raises:
        MalformedLabel: on unknown tokens, duplicate fields within a record,
            empty field values, or text before a record's first tag.
    """
    text = _label_text(label)
    parser = _Parser(strict=True)
    for event in _scan(text, alphabet):
        parser.feed(*event)
    parser.finish()
    return PageTranscript(tuple(parser.records), page_id=page_id, page_index_in_register=page_index)


def decode_lenient(
    label: Union[LabelString, str],
    *,
    page_id: str = "",
    page_index: int = 0,
    alphabet: TagAlphabet = DEFAULT_ALPHABET,
) -> DecodeReport:
    """Best-effort decode of arbitrary (noisy) recognizer output.

    Never fails. Record boundaries open at each surname token or at a
    repeated field tag; unknown tokens and their trailing text are dropped
    with a warning; empty fields are dropped. Every record in the returned
    transcript passes ``validate_record``.
    """
    text = _label_text(label)
    parser = _Parser(strict=False)
    for event in _scan(text, alphabet):
        parser.feed(*event)
    parser.finish()
    transcript = PageTranscript(
        tuple(parser.records), page_id=page_id, page_index_in_register=page_index
    )
    return DecodeReport(transcript, tuple(parser.warnings))


# ---------------------------------------------------------------------------
# Synthetic page generation
# ---------------------------------------------------------------------------

_SURNAMES = (
    "Gendre", "Paraud", "Martin", "Joyoz", "Dupont", "Bernard", "Moreau",
    "Petit", "Durand", "Leroy", "Roux", "Fournier", "Girard", "Bonnet",
    "Lambert", "Fontaine", "Chevalier", "Gauthier", "Perrin", "Clément",
)
_FIRSTNAMES = (
    "Pierre", "Marie", "Suzanne", "Jean", "Jeanne", "Louis", "Louise",
    "François", "Françoise", "Joseph", "Anne", "Claude", "Antoine",
    "Marguerite", "Henri", "Catherine", "Jacques", "Madeleine",
)
_OCCUPATIONS = (
    "cultivateur", "cultivatrice", "métayer", "néant", "journalier",
    "couturière", "forgeron", "instituteur", "berger", "meunier",
    "domestique", "charron", "sabotier", "lingère",
)
_LINKS = ("chef", "épouse", "fils", "fille", "mère", "père", "domestique", "pensionnaire", "neveu")
_EMPLOYERS = ("patron", "néant", "idem", "commune")
_NATIONALITIES = ("française", "idem", "belge", "italienne", "espagnole", "suisse")
_CIVIL_STATUSES = ("marié", "mariée", "célibataire", "veuf", "veuve")
_PLACES = ("Moulins", "Vichy", "Yzeure", "Gannat", "Souvigny", "Avermes", "Paris", "Lyon")
_OBSERVATIONS = ("sourd", "aveugle", "infirme", "absent")

_DEFAULT_PRESENCE: Mapping[EntityTag, float] = {
    EntityTag.SURNAME: 0.92,
    EntityTag.FIRSTNAME: 0.97,
    EntityTag.OCCUPATION: 0.80,
    EntityTag.LINK: 0.85,
    EntityTag.EMPLOYER: 0.30,
    EntityTag.AGE: 0.90,
    EntityTag.NATIONALITY: 0.45,
    EntityTag.BIRTH_DATE: 0.15,
    EntityTag.CIVIL_STATUS: 0.25,
    EntityTag.LOB: 0.20,
    EntityTag.OBSERVATION: 0.02,
}


@dataclass(frozen=True)
class SyntheticProfile:
    """Distribution parameters for synthetic page generation.

    ``household_size_mean`` parameterizes a geometric size distribution
    (each row after a household's first is a new head with probability
    1/mean). The geometric's lack of memory means truncating a household at
    a page or register boundary does not bias the sizes of the households
    that do fit.

    ``field_presence[SURNAME]`` applies to non-head members; heads always
    carry SURNAME_HEAD.
    """

    min_rows: int = 25
    max_rows: int = 36
    household_size_mean: float = 4.0
    field_presence: Mapping[EntityTag, float] = field(
        default_factory=lambda: dict(_DEFAULT_PRESENCE)
    )

    def __post_init__(self):
        if not 1 <= self.min_rows <= self.max_rows:
            raise InvalidProfile(f"bad row range [{self.min_rows}, {self.max_rows}]")
        if self.household_size_mean < 1.0:
            raise InvalidProfile("household size mean must be >= 1")
        for tag, p in self.field_presence.items():
            if not 0.0 <= p <= 1.0:
                raise InvalidProfile(f"presence probability for {tag.name} not in [0, 1]: {p}")

    def with_rows(self, min_rows: int, max_rows: int) -> "SyntheticProfile":
        return replace(self, min_rows=min_rows, max_rows=max_rows)


DEFAULT_PROFILE = SyntheticProfile()

_VALUE_SAMPLERS = {
    EntityTag.FIRSTNAME: lambda rng: rng.choice(_FIRSTNAMES),
    EntityTag.OCCUPATION: lambda rng: rng.choice(_OCCUPATIONS),
    EntityTag.LINK: lambda rng: rng.choice(_LINKS),
    EntityTag.EMPLOYER: lambda rng: rng.choice(_EMPLOYERS),
    EntityTag.AGE: lambda rng: str(rng.randint(0, 89)),
    EntityTag.NATIONALITY: lambda rng: rng.choice(_NATIONALITIES),
    EntityTag.BIRTH_DATE: lambda rng: str(rng.randint(1790, 1910)),
    EntityTag.CIVIL_STATUS: lambda rng: rng.choice(_CIVIL_STATUSES),
    EntityTag.LOB: lambda rng: rng.choice(_PLACES),
    EntityTag.OBSERVATION: lambda rng: rng.choice(_OBSERVATIONS),
}


def sample_record(rng: random.Random, profile: SyntheticProfile, head: bool) -> PersonRecord:
    """Draw one synthetic person record; heads always get SURNAME_HEAD."""
    fields: dict[EntityTag, str] = {}
    if head:
        fields[EntityTag.SURNAME_HEAD] = rng.choice(_SURNAMES)
    elif rng.random() < profile.field_presence.get(EntityTag.SURNAME, 1.0):
        fields[EntityTag.SURNAME] = rng.choice(_SURNAMES)
    for tag, sampler in _VALUE_SAMPLERS.items():
        if rng.random() < profile.field_presence.get(tag, 0.0):
            fields[tag] = sampler(rng)
    if not fields:
        fields[EntityTag.FIRSTNAME] = rng.choice(_FIRSTNAMES)
    return PersonRecord(fields)


def write_label_file(label: Union[LabelString, str], path) -> None:
    """Write one page label to a UTF-8 text file."""
    from pathlib import Path

    Path(path).write_text(_label_text(label), encoding="utf-8")


def read_label_file(path) -> str:
    from pathlib import Path

    return Path(path).read_text(encoding="utf-8")


def generate_synthetic_page(
    seed: int,
    profile: SyntheticProfile = DEFAULT_PROFILE,
    *,
    page_id: Optional[str] = None,
    page_index: int = 0,
) -> PageTranscript:
    """Generate a deterministic synthetic list page.

    The first record is always a head; each following record starts a new
    household with probability 1/household_size_mean. Output is identical
    for identical (seed, profile).
    """
    rng = random.Random(seed)
    n_rows = rng.randint(profile.min_rows, profile.max_rows)
    head_p = 1.0 / profile.household_size_mean
    records = []
    for row in range(n_rows):
        head = row == 0 or rng.random() < head_p
        records.append(sample_record(rng, profile, head))
    return PageTranscript(
        tuple(records),
        page_id=page_id if page_id is not None else f"synthetic-{seed}",
        page_index_in_register=page_index,
    )
