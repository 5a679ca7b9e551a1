"""BMES tag scheme: label sets, BIO conversion, entity extraction, scoring.

Entities are contiguous token spans tagged S-T (singleton) or
B-T M-T* E-T. Ill-formed sequences are repaired by dropping unclosed or
inconsistent spans; a close is never invented. Repairs are counted so
evaluation can report them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ContractError, ParseError

BMES_PREFIXES = ("B", "M", "E", "S")


class Entity(NamedTuple):
    start: int
    end: int  # inclusive
    etype: str


def split_tag(tag: str):
    """'B-PER' -> ('B', 'PER'); 'O' -> ('O', None); None if malformed."""
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in ("B", "M", "E", "S", "I"):
        return tag[0], tag[2:]
    return None


@dataclass(frozen=True)
class LabelSet:
    """Closed tag inventory for a fixed ordered list of entity types.

    Index 0 is always O; each type then contributes B-, M-, E-, S- in
    that order, so the mapping is a bijection determined entirely by
    entity_types."""

    entity_types: tuple[str, ...]
    tags: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        types = tuple(self.entity_types)
        if len(set(types)) != len(types):
            raise ContractError(f"duplicate entity types: {types}")
        for t in types:
            if not t or "-" in t or any(c.isspace() for c in t):
                raise ContractError(f"bad entity type name: {t!r}")
        tags = ["O"]
        for t in types:
            tags.extend(f"{p}-{t}" for p in BMES_PREFIXES)
        object.__setattr__(self, "entity_types", types)
        object.__setattr__(self, "tags", tuple(tags))

    @classmethod
    def from_tags(cls, tags) -> "LabelSet":
        """Derive a label set from observed tags (types sorted for determinism)."""
        types = set()
        for tag in tags:
            parts = split_tag(tag)
            if parts is None:
                raise ContractError(f"malformed tag: {tag!r}")
            if parts[1] is not None:
                types.add(parts[1])
        return cls(tuple(sorted(types)))

    def __len__(self):
        return len(self.tags)

    def index(self, tag: str) -> int:
        try:
            return self.tags.index(tag)
        except ValueError:
            raise ContractError(f"tag {tag!r} not in label set {self.entity_types}") from None

    def tag(self, idx: int) -> str:
        return self.tags[idx]

    def encode(self, tags) -> np.ndarray:
        return np.array([self.index(t) for t in tags], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tags[int(i)] for i in ids]


@dataclass
class TagSequence:
    tags: list[int]
    valid: bool


def bio_to_bmes(tags: list[str]) -> tuple[list[str], int]:
    """Convert one BIO sentence to BMES. Orphan I- tags (no open span of
    the same type) are dropped to O and counted as repairs."""
    n = len(tags)
    out = ["O"] * n
    repairs = 0
    i = 0
    while i < n:
        parts = split_tag(tags[i])
        if parts is None:
            raise ParseError(f"malformed BIO tag {tags[i]!r} at token {i}")
        prefix, etype = parts
        if prefix == "O":
            i += 1
            continue
        if prefix in ("M", "E", "S"):
            raise ParseError(f"tag {tags[i]!r} at token {i} is not BIO")
        if prefix == "I":
            # continuation with nothing to continue
            repairs += 1
            i += 1
            continue
        # prefix == "B": consume the span
        j = i + 1
        while j < n:
            nxt = split_tag(tags[j])
            if nxt is None:
                raise ParseError(f"malformed BIO tag {tags[j]!r} at token {j}")
            if nxt[0] == "I" and nxt[1] == etype:
                j += 1
            else:
                break
        length = j - i
        if length == 1:
            out[i] = f"S-{etype}"
        else:
            out[i] = f"B-{etype}"
            for m in range(i + 1, j - 1):
                out[m] = f"M-{etype}"
            out[j - 1] = f"E-{etype}"
        i = j
    return out, repairs


def scan_entities(tags: list[str]) -> tuple[list[Entity], int]:
    """Left-to-right scan returning well-formed spans plus a repair count.

    A span attempt that breaks (B- followed by neither M- nor E- of the
    same type, or an orphan M-/E-) is dropped and counted; scanning
    resumes at the breaking position, so [B-PER, B-PER, E-PER] yields
    the (1, 2, PER) entity with one repair."""
    entities: list[Entity] = []
    repairs = 0
    n = len(tags)
    i = 0
    while i < n:
        parts = split_tag(tags[i])
        if parts is None or parts[0] == "I":
            raise ContractError(f"tag {tags[i]!r} at token {i} is not BMES")
        prefix, etype = parts
        if prefix == "O":
            i += 1
        elif prefix == "S":
            entities.append(Entity(i, i, etype))
            i += 1
        elif prefix in ("M", "E"):
            repairs += 1
            i += 1
        else:  # B: walk M* looking for the close
            j = i + 1
            while j < n and tags[j] == f"M-{etype}":
                j += 1
            if j < n and tags[j] == f"E-{etype}":
                entities.append(Entity(i, j, etype))
                i = j + 1
            else:
                repairs += 1
                i = j  # resume at the tag that broke the span
    return entities, repairs


def extract_entities(tags: list[str]) -> list[Entity]:
    return scan_entities(tags)[0]


def validate_bmes(tags: list[str]) -> list[int]:
    """Indices where the BMES transition discipline is violated.

    Position 0 must start a sequence (O, B-, S-); inside, B-T/M-T must
    be followed by M-T/E-T and O/E/S by O/B/S; a trailing B or M flags
    the final index because the span cannot close."""
    bad: set[int] = set()
    n = len(tags)
    parsed = []
    for i, tag in enumerate(tags):
        parts = split_tag(tag)
        if parts is None or parts[0] == "I":
            raise ContractError(f"tag {tag!r} at token {i} is not BMES")
        parsed.append(parts)
    if n == 0:
        return []
    if parsed[0][0] in ("M", "E"):
        bad.add(0)
    for i in range(1, n):
        pp, pt = parsed[i - 1]
        cp, ct = parsed[i]
        if pp in ("B", "M"):
            ok = cp in ("M", "E") and ct == pt
        else:  # O, E, S all close; next must open or stay outside
            ok = cp in ("O", "B", "S")
        if not ok:
            bad.add(i)
    if parsed[-1][0] in ("B", "M"):
        bad.add(n - 1)
    return sorted(bad)


def legal_transitions(label_set: LabelSet):
    """(start_ok, pair_ok, end_ok) boolean tables over tag indices, the
    same discipline validate_bmes checks, for constrained decoding."""
    K = len(label_set)
    parsed = [split_tag(t) for t in label_set.tags]
    start_ok = np.array([p[0] in ("O", "B", "S") for p in parsed])
    end_ok = np.array([p[0] in ("O", "E", "S") for p in parsed])
    pair_ok = np.zeros((K, K), dtype=bool)
    for a, (ap, at) in enumerate(parsed):
        for b, (bp, bt) in enumerate(parsed):
            if ap in ("B", "M"):
                pair_ok[a, b] = bp in ("M", "E") and bt == at
            else:
                pair_ok[a, b] = bp in ("O", "B", "S")
    return start_ok, pair_ok, end_ok


@dataclass
class PrfScores:
    precision: float
    recall: float
    f1: float
    per_type: dict[str, tuple[float, float, float]]


def _prf(correct: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    # empty vs empty counts as a perfect match; an empty side alone scores 0
    if n_pred == 0 and n_gold == 0:
        return 1.0, 1.0, 1.0
    p = correct / n_pred if n_pred else 0.0
    r = correct / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def entity_prf(pred, gold) -> PrfScores:
    """Exact-match precision/recall/F1 over entity sets, micro overall
    plus a per-type breakdown."""
    pred = set(pred)
    gold = set(gold)
    p, r, f1 = _prf(len(pred & gold), len(pred), len(gold))
    per_type = {}
    for etype in sorted({e.etype for e in pred} | {e.etype for e in gold}):
        pt = {e for e in pred if e.etype == etype}
        gt = {e for e in gold if e.etype == etype}
        per_type[etype] = _prf(len(pt & gt), len(pt), len(gt))
    return PrfScores(p, r, f1, per_type)
