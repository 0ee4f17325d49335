"""
Corpus - procedure instances, tokenization, entity mentions and location candidates

Instances are read from JSONL (one paragraph per line); predictions are
written as the six-column TSV consumed by the evaluators.
"""

import csv
import json
import os
import re
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import List, NamedTuple, Optional

import pandas as pd

from error_handler import ErrorCategory, SGRError

UNKNOWN_LOCATION = "?"
NO_LOCATION = "-"

SPLITS = ("train", "dev", "test")


class StateLabel(Enum):
    """Per-step entity state"""
    O_A = "O_A"      # not yet existing
    O_B = "O_B"      # no longer existing
    EXIST = "E"
    MOVE = "M"
    CREATE = "C"
    DESTROY = "D"

    @property
    def exists_after(self):
        """Whether the entity exists after a step carrying this label"""
        return self in (StateLabel.CREATE, StateLabel.EXIST, StateLabel.MOVE)

    @classmethod
    def parse(cls, text):
        try:
            return cls(text)
        except ValueError:
            raise SGRError("unknown state label", ErrorCategory.MALFORMED_INPUT, label=text)


ACTIONS = ("NONE", "CREATE", "DESTROY", "MOVE")

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*|'[a-z]+|[^\sa-z0-9]")

PREPOSITIONS = ("in", "into", "from", "to", "on", "at", "through", "inside")

DETERMINERS = frozenset({
    "the", "a", "an", "its", "their", "his", "her", "our", "your", "my", "this",
    "that", "these", "those", "some", "each", "every", "another", "other", "any",
})

# Function words never taken as location candidates
CLOSED_CLASS = DETERMINERS | frozenset(PREPOSITIONS) | frozenset({
    "it", "they", "them", "he", "she", "we", "you", "i", "which", "who", "what",
    "and", "or", "but", "so", "then", "than", "because", "while", "when", "where",
    "is", "are", "was", "were", "be", "been", "being", "has", "have", "had",
    "do", "does", "did", "can", "could", "will", "would", "may", "might", "must",
    "should", "up", "down", "out", "away", "off", "back", "again", "also", "there",
    "here", "now", "over", "under", "by", "with", "as", "of", "for", "about",
    "more", "most", "less", "very", "not", "no", "all", "both", "many", "much",
    "onto", "toward", "towards", "around", "through", "inside", "outside", "within",
    "between", "after", "before", "during", "until", "into", "together", "s",
})


class MentionSpan(NamedTuple):
    """Token span [start, end) of an entity mention"""
    entity: str
    start: int
    end: int


@dataclass
class ProcedureInstance:
    """
    One paragraph with its tracked entities and optional gold annotation

    gold_states / gold_locations are per entity, one value per sentence.
    gold_initial_locations holds the location before the first sentence.
    """
    para_id: str
    sentences: List[str]
    entities: List[str]
    prompt: Optional[str] = None
    gold_states: Optional[List[List[str]]] = None
    gold_locations: Optional[List[List[str]]] = None
    gold_initial_locations: Optional[List[str]] = None
    location_candidates: Optional[List[str]] = None
    knowledge_triples: Optional[List[List[str]]] = None
    mentions: Optional[List[List[List]]] = None

    REQUIRED = ("para_id", "sentences", "entities")

    @property
    def num_steps(self):
        return len(self.sentences)

    @property
    def num_entities(self):
        return len(self.entities)

    @property
    def has_gold(self):
        return self.gold_states is not None and self.gold_locations is not None

    def sentence_tokens(self):
        return [tokenize(s) for s in self.sentences]

    def prompt_tokens(self):
        return tokenize(self.prompt) if self.prompt else []

    def sentence_mentions(self):
        """Entity mentions per sentence (cached preprocess output when present)"""
        if self.mentions is not None:
            return [[MentionSpan(str(e), int(s), int(t)) for e, s, t in spans] for spans in self.mentions]
        return [match_entities(tokens, self.entities) for tokens in self.sentence_tokens()]

    def validate(self, line=None):
        """Check the length contracts of the gold annotation"""
        where = {"para_id": self.para_id}
        if line is not None:
            where["line"] = line
        if self.num_steps == 0:
            raise SGRError("paragraph has no sentences", ErrorCategory.CONTRACT, **where)
        if not isinstance(self.sentences, list) or not all(isinstance(s, str) for s in self.sentences):
            raise SGRError("sentences must be a list of strings", ErrorCategory.MALFORMED_INPUT, **where)
        if not isinstance(self.entities, list) or not all(isinstance(e, str) for e in self.entities):
            raise SGRError("entities must be a list of strings", ErrorCategory.MALFORMED_INPUT, **where)
        for name in ("gold_states", "gold_locations"):
            seqs = getattr(self, name)
            if seqs is None:
                continue
            if len(seqs) != self.num_entities:
                raise SGRError(f"{name} needs one sequence per entity", ErrorCategory.CONTRACT,
                               field=name, expected=self.num_entities, got=len(seqs), **where)
            for entity, seq in zip(self.entities, seqs):
                if len(seq) != self.num_steps:
                    raise SGRError(f"{name} sequence length differs from T", ErrorCategory.CONTRACT,
                                   field=name, entity=entity, expected=self.num_steps, got=len(seq), **where)
        if self.gold_states is not None:
            for seq in self.gold_states:
                for label in seq:
                    StateLabel.parse(label)
        if self.gold_initial_locations is not None and len(self.gold_initial_locations) != self.num_entities:
            raise SGRError("gold_initial_locations needs one value per entity", ErrorCategory.CONTRACT,
                           field="gold_initial_locations", **where)
        return self

    def to_dict(self):
        return {key: value for key, value in asdict(self).items() if value is not None}

    @classmethod
    def from_dict(cls, obj, line=None):
        if not isinstance(obj, dict):
            raise SGRError("instance must be a JSON object", ErrorCategory.MALFORMED_INPUT, line=line)
        for name in cls.REQUIRED:
            if name not in obj:
                raise SGRError(f"missing required field '{name}'", ErrorCategory.MISSING_FIELD,
                               field=name, line=line)
        known = set(cls.__dataclass_fields__)
        values = {key: value for key, value in obj.items() if key in known}
        values["para_id"] = str(values["para_id"])
        return cls(**values).validate(line)


# ── tokenization and matching ────────────────────────────────────────

def tokenize(text):
    """
    Lowercase rule tokenizer

    Words (hyphenated words kept whole), clitics such as 's and single
    punctuation characters become separate tokens.
    """
    if not text:
        return []
    return _TOKEN_RE.findall(text.lower().replace("’", "'"))


def entity_aliases(entity):
    """Token sequences of the slash-separated aliases, longest first"""
    aliases = [tokenize(alias) for alias in entity.split("/")]
    aliases = [a for a in aliases if a]
    return sorted(aliases, key=len, reverse=True)


def match_entities(sentence_tokens, entities):
    """
    Find entity mentions by exact token-sequence matching

    Args:
        sentence_tokens (list): Tokenized sentence
        entities (list): Entity strings (aliases separated by '/')

    Returns:
        list: MentionSpan for every non-overlapping maximal match of each
        entity, ordered by start position
    """
    spans = []
    n = len(sentence_tokens)
    for entity in entities:
        aliases = entity_aliases(entity)
        i = 0
        while i < n:
            for alias in aliases:
                end = i + len(alias)
                if end <= n and sentence_tokens[i:end] == alias:
                    spans.append(MentionSpan(entity, i, end))
                    i = end
                    break
            else:
                i += 1
    order = {entity: k for k, entity in enumerate(entities)}
    return sorted(spans, key=lambda span: (span.start, order[span.entity]))


def _is_content(token):
    return token.isalpha() and token not in CLOSED_CLASS


def _heuristic_candidates(tokens):
    found = []
    n = len(tokens)
    for i, tok in enumerate(tokens):
        if tok not in PREPOSITIONS:
            continue
        j = i + 1
        while j < n and tokens[j] in DETERMINERS:
            j += 1
        if j < n and _is_content(tokens[j]):
            found.append(tokens[j])
            if j + 1 < n and _is_content(tokens[j + 1]):
                found.append(f"{tokens[j]} {tokens[j + 1]}")
    words = [t for t in tokens if t.isalnum()]
    if words and _is_content(words[-1]):
        found.append(words[-1])
    return found


def _gold_spans(instance):
    spans = []
    for seq in instance.gold_locations or []:
        spans.extend(seq)
    spans.extend(instance.gold_initial_locations or [])
    return [" ".join(tokenize(s)) for s in spans if s not in (UNKNOWN_LOCATION, NO_LOCATION)]


def generate_location_candidates(instance, split):
    """
    Location candidates of one paragraph

    Heuristic spans (word or bigram after a preposition, sentence-final
    content word) excluding entity names, then file-provided candidates,
    then, on train/dev only, gold locations the first two missed.

    Args:
        instance (ProcedureInstance): The paragraph
        split (str): train, dev or test

    Returns:
        list: Deduplicated candidate strings in first-seen order
    """
    if split not in SPLITS:
        raise SGRError("unknown split", ErrorCategory.CONTRACT, split=split)
    entity_names = {" ".join(alias) for e in instance.entities for alias in entity_aliases(e)}
    ordered = []
    for tokens in instance.sentence_tokens():
        ordered.extend(c for c in _heuristic_candidates(tokens) if c not in entity_names)
    ordered.extend(" ".join(tokenize(c)) for c in instance.location_candidates or [])
    if split in ("train", "dev"):
        ordered.extend(_gold_spans(instance))
    seen = set()
    candidates = []
    for candidate in ordered:
        if candidate and candidate not in seen:
            seen.add(candidate)
            candidates.append(candidate)
    return candidates


def prepare_instance(instance, split):
    """Attach location candidates and per-sentence mentions (preprocess output)"""
    mentions = [[[m.entity, m.start, m.end] for m in match_entities(tokens, instance.entities)]
                for tokens in instance.sentence_tokens()]
    return replace(instance, location_candidates=generate_location_candidates(instance, split),
                   mentions=mentions)


# ── file formats ─────────────────────────────────────────────────────

def load_instances(path):
    """
    Read a JSONL file of instances

    Args:
        path (str): JSONL file, one instance per line

    Returns:
        list: ProcedureInstance objects
    """
    if not os.path.exists(path):
        raise SGRError("instance file not found", ErrorCategory.IO, path=path)
    instances = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SGRError(f"malformed JSON: {e.msg}", ErrorCategory.MALFORMED_INPUT,
                               path=path, line=line_no)
            instances.append(ProcedureInstance.from_dict(obj, line=line_no))
    print(f"[Corpus] Loaded {len(instances)} instance(s) from {path}")
    return instances


def save_instances(instances, path):
    """Write instances as JSONL"""
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        for instance in instances:
            f.write(json.dumps(instance.to_dict(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class PredictionRecord:
    """One (paragraph, step, entity) row of the prediction TSV"""
    para_id: str
    step: int
    entity: str
    action: str
    before: str
    after: str


TSV_COLUMNS = ["para_id", "step", "entity", "action", "before", "after"]


def save_predictions(records, path):
    """Write records as headerless TSV, one row per (paragraph, step, entity)"""
    _ensure_parent(path)
    frame = pd.DataFrame([asdict(r) for r in records], columns=TSV_COLUMNS)
    frame.to_csv(path, sep="\t", header=False, index=False, quoting=csv.QUOTE_NONE)


def load_predictions(path):
    """
    Read a prediction (or gold) TSV

    Returns:
        list: PredictionRecord rows in file order
    """
    if not os.path.exists(path):
        raise SGRError("prediction file not found", ErrorCategory.IO, path=path)
    try:
        frame = pd.read_csv(path, sep="\t", header=None, names=TSV_COLUMNS, dtype=str,
                            keep_default_na=False, na_filter=False, quoting=csv.QUOTE_NONE)
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        raise SGRError(f"malformed TSV: {e}", ErrorCategory.MALFORMED_INPUT, path=path)

    records = []
    for line_no, row in enumerate(frame.itertuples(index=False), start=1):
        if any(not isinstance(value, str) or value == "" for value in row):
            raise SGRError("TSV row needs six non-empty fields", ErrorCategory.MALFORMED_INPUT,
                           path=path, line=line_no)
        if row.action not in ACTIONS:
            raise SGRError("unknown action", ErrorCategory.MALFORMED_INPUT,
                           path=path, line=line_no, action=row.action)
        try:
            step = int(row.step)
        except ValueError:
            raise SGRError("step must be an integer", ErrorCategory.MALFORMED_INPUT,
                           path=path, line=line_no)
        records.append(PredictionRecord(row.para_id, step, row.entity, row.action, row.before, row.after))
    return records


def _ensure_parent(path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
