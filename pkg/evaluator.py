"""
Evaluator - ProPara document- and sentence-level metrics, Recipes location F1

All functions take PredictionRecord rows (prediction TSV and gold TSV share
the schema) and are independent of row order.
"""

import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict

import pandas as pd

from app_logger import log_missing_entities
from corpus import NO_LOCATION, UNKNOWN_LOCATION

QUESTIONS = ("inputs", "outputs", "conversions", "moves")
EVENTS = {"created": "CREATE", "destroyed": "DESTROY", "moved": "MOVE"}
CATEGORIES = ("cat1", "cat2", "cat3")


def safe_ratio(hits, denominator, other_size):
    """hits / denominator; an empty denominator scores 1 only if the other side is empty too"""
    if denominator == 0:
        return 1.0 if other_size == 0 else 0.0
    return hits / denominator


def f1_score(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def set_scores(predicted, gold):
    """(precision, recall) of two tuple sets"""
    hits = len(predicted & gold)
    return safe_ratio(hits, len(predicted), len(gold)), safe_ratio(hits, len(gold), len(predicted))


def group_rows(rows):
    """para_id -> entity -> rows sorted by step"""
    grouped = defaultdict(lambda: defaultdict(list))
    for row in rows:
        grouped[row.para_id][row.entity].append(row)
    for entities in grouped.values():
        for entity_rows in entities.values():
            entity_rows.sort(key=lambda r: r.step)
    return grouped


def _missing_entities(pred_groups, gold_groups):
    missing = [(para_id, entity)
               for para_id, entities in sorted(gold_groups.items())
               for entity in sorted(entities)
               if entity not in pred_groups.get(para_id, {})]
    if missing:
        log_missing_entities(missing)
    return missing


# ── document level ───────────────────────────────────────────────────

def paragraph_answers(entities):
    """
    Q1-Q4 answer sets of one paragraph

    Args:
        entities (dict): entity -> rows sorted by step

    Returns:
        dict: question -> set of answer tuples
    """
    inputs, outputs, moves = set(), set(), set()
    destroyed_at = defaultdict(set)
    created_at = defaultdict(set)
    for entity, rows in entities.items():
        if not rows:
            continue
        existed_before = rows[0].before != NO_LOCATION
        exists_at_end = rows[-1].after != NO_LOCATION
        actions = {r.action for r in rows}
        if existed_before and "DESTROY" in actions and not exists_at_end:
            inputs.add(entity)
        if exists_at_end and not existed_before:
            outputs.add(entity)
        for r in rows:
            if r.action == "MOVE":
                moves.add((entity, r.step, r.before, r.after))
            elif r.action == "DESTROY":
                destroyed_at[(r.step, r.before)].add(entity)
            elif r.action == "CREATE":
                created_at[(r.step, r.after)].add(entity)
    conversions = {(step, location, frozenset(destroyed_at[(step, location)]), frozenset(created))
                   for (step, location), created in created_at.items()
                   if destroyed_at.get((step, location))}
    return {"inputs": inputs, "outputs": outputs, "conversions": conversions, "moves": moves}


@dataclass
class QuestionScore:
    precision: float
    recall: float
    f1: float


@dataclass
class DocLevelReport:
    """Per-question scores averaged over paragraphs; overall_f1 is their macro-average"""
    questions: Dict[str, QuestionScore] = field(default_factory=dict)
    num_paragraphs: int = 0

    @property
    def overall_precision(self):
        return sum(q.precision for q in self.questions.values()) / len(QUESTIONS)

    @property
    def overall_recall(self):
        return sum(q.recall for q in self.questions.values()) / len(QUESTIONS)

    @property
    def overall_f1(self):
        return sum(q.f1 for q in self.questions.values()) / len(QUESTIONS)

    def to_dict(self):
        return {
            "questions": {name: asdict(score) for name, score in self.questions.items()},
            "overall_precision": self.overall_precision,
            "overall_recall": self.overall_recall,
            "overall_f1": self.overall_f1,
            "num_paragraphs": self.num_paragraphs,
        }

    def table(self):
        frame = pd.DataFrame({name: asdict(score) for name, score in self.questions.items()}).T
        frame.loc["overall"] = [self.overall_precision, self.overall_recall, self.overall_f1]
        return frame


def eval_document_level(pred_rows, gold_rows):
    """
    Q1 inputs, Q2 outputs, Q3 conversions, Q4 moves

    Precision and recall are computed per gold paragraph and averaged; each
    question's F1 is taken from the averaged precision and recall.

    Args:
        pred_rows (list): Predicted PredictionRecord rows
        gold_rows (list): Gold PredictionRecord rows

    Returns:
        DocLevelReport: Scores in [0, 1]
    """
    pred_groups, gold_groups = group_rows(pred_rows), group_rows(gold_rows)
    _missing_entities(pred_groups, gold_groups)
    paragraphs = sorted(gold_groups)
    sums = {q: [0.0, 0.0] for q in QUESTIONS}
    for para_id in paragraphs:
        predicted = paragraph_answers(pred_groups.get(para_id, {}))
        gold = paragraph_answers(gold_groups[para_id])
        for q in QUESTIONS:
            p, r = set_scores(predicted[q], gold[q])
            sums[q][0] += p
            sums[q][1] += r

    report = DocLevelReport(num_paragraphs=len(paragraphs))
    for q in QUESTIONS:
        if paragraphs:
            p, r = sums[q][0] / len(paragraphs), sums[q][1] / len(paragraphs)
        else:
            p = r = 1.0
        report.questions[q] = QuestionScore(p, r, f1_score(p, r))
    return report


# ── sentence level ───────────────────────────────────────────────────

def _event_location(event, row):
    if event == "created":
        return row.after
    if event == "destroyed":
        return row.before
    return (row.before, row.after)


@dataclass
class SentLevelReport:
    """Cat-1 (whether), Cat-2 (when), Cat-3 (where) accuracies"""
    correct: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    asked: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))

    def accuracy(self, category):
        asked = self.asked[category]
        return self.correct[category] / asked if asked else 1.0

    @property
    def macro(self):
        return sum(self.accuracy(c) for c in CATEGORIES) / len(CATEGORIES)

    @property
    def micro(self):
        asked = sum(self.asked.values())
        return sum(self.correct.values()) / asked if asked else 1.0

    def to_dict(self):
        result = {c: self.accuracy(c) for c in CATEGORIES}
        result.update({"macro": self.macro, "micro": self.micro,
                       "questions": dict(self.asked), "correct": dict(self.correct)})
        return result

    def table(self):
        rows = [{"category": c, "asked": self.asked[c], "correct": self.correct[c],
                 "accuracy": self.accuracy(c)} for c in CATEGORIES]
        rows.append({"category": "macro", "accuracy": self.macro})
        rows.append({"category": "micro", "asked": sum(self.asked.values()),
                     "correct": sum(self.correct.values()), "accuracy": self.micro})
        return pd.DataFrame(rows).set_index("category")


def eval_sentence_level(pred_rows, gold_rows):
    """
    Whether / when / where each entity is created, destroyed and moved

    Cat-1 is asked for every (entity, event type); Cat-2 and Cat-3 only when
    the gold side has the event, and compare the first event of each side.

    Returns:
        SentLevelReport: Counts and accuracies
    """
    pred_groups, gold_groups = group_rows(pred_rows), group_rows(gold_rows)
    _missing_entities(pred_groups, gold_groups)
    report = SentLevelReport()
    for para_id, entities in sorted(gold_groups.items()):
        for entity, gold_entity_rows in sorted(entities.items()):
            pred_entity_rows = pred_groups.get(para_id, {}).get(entity, [])
            for event, action in EVENTS.items():
                gold_events = [r for r in gold_entity_rows if r.action == action]
                pred_events = [r for r in pred_entity_rows if r.action == action]
                report.asked["cat1"] += 1
                report.correct["cat1"] += int(bool(gold_events) == bool(pred_events))
                if not gold_events:
                    continue
                report.asked["cat2"] += 1
                report.asked["cat3"] += 1
                if pred_events:
                    report.correct["cat2"] += int(pred_events[0].step == gold_events[0].step)
                    report.correct["cat3"] += int(_event_location(event, pred_events[0])
                                                  == _event_location(event, gold_events[0]))
    return report


# ── recipes ──────────────────────────────────────────────────────────

@dataclass
class RecipesReport:
    precision: float
    recall: float
    f1: float
    predicted: int
    gold: int

    def to_dict(self):
        return asdict(self)


def location_changes(rows):
    """(para_id, entity, step, new location) of every MOVE / CREATE with a known location"""
    return {(r.para_id, r.entity, r.step, r.after) for r in rows
            if r.action in ("MOVE", "CREATE") and r.after not in (UNKNOWN_LOCATION, NO_LOCATION)}


def eval_recipes(pred_rows, gold_rows):
    """Corpus-level P/R/F1 over location-change triples"""
    predicted, gold = location_changes(pred_rows), location_changes(gold_rows)
    p, r = set_scores(predicted, gold)
    return RecipesReport(p, r, f1_score(p, r), len(predicted), len(gold))


# ── reporting ────────────────────────────────────────────────────────

TASKS = ("propara", "recipes", "all")


def evaluate(pred_rows, gold_rows, task="propara"):
    """
    Compute the reports of a task (propara, recipes or all)

    Returns:
        dict: report name -> DocLevelReport / SentLevelReport / RecipesReport
    """
    reports = {}
    if task in ("propara", "all"):
        reports["document_level"] = eval_document_level(pred_rows, gold_rows)
        reports["sentence_level"] = eval_sentence_level(pred_rows, gold_rows)
    if task in ("recipes", "all"):
        reports["recipes"] = eval_recipes(pred_rows, gold_rows)
    return reports


def reports_to_dict(reports):
    return {name: report.to_dict() for name, report in reports.items()}


def format_reports(reports):
    """Human-readable tables of evaluate() output"""
    fmt = "{:.4f}".format
    sections = []
    if "document_level" in reports:
        sections.append("Document level\n" + reports["document_level"].table().to_string(float_format=fmt))
    if "sentence_level" in reports:
        sections.append("Sentence level\n" + reports["sentence_level"].table().to_string(
            float_format=fmt, na_rep=""))
    if "recipes" in reports:
        sections.append("Recipes\n" + pd.DataFrame([reports["recipes"].to_dict()]).to_string(
            index=False, float_format=fmt))
    return "\n\n".join(sections)


def save_report(report, path):
    """Write a reports_to_dict() result as JSON"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
