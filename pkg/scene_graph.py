"""
Scene Graph - the complete concept graph of a paragraph and its per-step scenes

A CompleteGraph holds every concept (entities, location candidates, the
unknown-location node, the Global node and knowledge concepts) with the
static typed edges. A SceneGraph is one timestep's view over it: which
concepts exist and where each existing entity is located.
"""

import json
import os
from dataclasses import dataclass, replace
from enum import Enum
from typing import Tuple

import numpy as np

from app_logger import log_malformed_triples
from corpus import (NO_LOCATION, UNKNOWN_LOCATION, StateLabel, entity_aliases,
                    generate_location_candidates, match_entities, tokenize)
from error_handler import ErrorCategory, SGRError

LOCATE_IN = "LocateIn"
ENT_ENT = "EntEnt"
LOC_LOC = "LocLoc"
BASE_RELATIONS = (LOCATE_IN, ENT_ENT, LOC_LOC)

GLOBAL_SURFACE = "[GLOBAL]"
UNKLOC_SURFACE = "[UNKLOC]"


class NodeKind(Enum):
    ENTITY = "Entity"
    LOCATION = "Location"
    KNOWLEDGE = "Knowledge"
    GLOBAL = "Global"
    UNKLOC = "UnkLoc"


@dataclass(frozen=True)
class ConceptNode:
    id: int
    surface: str
    kind: NodeKind


@dataclass(frozen=True)
class CompleteGraph:
    """
    Static concept universe of one paragraph

    Node layout: entities, location candidates, UnkLoc, Global, then
    knowledge concepts. static_edges holds (i, j, relation index) and never
    uses LocateIn (index 0).
    """
    nodes: Tuple[ConceptNode, ...]
    relation_vocab: Tuple[str, ...]
    static_edges: frozenset
    num_entities: int
    num_locations: int

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def entity_ids(self):
        return list(range(self.num_entities))

    @property
    def unkloc_id(self):
        return self.num_entities + self.num_locations

    @property
    def global_id(self):
        return self.unkloc_id + 1

    @property
    def location_columns(self):
        """Node ids of the locate_in columns; the last one is UnkLoc"""
        return list(range(self.num_entities, self.unkloc_id + 1))

    @property
    def location_names(self):
        """Column surfaces with UnkLoc rendered as '?'"""
        names = [self.nodes[i].surface for i in self.location_columns[:-1]]
        return names + [UNKNOWN_LOCATION]

    @property
    def entity_names(self):
        return [self.nodes[i].surface for i in self.entity_ids]

    def relation_name(self, index):
        return self.relation_vocab[index]

    def knowledge_ids(self):
        return [n.id for n in self.nodes if n.kind == NodeKind.KNOWLEDGE]


@dataclass
class SceneGraph:
    """
    One timestep's world

    mask: (M,) 0/1 presence of every concept
    locate_in: (N_entities, N_locations + 1) 0/1 location of each entity,
    last column is UnkLoc
    """
    mask: np.ndarray
    locate_in: np.ndarray

    def entity_mask(self, num_entities):
        return self.mask[:num_entities]

    def location_column(self, entity):
        """Column index of the entity's location, or None when absent"""
        cols = np.flatnonzero(self.locate_in[entity])
        return int(cols[0]) if cols.size else None

    def copy(self):
        return SceneGraph(self.mask.copy(), self.locate_in.copy())

    def equals(self, other):
        return (np.array_equal(self.mask, other.mask)
                and np.array_equal(self.locate_in, other.locate_in))

    def validate(self, graph):
        """Check the mask / locate_in coupling"""
        n, cols = graph.num_entities, graph.num_locations + 1
        if self.mask.shape != (graph.num_nodes,) or self.locate_in.shape != (n, cols):
            raise SGRError("scene graph shape does not match the complete graph",
                           ErrorCategory.SHAPE_MISMATCH,
                           mask=self.mask.shape, locate_in=self.locate_in.shape)
        if not np.all(self.mask[n:] == 1):
            raise SGRError("non-entity concepts must always be present", ErrorCategory.CONTRACT)
        row_sums = self.locate_in.sum(axis=1)
        if np.any(row_sums > 1) or np.any(row_sums != self.mask[:n]):
            bad = int(np.flatnonzero((row_sums > 1) | (row_sums != self.mask[:n]))[0])
            raise SGRError("entity location row must hold one location iff the entity exists",
                           ErrorCategory.CONTRACT, entity=graph.entity_names[bad])
        return self


def empty_scene(graph):
    """Scene with every entity masked out (the virtual-init input)"""
    mask = np.ones(graph.num_nodes, dtype=np.int8)
    mask[:graph.num_entities] = 0
    locate_in = np.zeros((graph.num_entities, graph.num_locations + 1), dtype=np.int8)
    return SceneGraph(mask, locate_in)


# ── construction ─────────────────────────────────────────────────────

def _co_mention_pairs(token_lists, names, offset):
    pairs = set()
    for tokens in token_lists:
        present = sorted({names.index(m.entity) for m in match_entities(tokens, names)})
        for a_pos, a in enumerate(present):
            for b in present[a_pos + 1:]:
                pairs.add((offset + a, offset + b))
    return pairs


def build_complete_graph(instance, candidates):
    """
    Build the complete graph of a paragraph

    Args:
        instance (ProcedureInstance): The paragraph
        candidates (list): Location candidate strings

    Returns:
        CompleteGraph: entities + candidates + UnkLoc + Global, with EntEnt
        and LocLoc edges between concepts co-mentioned in a sentence
    """
    if instance.num_entities == 0:
        raise SGRError("paragraph has no tracked entities", ErrorCategory.CONTRACT,
                       para_id=instance.para_id)
    nodes = [ConceptNode(i, e, NodeKind.ENTITY) for i, e in enumerate(instance.entities)]
    offset = len(nodes)
    nodes += [ConceptNode(offset + i, c, NodeKind.LOCATION) for i, c in enumerate(candidates)]
    nodes.append(ConceptNode(len(nodes), UNKLOC_SURFACE, NodeKind.UNKLOC))
    nodes.append(ConceptNode(len(nodes), GLOBAL_SURFACE, NodeKind.GLOBAL))

    token_lists = instance.sentence_tokens()
    rel = {name: k for k, name in enumerate(BASE_RELATIONS)}
    edges = {(i, j, rel[ENT_ENT]) for i, j in _co_mention_pairs(token_lists, list(instance.entities), 0)}
    edges |= {(i, j, rel[LOC_LOC]) for i, j in _co_mention_pairs(token_lists, list(candidates), offset)}

    return CompleteGraph(
        nodes=tuple(nodes),
        relation_vocab=BASE_RELATIONS,
        static_edges=frozenset(edges),
        num_entities=instance.num_entities,
        num_locations=len(candidates),
    )


def _surface_key(text):
    return " ".join(tokenize(text))


def _valid_triple(triple):
    return (isinstance(triple, (list, tuple)) and len(triple) == 3
            and all(isinstance(part, str) and part.strip() for part in triple))


def enhance_with_knowledge(graph, triples, source="triples"):
    """
    Add one hop of knowledge triples to the complete graph

    A triple is used when at least one endpoint matches a concept of the
    original graph on its lowercased token sequence, where an entity matches
    on any of its aliases. The other endpoint becomes a Knowledge node
    unless it already exists. Malformed triples are skipped and counted.

    Args:
        graph (CompleteGraph): Graph to enhance
        triples (list): (head, relation, tail) triples

    Returns:
        CompleteGraph: Enhanced graph (the input is unchanged)
    """
    nodes = list(graph.nodes)
    relations = list(graph.relation_vocab)
    edges = set(graph.static_edges)
    anchors = {}
    for node in graph.nodes:
        if node.kind == NodeKind.ENTITY:
            keys = {" ".join(alias) for alias in entity_aliases(node.surface)}
        elif node.kind == NodeKind.LOCATION:
            keys = {_surface_key(node.surface)}
        else:
            continue
        for key in keys:
            anchors.setdefault(key, []).append(node.id)
    knowledge = {n.surface: n.id for n in graph.nodes if n.kind == NodeKind.KNOWLEDGE}

    malformed = []
    for triple in triples or []:
        if not _valid_triple(triple):
            malformed.append(triple)
            continue
        head, relation, tail = (part.strip() for part in triple)
        head, tail = _surface_key(head), _surface_key(tail)
        if head not in anchors and tail not in anchors:
            continue

        def endpoint(surface):
            if surface in anchors:
                return anchors[surface]
            if surface not in knowledge:
                knowledge[surface] = len(nodes)
                nodes.append(ConceptNode(len(nodes), surface, NodeKind.KNOWLEDGE))
            return [knowledge[surface]]

        if relation == LOCATE_IN:
            malformed.append(triple)
            continue
        if relation not in relations:
            relations.append(relation)
        r = relations.index(relation)
        for i in endpoint(head):
            for j in endpoint(tail):
                if i != j:
                    edges.add((i, j, r))

    if malformed:
        log_malformed_triples(source, len(malformed), [str(t) for t in malformed[:5]])

    return replace(graph, nodes=tuple(nodes), relation_vocab=tuple(relations),
                   static_edges=frozenset(edges))


def load_triples(path):
    """
    Read a knowledge triples file (head<TAB>relation<TAB>tail per line)

    Returns:
        list: Triples; lines without exactly three fields are skipped
    """
    if not os.path.exists(path):
        raise SGRError("triples file not found", ErrorCategory.IO, path=path)
    triples, malformed = [], 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                malformed += 1
                continue
            triples.append(tuple(p.strip().lower() if k != 1 else p.strip() for k, p in enumerate(parts)))
    if malformed:
        log_malformed_triples(path, malformed)
    return triples


def graph_for_instance(instance, split, triples=None, use_knowledge=True):
    """
    Candidates -> complete graph -> knowledge enhancement for one paragraph

    Args:
        instance (ProcedureInstance): The paragraph
        split (str): train, dev or test (controls gold candidate injection)
        triples (list): Shared knowledge triples; the instance's own
            knowledge_triples are always added when use_knowledge is set
        use_knowledge (bool): Skip enhancement when False
    """
    candidates = generate_location_candidates(instance, split)
    graph = build_complete_graph(instance, candidates)
    if use_knowledge:
        combined = list(triples or []) + [tuple(t) if isinstance(t, list) else t
                                          for t in instance.knowledge_triples or []]
        if combined:
            graph = enhance_with_knowledge(graph, combined, source=instance.para_id)
    return graph


# ── gold scene graphs ────────────────────────────────────────────────

def _location_column(graph, location, entity, step, para_id):
    if location == UNKNOWN_LOCATION:
        return graph.num_locations
    names = graph.location_names[:-1]
    key = " ".join(tokenize(location))
    if key not in names:
        raise SGRError("gold location is not a location candidate", ErrorCategory.CONTRACT,
                       para_id=para_id, entity=entity, step=step, location=location)
    return names.index(key)


def initial_existence(states):
    """Whether an entity exists before step 1 given its state sequence"""
    first = StateLabel.parse(states[0])
    return first in (StateLabel.EXIST, StateLabel.MOVE, StateLabel.DESTROY)


def construct_gold_graphs(instance, graph):
    """
    Turn the gold state/location annotation into scene graphs y_0 .. y_T

    Returns:
        list: T + 1 SceneGraph objects
    """
    if not instance.has_gold:
        raise SGRError("instance has no gold annotation", ErrorCategory.CONTRACT,
                       para_id=instance.para_id)
    T, N = instance.num_steps, instance.num_entities
    masks = np.ones((T + 1, graph.num_nodes), dtype=np.int8)
    locate = np.zeros((T + 1, N, graph.num_locations + 1), dtype=np.int8)

    for e, entity in enumerate(instance.entities):
        states = [StateLabel.parse(s) for s in instance.gold_states[e]]
        locations = instance.gold_locations[e]
        exists = initial_existence(instance.gold_states[e])
        ever_existed = exists

        initial = None
        if instance.gold_initial_locations is not None:
            initial = instance.gold_initial_locations[e]
        column = None
        if exists:
            if initial in (None, NO_LOCATION):
                # Unannotated start: an Exist step keeps its location
                initial = locations[0] if states[0] == StateLabel.EXIST else UNKNOWN_LOCATION
            masks[0, e] = 1
            column = _location_column(graph, initial, entity, 0, instance.para_id)
            locate[0, e, column] = 1
        else:
            masks[0, e] = 0

        for t, (state, location) in enumerate(zip(states, locations), start=1):
            _check_transition(state, exists, ever_existed, entity, t, instance.para_id)
            now = state.exists_after
            if now and location == NO_LOCATION:
                raise SGRError("existing entity has no location", ErrorCategory.CONTRACT,
                               para_id=instance.para_id, entity=entity, step=t, state=state.value)
            if not now and location != NO_LOCATION:
                raise SGRError("non-existing entity has a location", ErrorCategory.CONTRACT,
                               para_id=instance.para_id, entity=entity, step=t, state=state.value,
                               location=location)
            masks[t, e] = 1 if now else 0
            previous, column = column, None
            if now:
                column = _location_column(graph, location, entity, t, instance.para_id)
                locate[t, e, column] = 1
            _check_location_change(state, previous, column, entity, t, instance.para_id)
            exists = now
            ever_existed = ever_existed or now

    scenes = [SceneGraph(masks[t], locate[t]) for t in range(T + 1)]
    for scene in scenes:
        scene.validate(graph)
    return scenes


def _check_transition(state, existed_before, ever_existed, entity, step, para_id):
    if existed_before:
        ok = state in (StateLabel.EXIST, StateLabel.MOVE, StateLabel.DESTROY)
    elif state == StateLabel.CREATE:
        ok = True
    elif state == StateLabel.O_A:
        ok = not ever_existed
    elif state == StateLabel.O_B:
        ok = ever_existed
    else:
        ok = False
    if not ok:
        raise SGRError("invalid state transition in gold annotation", ErrorCategory.CONTRACT,
                       para_id=para_id, entity=entity, step=step, state=state.value)


def _check_location_change(state, previous, column, entity, step, para_id):
    """A Move must change the location column and an Exist must keep it"""
    if state == StateLabel.MOVE and column == previous:
        raise SGRError("move does not change the location", ErrorCategory.CONTRACT,
                       para_id=para_id, entity=entity, step=step, state=state.value)
    if state == StateLabel.EXIST and column != previous:
        raise SGRError("exist changes the location", ErrorCategory.CONTRACT,
                       para_id=para_id, entity=entity, step=step, state=state.value)


# ── debugging dump ───────────────────────────────────────────────────

def dump_scene_graphs(graph, scenes, path, para_id=""):
    """Append one paragraph's scenes to a JSON-lines debug dump"""
    record = {
        "para_id": para_id,
        "nodes": [{"id": n.id, "surface": n.surface, "kind": n.kind.value} for n in graph.nodes],
        "relations": list(graph.relation_vocab),
        "steps": [
            {
                "t": t,
                "mask": scene.mask.astype(int).tolist(),
                "locate_in": [[int(e), graph.location_columns[int(c)]]
                              for e, c in zip(*np.nonzero(scene.locate_in))],
            }
            for t, scene in enumerate(scenes)
        ],
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record) + "\n")
