"""
State Reasoner - turn a sequence of scene graphs into per-entity state labels

Adjacent scenes are compared entity by entity: a presence bit flipping on is
a Create, flipping off a Destroy, a changed LocateIn column while present a
Move. Trajectories read from elsewhere can be repaired so every label
transition is valid.
"""

from dataclasses import dataclass
from typing import List

from app_logger import log_repaired_transitions
from corpus import NO_LOCATION, UNKNOWN_LOCATION, PredictionRecord, StateLabel, tokenize
from scene_graph import initial_existence

ACTION_OF = {
    StateLabel.CREATE: "CREATE",
    StateLabel.DESTROY: "DESTROY",
    StateLabel.MOVE: "MOVE",
    StateLabel.EXIST: "NONE",
    StateLabel.O_A: "NONE",
    StateLabel.O_B: "NONE",
}


@dataclass
class EntityTrajectory:
    """
    States and locations of one entity over steps 1..T

    initial_location is the location before step 1 ("-" when the entity
    does not exist yet).
    """
    entity: str
    states: List[StateLabel]
    locations: List[str]
    initial_location: str = NO_LOCATION

    @property
    def initially_exists(self):
        return self.initial_location != NO_LOCATION

    def is_valid(self):
        return not invalid_steps(self)


def valid_transition(label, existed_before, ever_existed):
    """Whether label may follow the given existence history"""
    if existed_before:
        return label in (StateLabel.EXIST, StateLabel.MOVE, StateLabel.DESTROY)
    if label == StateLabel.CREATE:
        return True
    if label == StateLabel.O_A:
        return not ever_existed
    if label == StateLabel.O_B:
        return ever_existed
    return False


def invalid_steps(trajectory):
    """1-based steps whose label or location breaks the transition rules"""
    bad = []
    exists = trajectory.initially_exists
    ever = exists
    for t, (label, location) in enumerate(zip(trajectory.states, trajectory.locations), start=1):
        now = label.exists_after
        if not valid_transition(label, exists, ever) or (location == NO_LOCATION) == now:
            bad.append(t)
        exists = now
        ever = ever or now
    return bad


def infer_states(scene_graphs, graph):
    """
    Diff adjacent scene graphs into one trajectory per entity

    Args:
        scene_graphs (list): y_0 .. y_T SceneGraph objects
        graph (CompleteGraph): Graph the scenes are views of

    Returns:
        list: EntityTrajectory per entity, in entity order
    """
    for scene in scene_graphs:
        scene.validate(graph)
    names = graph.location_names

    def location_of(scene, e):
        col = scene.location_column(e)
        return NO_LOCATION if col is None else names[col]

    trajectories = []
    for e, entity in enumerate(graph.entity_names):
        previous = scene_graphs[0]
        exists = bool(previous.mask[e])
        ever = exists
        states, locations = [], []
        for scene in scene_graphs[1:]:
            now = bool(scene.mask[e])
            if now and not exists:
                label = StateLabel.CREATE
            elif exists and not now:
                label = StateLabel.DESTROY
            elif now:
                moved = scene.location_column(e) != previous.location_column(e)
                label = StateLabel.MOVE if moved else StateLabel.EXIST
            else:
                label = StateLabel.O_B if ever else StateLabel.O_A
            states.append(label)
            locations.append(location_of(scene, e))
            exists, ever, previous = now, ever or now, scene
        trajectories.append(EntityTrajectory(entity, states, locations, location_of(scene_graphs[0], e)))
    return trajectories


def _repair(trajectory):
    exists = trajectory.initially_exists
    ever = exists
    previous_location = trajectory.initial_location
    states, locations = [], []
    for label, location in zip(trajectory.states, trajectory.locations):
        now = label.exists_after
        if now and location == NO_LOCATION:
            location = UNKNOWN_LOCATION
        if not now:
            location = NO_LOCATION
        if not valid_transition(label, exists, ever):
            if now and not exists:
                label = StateLabel.CREATE
            elif exists and not now:
                label = StateLabel.DESTROY
            elif now:
                label = StateLabel.MOVE if location != previous_location else StateLabel.EXIST
            else:
                label = StateLabel.O_B if ever else StateLabel.O_A
        states.append(label)
        locations.append(location)
        exists, ever, previous_location = now, ever or now, location
    return EntityTrajectory(trajectory.entity, states, locations, trajectory.initial_location)


def apply_constraints(trajectories, para_id=""):
    """
    Repair invalid transitions by re-deriving labels from existence bits

    Valid trajectories come back unchanged; applying the repair twice
    equals applying it once.

    Returns:
        list: Repaired EntityTrajectory objects
    """
    repaired, repairs = [], []
    for trajectory in trajectories:
        if trajectory.is_valid():
            repaired.append(trajectory)
            continue
        fixed = _repair(trajectory)
        for t in invalid_steps(trajectory):
            repairs.append({
                "entity": trajectory.entity,
                "step": t,
                "from": trajectory.states[t - 1].value,
                "to": fixed.states[t - 1].value,
            })
        repaired.append(fixed)
    if repairs:
        log_repaired_transitions(para_id, repairs)
    return repaired


def emit_predictions(trajectories, instance):
    """
    One PredictionRecord per (step, entity), step-major

    before is the location after the previous step (the initial location
    for step 1), after is the location after this step.
    """
    records = []
    for t in range(1, instance.num_steps + 1):
        for trajectory in trajectories:
            before = trajectory.initial_location if t == 1 else trajectory.locations[t - 2]
            records.append(PredictionRecord(
                para_id=instance.para_id,
                step=t,
                entity=trajectory.entity,
                action=ACTION_OF[trajectory.states[t - 1]],
                before=before,
                after=trajectory.locations[t - 1],
            ))
    return records


# ── gold side ────────────────────────────────────────────────────────

def _normalize(location):
    if location in (UNKNOWN_LOCATION, NO_LOCATION):
        return location
    return " ".join(tokenize(location))


def gold_trajectories(instance):
    """Trajectories read straight from the gold annotation (locations normalized)"""
    trajectories = []
    for e, entity in enumerate(instance.entities):
        states = [StateLabel.parse(s) for s in instance.gold_states[e]]
        locations = [_normalize(loc) for loc in instance.gold_locations[e]]
        initial = NO_LOCATION
        if initial_existence(instance.gold_states[e]):
            given = instance.gold_initial_locations[e] if instance.gold_initial_locations else None
            if given in (None, NO_LOCATION):
                given = locations[0] if states[0] == StateLabel.EXIST else UNKNOWN_LOCATION
            initial = _normalize(given)
        trajectories.append(EntityTrajectory(entity, states, locations, initial))
    return trajectories


def gold_records(instance):
    """Gold TSV rows of one annotated paragraph"""
    return emit_predictions(gold_trajectories(instance), instance)


def roundtrip_mismatches(instance, graph, scenes):
    """
    Differences between the gold annotation and infer_states over scenes

    Returns:
        list: (entity, step, field, expected, got) tuples; empty on success
    """
    mismatches = []
    for expected, got in zip(gold_trajectories(instance), infer_states(scenes, graph)):
        if expected.initial_location != got.initial_location:
            mismatches.append((expected.entity, 0, "location", expected.initial_location, got.initial_location))
        for t, (a, b) in enumerate(zip(expected.states, got.states), start=1):
            if a != b:
                mismatches.append((expected.entity, t, "state", a.value, b.value))
        for t, (a, b) in enumerate(zip(expected.locations, got.locations), start=1):
            if a != b:
                mismatches.append((expected.entity, t, "location", a, b))
    return mismatches
