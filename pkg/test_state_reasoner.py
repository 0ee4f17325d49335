"""
Tests for state inference, constraint repair and TSV row emission
"""

import random

from corpus import PredictionRecord, ProcedureInstance, StateLabel
from scene_graph import construct_gold_graphs, graph_for_instance
from state_reasoner import (EntityTrajectory, apply_constraints, emit_predictions, gold_records,
                            infer_states, invalid_steps, roundtrip_mismatches)
from synthetic import generate_corpus

S = StateLabel.parse


def _trajectory(states, locations, initial="-"):
    return EntityTrajectory("water", [S(s) for s in states], list(locations), initial)


def test_infer_states_from_gold_scenes(water_instance):
    graph = graph_for_instance(water_instance, "train", use_knowledge=False)
    water, sugar = infer_states(construct_gold_graphs(water_instance, graph), graph)
    assert [s.value for s in water.states] == ["M", "M", "D"]
    assert water.locations == ["root", "leaf", "-"]
    assert water.initial_location == "soil"
    assert [s.value for s in sugar.states] == ["O_A", "O_A", "C"]
    assert sugar.locations == ["-", "-", "leaf"]
    assert not sugar.initially_exists


def test_repair_turns_appearance_into_create(issue_log):
    fixed, = apply_constraints([_trajectory(["E", "E"], ["leaf", "leaf"])], para_id="p9")
    assert [s.value for s in fixed.states] == ["C", "E"]
    assert fixed.locations == ["leaf", "leaf"]

    issue = issue_log.read_issues()[-1]
    assert issue["issue_type"] == "invalid_transition"
    assert issue["metadata"]["para_id"] == "p9"
    assert issue["metadata"]["repairs"] == [{"entity": "water", "step": 1, "from": "E", "to": "C"}]


def test_repair_of_double_create():
    fixed, = apply_constraints([_trajectory(["C", "C", "C"], ["leaf", "leaf", "root"])])
    assert [s.value for s in fixed.states] == ["C", "E", "M"]


def test_repair_distinguishes_before_and_after_existence():
    fixed, = apply_constraints([_trajectory(["D", "O_A"], ["-", "-"], initial="soil")])
    assert [s.value for s in fixed.states] == ["D", "O_B"]
    fixed, = apply_constraints([_trajectory(["O_B", "C"], ["-", "root"])])
    assert [s.value for s in fixed.states] == ["O_A", "C"]


def test_repair_fixes_locations_against_existence():
    fixed, = apply_constraints([_trajectory(["E", "D"], ["-", "root"], initial="soil")])
    assert fixed.locations == ["?", "-"]
    assert fixed.is_valid()


def test_valid_trajectories_are_untouched_and_repair_is_idempotent(issue_log):
    valid = _trajectory(["M", "E", "D"], ["root", "root", "-"], initial="soil")
    assert apply_constraints([valid])[0] is valid
    assert issue_log.read_issues() == []

    rng = random.Random(3)
    labels = [label.value for label in StateLabel]
    for _ in range(200):
        T = rng.randint(1, 6)
        messy = _trajectory([rng.choice(labels) for _ in range(T)],
                            [rng.choice(["-", "?", "leaf", "root"]) for _ in range(T)],
                            initial=rng.choice(["-", "soil"]))
        once, = apply_constraints([messy])
        twice, = apply_constraints([once])
        assert invalid_steps(once) == []
        assert twice.states == once.states and twice.locations == once.locations


def test_emitted_rows_of_the_gold_annotation(water_instance):
    rows = gold_records(water_instance)
    assert len(rows) == 6
    assert rows[0] == PredictionRecord("p1", 1, "water", "MOVE", "soil", "root")
    assert rows[1] == PredictionRecord("p1", 1, "sugar", "NONE", "-", "-")
    assert rows[4] == PredictionRecord("p1", 3, "water", "DESTROY", "leaf", "-")
    assert rows[5] == PredictionRecord("p1", 3, "sugar", "CREATE", "-", "leaf")


def test_create_at_unknown_location_emits_question_mark(water_instance):
    trajectory = EntityTrajectory("sugar", [S("O_A"), S("O_A"), S("C")], ["-", "-", "?"])
    rows = emit_predictions([trajectory], water_instance)
    assert rows[-1] == PredictionRecord("p1", 3, "sugar", "CREATE", "-", "?")


def _random_annotation(rng, k):
    """A random valid annotation; entities may be destroyed and created again"""
    entities = rng.sample(["alpha", "beta", "gamma", "delta", "omega", "sigma"], rng.randint(1, 6))
    places = rng.sample(["shelf", "box", "bag", "tray", "cup", "drawer", "sink", "oven"], rng.randint(1, 8))
    T = rng.randint(1, 10)
    states, locations, initial = [], [], []
    for _ in entities:
        here = rng.choice(["-", "?"] + places) if rng.random() < 0.5 else "-"
        initial.append(here)
        ever = here != "-"
        row_states, row_locations = [], []
        for _ in range(T):
            if here != "-":
                label = rng.choice(["E", "M", "D"])
                if label == "M":
                    here = rng.choice([p for p in places + ["?"] if p != here])
                elif label == "D":
                    here = "-"
            elif rng.random() < 0.4:
                label, here = "C", rng.choice(places + ["?"])
            else:
                label = "O_B" if ever else "O_A"
            ever = ever or here != "-"
            row_states.append(label)
            row_locations.append(here)
        states.append(row_states)
        locations.append(row_locations)
    return ProcedureInstance(
        para_id=f"r{k}",
        sentences=["nothing happens ."] * T,
        entities=entities,
        gold_states=states,
        gold_locations=locations,
        gold_initial_locations=initial,
        location_candidates=places,
    ).validate()


def test_gold_annotation_survives_the_scene_graph_roundtrip():
    rng = random.Random(11)
    instances = [_random_annotation(rng, k) for k in range(200)] + generate_corpus(20, seed=5)
    for instance in instances:
        graph = graph_for_instance(instance, "train", use_knowledge=False)
        scenes = construct_gold_graphs(instance, graph)
        assert roundtrip_mismatches(instance, graph, scenes) == [], instance.para_id
