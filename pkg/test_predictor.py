"""
Tests for the prediction heads, decoding, rollouts and batch prediction
"""

from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

import numerics as nx
from context_encoder import CLS, INIT, SEP, Vocab
from error_handler import ErrorCategory, SGRError
from predictor import (AUTOREGRESSIVE, TEACHER_FORCED, SceneGraphReasoner, ScenePrediction, decode_scene,
                       entity_wise_rollout, init_predictor_params, predict_paragraph, predict_records,
                       predict_step, rollout, step_inputs)
from scene_graph import construct_gold_graphs, empty_scene, graph_for_instance
from structure_encoder import build_relation_vocab

D = 8


@pytest.fixture
def water_graph(water_instance):
    return graph_for_instance(water_instance, "train", use_knowledge=False)


@pytest.fixture
def model(water_instance, water_graph, tiny_config):
    return SceneGraphReasoner.initialize(Vocab.from_instances([water_instance]),
                                         build_relation_vocab([water_graph]), tiny_config)


def test_zero_output_layer_gives_even_predictions():
    rng = np.random.default_rng(0)
    params = nx.Parameters()
    init_predictor_params(params, D, rng)
    for head in ("mask", "loc"):
        params[f"pred.{head}.w2"].data = np.zeros(D)
    prediction = predict_step(nx.Tensor(rng.normal(size=D)), nx.Tensor(rng.normal(size=D)),
                              nx.Tensor(rng.normal(size=(3, D))), nx.Tensor(rng.normal(size=(5, D))), params)
    assert prediction.mask_probs.shape == (3,)
    assert np.array_equal(prediction.mask_probs.numpy(), np.full(3, 0.5))
    assert np.allclose(prediction.loc_probs.numpy(), np.full((3, 5), 0.2), atol=1e-15)


def test_head_input_dimensions_are_checked():
    params = nx.Parameters()
    init_predictor_params(params, D, np.random.default_rng(0))
    with pytest.raises(SGRError) as info:
        predict_step(nx.Tensor(np.zeros(D)), nx.Tensor(np.zeros(D + 1)),
                     nx.Tensor(np.zeros((2, D))), nx.Tensor(np.zeros((3, D))), params)
    assert info.value.category == ErrorCategory.SHAPE_MISMATCH


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_predict_step_matches_hand_computation():
    d = 2
    params = nx.Parameters()
    init_predictor_params(params, d, np.random.default_rng(0))
    weights = {
        "wg": np.array([[1.0, 0.0], [0.0, 1.0]]),
        "wc": np.array([[0.5, -0.5], [0.0, 1.0]]),
        "we": np.array([[1.0, 1.0], [-1.0, 0.0]]),
        "wl": np.array([[0.0, 2.0], [1.0, -1.0]]),
        "b1": np.array([0.1, -0.2]),
        "w2": np.array([1.5, -2.0]),
        "b2": np.array([0.3]),
    }
    for head in ("mask", "loc"):
        for name, value in weights.items():
            key = f"pred.{head}.{name}"
            if key in params:
                params[key].data = value.copy()

    h_g, h_c = np.array([0.2, -0.4]), np.array([1.0, 0.5])
    entities = np.array([[0.3, 0.1], [-0.5, 0.7]])
    locations = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    prediction = predict_step(nx.Tensor(h_g), nx.Tensor(h_c), nx.Tensor(entities), nx.Tensor(locations), params)

    wg, wc, we, wl = weights["wg"], weights["wc"], weights["we"], weights["wl"]
    b1, w2, b2 = weights["b1"], weights["w2"], weights["b2"][0]
    for e in range(2):
        pre = [sum(h_g[i] * wg[i, j] + h_c[i] * wc[i, j] + entities[e, i] * we[i, j] for i in range(d)) + b1[j]
               for j in range(d)]
        logit = sum(np.tanh(pre[j]) * w2[j] for j in range(d)) + b2
        assert prediction.mask_probs.numpy()[e] == pytest.approx(_sigmoid(logit), abs=1e-12)

        scores = []
        for l in range(3):
            pair = [np.tanh(pre[j] + sum(locations[l, i] * wl[i, j] for i in range(d))) for j in range(d)]
            scores.append(sum(pair[j] * w2[j] for j in range(d)) + b2)
        expected = np.exp(scores) / np.sum(np.exp(scores))
        assert np.allclose(prediction.loc_probs.numpy()[e], expected, atol=1e-12)


def test_decode_threshold_is_inclusive_and_ties_take_first_column(water_graph):
    prediction = ScenePrediction(
        mask_logits=nx.Tensor([0.0, -1e-4]),
        loc_logits=nx.Tensor([[0.0, 0.0, 0.0, -1.0], [-3.0, -2.0, -1.0, 0.0]]),
    )
    scene = decode_scene(prediction, water_graph).validate(water_graph)
    assert scene.entity_mask(2).tolist() == [1, 0]
    assert scene.location_column(0) == 0
    assert scene.location_column(1) is None


def test_step_inputs_start_with_the_init_step(water_instance):
    sequences = step_inputs(water_instance, 32)
    assert len(sequences) == water_instance.num_steps + 1
    assert sequences[0][:2] == [CLS, INIT] and sequences[0][-1] == SEP
    assert sequences[3][:5] == [CLS, "water", SEP, "sugar", SEP]
    assert step_inputs(water_instance, 32, entities=["sugar"])[3][:3] == [CLS, "sugar", SEP]


def test_rollout_covers_init_and_every_sentence(water_instance, water_graph, model):
    counter = Counter()
    result = rollout(water_instance, water_graph, model, counter=counter)
    T = water_instance.num_steps
    assert len(result.predictions) == len(result.scenes) == len(result.inputs) == T + 1
    assert result.inputs[0].equals(empty_scene(water_graph))
    for t in range(1, T + 1):
        assert result.inputs[t] is result.scenes[t - 1]
    assert counter["context"] == T + 1
    assert counter["structure"] == T + 1
    assert counter["concept"] == water_graph.num_nodes


def test_context_calls_do_not_grow_with_entities(water_instance, water_graph, model):
    more = replace(water_instance, entities=["water", "sugar", "leaf"], gold_states=None,
                   gold_locations=None, gold_initial_locations=None)
    graph = graph_for_instance(more, "test", use_knowledge=False)
    counter = Counter()
    rollout(more, graph, model, counter=counter)
    assert counter["context"] == more.num_steps + 1


def test_entity_wise_harness_scales_with_entities(water_instance, water_graph, model):
    counter = Counter()
    scenes = entity_wise_rollout(water_instance, water_graph, model, counter)
    T, N = water_instance.num_steps, water_instance.num_entities
    assert len(scenes) == T + 1
    assert counter["context"] == N * (T + 1)
    assert counter["structure"] == N * (T + 1)
    for scene in scenes:
        scene.validate(water_graph)


def test_teacher_forcing_reads_gold_previous_scenes(water_instance, water_graph, model):
    gold = construct_gold_graphs(water_instance, water_graph)
    result = rollout(water_instance, water_graph, model, TEACHER_FORCED, gold)
    assert result.inputs[0].equals(empty_scene(water_graph))
    for t in range(1, water_instance.num_steps + 1):
        assert result.inputs[t] is gold[t - 1]

    altered = [scene.copy() for scene in gold]
    altered[2] = empty_scene(water_graph)
    again = rollout(water_instance, water_graph, model, TEACHER_FORCED, altered)
    for t in (0, 1, 2):
        assert np.array_equal(again.predictions[t].loc_probs.numpy(), result.predictions[t].loc_probs.numpy())
    assert not np.array_equal(again.predictions[3].loc_probs.numpy(), result.predictions[3].loc_probs.numpy())


def test_rollout_mode_errors(water_instance, water_graph, model):
    with pytest.raises(SGRError) as info:
        rollout(water_instance, water_graph, model, mode="beam")
    assert info.value.context["mode"] == "beam"
    with pytest.raises(SGRError):
        rollout(water_instance, water_graph, model, TEACHER_FORCED)
    gold = construct_gold_graphs(water_instance, water_graph)
    with pytest.raises(SGRError) as info:
        rollout(water_instance, water_graph, model, TEACHER_FORCED, gold[:-1])
    assert info.value.context["got"] == water_instance.num_steps


def test_disabled_structure_encoder_is_not_called(water_instance, water_graph, model):
    model.config = replace(model.config, use_structure_encoder=False)
    counter = Counter()
    rollout(water_instance, water_graph, model, AUTOREGRESSIVE, counter=counter)
    assert counter["structure"] == 0
    assert counter["context"] == water_instance.num_steps + 1


def test_checkpoint_reproduces_predictions(tmp_path, water_instance, water_graph, model):
    path = str(tmp_path / "ckpt" / "sgr.ckpt")
    model.save(path)
    loaded = SceneGraphReasoner.load(path)
    assert loaded.vocab.itos == model.vocab.itos
    assert loaded.relation_vocab == model.relation_vocab
    assert loaded.config == model.config
    first = rollout(water_instance, water_graph, model)
    second = rollout(water_instance, water_graph, loaded)
    for a, b in zip(first.predictions, second.predictions):
        assert np.array_equal(a.mask_probs.numpy(), b.mask_probs.numpy())
        assert np.array_equal(a.loc_probs.numpy(), b.loc_probs.numpy())


def test_missing_checkpoint_is_io_error(tmp_path):
    with pytest.raises(SGRError) as info:
        SceneGraphReasoner.load(str(tmp_path / "none.ckpt"))
    assert info.value.category == ErrorCategory.IO


def test_paragraph_prediction_has_one_row_per_step_and_entity(water_instance, model):
    result = predict_paragraph(model, water_instance)
    assert len(result.records) == water_instance.num_steps * water_instance.num_entities
    assert [(r.step, r.entity) for r in result.records[:2]] == [(1, "water"), (1, "sugar")]
    assert {r.action for r in result.records} <= {"NONE", "CREATE", "DESTROY", "MOVE"}


def test_thread_pool_keeps_order_and_results(model, synthetic_corpus, tmp_path):
    serial = predict_records(model, synthetic_corpus, workers=1)
    dump = str(tmp_path / "graphs.jsonl")
    pooled = predict_records(model, synthetic_corpus, workers=2, dump_path=dump)
    assert [r.para_id for r in pooled] == [inst.para_id for inst in synthetic_corpus]
    assert [r.records for r in pooled] == [r.records for r in serial]
    assert len(open(dump, encoding="utf-8").read().splitlines()) == len(synthetic_corpus)
    with pytest.raises(SGRError):
        predict_records(model, synthetic_corpus, workers=0)
