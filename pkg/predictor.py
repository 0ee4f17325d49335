"""
Predictor - next-scene heads, the SGR model and its rollouts

Two shared two-layer heads read the scene summary, the sentence summary and
the static concept features: one scores each entity's presence, the other
scores each (entity, location) pair. rollout() runs the virtual init step
followed by one step per sentence, either on gold previous scenes (teacher
forcing) or on its own decoded scenes (autoregressive).
"""

import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List

import numpy as np

import numerics as nx
from context_encoder import (Vocab, encode_context, init_concept_features, init_encoder_params,
                             restructure_init, restructure_input)
from error_handler import ErrorCategory, SGRError, shape_error
from scene_graph import SceneGraph, dump_scene_graphs, empty_scene, graph_for_instance
from sgr_config import TrainConfig
from state_reasoner import apply_constraints, emit_predictions, infer_states
from structure_encoder import encode_scene, init_gat_params, view_scene

TEACHER_FORCED = "teacher_forced"
AUTOREGRESSIVE = "autoregressive"
MODES = (TEACHER_FORCED, AUTOREGRESSIVE)

MASK_THRESHOLD = 0.5


@dataclass
class ScenePrediction:
    """
    mask_logits: (N,) presence scores; loc_logits: (N, L+1) location scores

    The loss reads the logits; decoding reads the derived probabilities.
    """
    mask_logits: nx.Tensor
    loc_logits: nx.Tensor

    @property
    def mask_probs(self):
        return nx.sigmoid(self.mask_logits)

    @property
    def loc_probs(self):
        return nx.softmax(self.loc_logits)


@dataclass
class RolloutResult:
    """
    predictions / scenes: T + 1 entries for steps 0..T
    inputs: the scene each step was conditioned on
    """
    predictions: List[ScenePrediction] = field(default_factory=list)
    scenes: List[SceneGraph] = field(default_factory=list)
    inputs: List[SceneGraph] = field(default_factory=list)


# ── heads ────────────────────────────────────────────────────────────

def init_predictor_params(params, d, rng, hidden=None):
    """
    Register both heads (prefix pred.)

    The concatenated input [h_g | h_c | x_e (| x_l)] is held as one d x h
    block per segment.
    """
    hidden = hidden or d
    for head, segments in (("mask", ("wg", "wc", "we")), ("loc", ("wg", "wc", "we", "wl"))):
        p = f"pred.{head}."
        for name in segments:
            params.uniform(p + name, (d, hidden), rng, fan_in=d * len(segments))
        params.zeros(p + "b1", (hidden,))
        params.uniform(p + "w2", (hidden,), rng)
        params.zeros(p + "b2", (1,))


def _shared_input(prefix, h_global, h_cls, entity_feats, params):
    base = nx.add(nx.matmul(h_global, params[prefix + "wg"]), nx.matmul(h_cls, params[prefix + "wc"]))
    return nx.add(nx.add(nx.matmul(entity_feats, params[prefix + "we"]), base), params[prefix + "b1"])


def predict_step(h_global, h_cls, entity_feats, location_feats, params):
    """
    Presence and location distributions of the next scene

    Args:
        h_global (Tensor): (d,) scene summary of the previous scene
        h_cls (Tensor): (d,) summary of the current sentence
        entity_feats (Tensor): (N, d) entity concept features
        location_feats (Tensor): (L+1, d) location concept features, UnkLoc last
        params (Parameters): pred.* weights

    Returns:
        ScenePrediction: presence logits and per-entity location logits
    """
    d = params["pred.mask.wg"].shape[0]
    if h_global.shape != (d,) or h_cls.shape != (d,):
        raise shape_error("predict_step", h_global.shape, h_cls.shape, (d,))
    if entity_feats.data.ndim != 2 or entity_feats.shape[1] != d or location_feats.shape[-1] != d:
        raise shape_error("predict_step", entity_feats.shape, location_feats.shape, (d,))
    N, L = entity_feats.shape[0], location_feats.shape[0]

    hidden = nx.tanh(_shared_input("pred.mask.", h_global, h_cls, entity_feats, params))
    mask_logits = nx.add(nx.matmul(hidden, params["pred.mask.w2"]), params["pred.mask.b2"])

    pair_entity = _shared_input("pred.loc.", h_global, h_cls, entity_feats, params)
    pair_location = nx.matmul(location_feats, params["pred.loc.wl"])
    h = pair_entity.shape[-1]
    pair = nx.tanh(nx.add(nx.reshape(pair_entity, (N, 1, h)), nx.reshape(pair_location, (1, L, h))))
    loc_logits = nx.add(nx.matmul(pair, params["pred.loc.w2"]), params["pred.loc.b2"])

    return ScenePrediction(mask_logits=mask_logits, loc_logits=loc_logits)


def decode_scene(prediction, graph):
    """
    Threshold presence at 0.5 (inclusive) and take the location argmax

    Ties go to the lowest column; absent entities get an all-zero row.
    """
    N, cols = graph.num_entities, graph.num_locations + 1
    mask_probs = prediction.mask_probs.numpy()
    loc_probs = prediction.loc_probs.numpy()
    if mask_probs.shape != (N,) or loc_probs.shape != (N, cols):
        raise shape_error("decode_scene", mask_probs.shape, loc_probs.shape, (N, cols))
    mask = np.ones(graph.num_nodes, dtype=np.int8)
    locate_in = np.zeros((N, cols), dtype=np.int8)
    for e in range(N):
        present = mask_probs[e] >= MASK_THRESHOLD
        mask[e] = 1 if present else 0
        if present:
            locate_in[e, int(np.argmax(loc_probs[e]))] = 1
    return SceneGraph(mask, locate_in)


# ── model ────────────────────────────────────────────────────────────

class SceneGraphReasoner:
    """
    All SGR parameters with the vocabularies they are indexed by

    Args:
        params (Parameters): ctx.*, gat.* and pred.* tensors
        vocab (Vocab): Token vocabulary
        relation_vocab (tuple): Relation names indexing gat.w2
        config (TrainConfig): Architecture and ablation settings
    """

    def __init__(self, params, vocab, relation_vocab, config):
        self.params = params
        self.vocab = vocab
        self.relation_vocab = tuple(relation_vocab)
        self.config = config

    @classmethod
    def initialize(cls, vocab, relation_vocab, config):
        """Fresh parameters drawn from a generator seeded by config.seed"""
        rng = np.random.default_rng(config.seed)
        params = nx.Parameters()
        init_encoder_params(params, len(vocab), config, rng)
        init_gat_params(params, len(relation_vocab), config.hidden_size, rng)
        init_predictor_params(params, config.hidden_size, rng)
        return cls(params, vocab, relation_vocab, config)

    @property
    def hidden_size(self):
        return self.config.hidden_size

    def save(self, path):
        meta = {
            "config": self.config.to_dict(),
            "vocab": list(self.vocab.itos),
            "relation_vocab": list(self.relation_vocab),
        }
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        nx.save_checkpoint(path, self.params, meta)
        print(f"[Predictor] Saved checkpoint ({self.params.num_values()} values) to {path}")

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise SGRError("checkpoint not found", ErrorCategory.IO, path=path)
        params, meta = nx.load_checkpoint(path)
        for key in ("config", "vocab", "relation_vocab"):
            if key not in meta:
                raise SGRError(f"checkpoint metadata lacks '{key}'", ErrorCategory.MALFORMED_INPUT,
                               path=path)
        config = TrainConfig.from_dict(meta["config"])
        return cls(params, Vocab(meta["vocab"]), meta["relation_vocab"], config)

    def concept_features(self, graph, counter=None):
        return init_concept_features(graph, self.params, self.vocab, self.config, counter)

    def scene_summary(self, graph, scene, feats, counter=None):
        if not self.config.use_structure_encoder:
            return nx.constant(np.zeros(self.hidden_size))
        if counter is not None:
            counter["structure"] += 1
        _, summary = encode_scene(view_scene(graph, scene, self.relation_vocab), feats, self.params)
        return summary

    def sentence_summary(self, tokens, counter=None):
        if not self.config.use_context_encoder:
            return nx.constant(np.zeros(self.hidden_size))
        return encode_context(tokens, self.params, self.vocab, self.config, counter, kind="context")

    def step(self, graph, previous, tokens, feats, counter=None):
        """Predict the scene after reading tokens, starting from previous"""
        h_global = self.scene_summary(graph, previous, feats, counter)
        h_cls = self.sentence_summary(tokens, counter)
        entity_feats = nx.take_rows(feats, graph.entity_ids)
        location_feats = nx.take_rows(feats, graph.location_columns)
        return predict_step(h_global, h_cls, entity_feats, location_feats, self.params)


# ── rollouts ─────────────────────────────────────────────────────────

def step_inputs(instance, max_len, entities=None):
    """Token sequences of steps 0..T (virtual init first)"""
    entities = list(instance.entities if entities is None else entities)
    sequences = [restructure_init(instance.prompt_tokens(), max_len)]
    mentions = instance.sentence_mentions()
    for tokens, spans in zip(instance.sentence_tokens(), mentions):
        spans = [m for m in spans if m.entity in entities]
        sequences.append(restructure_input(tokens, entities, max_len, spans))
    return sequences


def rollout(instance, graph, model, mode=AUTOREGRESSIVE, gold_graphs=None, counter=None):
    """
    Predict scenes y_0 .. y_T for one paragraph

    Step 0 reads "[CLS] [INIT] prompt [SEP]" over the scene with every
    entity masked out; step t reads sentence t over y_{t-1}, which is the
    gold scene under teacher forcing and the decoded prediction otherwise.

    Args:
        instance (ProcedureInstance): The paragraph
        graph (CompleteGraph): Its complete graph
        model (SceneGraphReasoner): Parameters and settings
        mode (str): teacher_forced or autoregressive
        gold_graphs (list): T + 1 gold scenes, required for teacher forcing
        counter (Counter): Optional encoder invocation counter

    Returns:
        RolloutResult: T + 1 predictions, decoded scenes and inputs
    """
    if mode not in MODES:
        raise SGRError("unknown rollout mode", ErrorCategory.CONTRACT, mode=mode)
    if mode == TEACHER_FORCED:
        if gold_graphs is None:
            raise SGRError("teacher forcing needs gold scene graphs", ErrorCategory.CONTRACT,
                           para_id=instance.para_id)
        if len(gold_graphs) != instance.num_steps + 1:
            raise SGRError("gold scene graphs must cover steps 0..T", ErrorCategory.CONTRACT,
                           para_id=instance.para_id, expected=instance.num_steps + 1, got=len(gold_graphs))

    feats = model.concept_features(graph, counter)
    result = RolloutResult()
    previous = empty_scene(graph)
    for t, tokens in enumerate(step_inputs(instance, model.config.max_len)):
        if t > 0:
            previous = gold_graphs[t - 1] if mode == TEACHER_FORCED else result.scenes[t - 1]
        prediction = model.step(graph, previous, tokens, feats, counter)
        result.inputs.append(previous)
        result.predictions.append(prediction)
        result.scenes.append(decode_scene(prediction, graph))
    return result


def entity_wise_rollout(instance, graph, model, counter=None):
    """
    Reference harness: the same encoders run once per entity

    Each entity gets its own autoregressive pass whose sentence prefix
    names only that entity; only that entity's row of each decoded scene is
    kept. Encoder invocations grow as N * (T + 1).

    Returns:
        list: T + 1 combined SceneGraph objects
    """
    feats = model.concept_features(graph, counter)
    T = instance.num_steps
    combined = [empty_scene(graph) for _ in range(T + 1)]
    for e, entity in enumerate(instance.entities):
        previous = empty_scene(graph)
        for t, tokens in enumerate(step_inputs(instance, model.config.max_len, entities=[entity])):
            scene = decode_scene(model.step(graph, previous, tokens, feats, counter), graph)
            combined[t].mask[e] = scene.mask[e]
            combined[t].locate_in[e] = scene.locate_in[e]
            previous = scene
    return combined


# ── end-to-end prediction ────────────────────────────────────────────

@dataclass
class ParagraphPrediction:
    para_id: str
    records: list
    graph: object
    scenes: list
    invocations: Counter


def predict_paragraph(model, instance, triples=None, split="test", entity_wise=False):
    """Rollout, state reasoning and constraint repair for one paragraph"""
    graph = graph_for_instance(instance, split, triples, use_knowledge=model.config.knowledge_test)
    counter = Counter()
    scenes = rollout(instance, graph, model, AUTOREGRESSIVE, counter=counter).scenes
    if entity_wise:
        reference = Counter()
        entity_wise_rollout(instance, graph, model, reference)
        counter["entity_wise_context"] = reference["context"]
        counter["entity_wise_structure"] = reference["structure"]
    trajectories = apply_constraints(infer_states(scenes, graph), para_id=instance.para_id)
    return ParagraphPrediction(instance.para_id, emit_predictions(trajectories, instance),
                               graph, scenes, counter)


def predict_records(model, instances, triples=None, workers=1, split="test",
                    dump_path=None, entity_wise=False):
    """
    Predict the TSV rows of many paragraphs

    Paragraphs may be processed by a thread pool; output keeps input order.

    Args:
        model (SceneGraphReasoner): Trained model
        instances (list): ProcedureInstance objects
        triples (list): Shared knowledge triples
        workers (int): Thread-pool size; 1 runs inline
        split (str): Candidate policy (test excludes gold locations)
        dump_path (str): Optional JSON-lines dump of the decoded scenes
        entity_wise (bool): Also run the entity-wise reference harness

    Returns:
        list: ParagraphPrediction per instance
    """
    if workers < 1:
        raise SGRError("workers must be positive", ErrorCategory.CONTRACT, workers=workers)

    def run(instance):
        return predict_paragraph(model, instance, triples, split, entity_wise)

    if workers == 1:
        results = [run(instance) for instance in instances]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, instances))

    if dump_path:
        for result in results:
            dump_scene_graphs(result.graph, result.scenes, dump_path, result.para_id)
    return results
