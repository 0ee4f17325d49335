"""
Structure Encoder - one-layer relation-aware graph attention over a scene

Scores every pair with LeakyReLU(a . [W1 h_i | W1 h_j | sum W2[rel_ij]]),
softmaxes each row over the active neighborhood (present neighbors plus the
self-loop) and aggregates the raw node features through ELU. The Global
node's output is the scene summary.
"""

from dataclasses import dataclass

import numpy as np

import numerics as nx
from error_handler import ErrorCategory, SGRError, shape_error
from scene_graph import BASE_RELATIONS, LOCATE_IN

GLOBAL_RELATION = "[GLOBAL]"
SELF_RELATION = "[SELF]"
UNKNOWN_RELATION = "[UNK_REL]"
RESERVED_RELATIONS = (GLOBAL_RELATION, SELF_RELATION, UNKNOWN_RELATION)

LEAKY_SLOPE = 0.2


def build_relation_vocab(graphs):
    """
    Model-wide relation vocabulary

    Base relations, then knowledge relations in first-seen order over the
    given complete graphs, then the reserved Global / self-loop / unknown rows.
    """
    relations = list(BASE_RELATIONS)
    for graph in graphs:
        for name in graph.relation_vocab:
            if name not in relations:
                relations.append(name)
    return tuple(relations) + RESERVED_RELATIONS


@dataclass
class GraphView:
    """
    Dense view of one scene for the attention layer

    relations: (M, M, K) count of each relation on each directed pair
    node_mask: (M,) bool presence of each node
    """
    relations: np.ndarray
    node_mask: np.ndarray
    global_index: int

    @property
    def num_nodes(self):
        return self.node_mask.shape[0]

    def adjacency(self):
        """Active neighborhood N_i, self-loop included"""
        linked = self.relations.sum(axis=-1) > 0
        allowed = linked & self.node_mask[None, :]
        np.fill_diagonal(allowed, True)
        return allowed


def view_scene(graph, scene, relation_vocab):
    """
    Materialize a scene graph as a relation-count tensor

    Static edges and LocateIn edges are read in both directions. Relations
    outside relation_vocab fall back to [UNK_REL].

    Args:
        graph (CompleteGraph): The paragraph's concept universe
        scene (SceneGraph): Masks and locations of this timestep
        relation_vocab (tuple): Model-wide relation names

    Returns:
        GraphView: Dense input of attention_coefficients
    """
    index = {name: k for k, name in enumerate(relation_vocab)}
    for name in RESERVED_RELATIONS + (LOCATE_IN,):
        if name not in index:
            raise SGRError("relation vocabulary lacks a reserved relation", ErrorCategory.CONTRACT,
                           relation=name)
    M, K = graph.num_nodes, len(relation_vocab)
    relations = np.zeros((M, M, K), dtype=np.float64)
    unknown = index[UNKNOWN_RELATION]

    for i, j, r in graph.static_edges:
        k = index.get(graph.relation_name(r), unknown)
        relations[i, j, k] += 1
        relations[j, i, k] += 1

    columns = graph.location_columns
    locate = index[LOCATE_IN]
    for e in range(graph.num_entities):
        col = scene.location_column(e)
        if col is not None:
            relations[e, columns[col], locate] += 1
            relations[columns[col], e, locate] += 1

    g = graph.global_id
    others = [n for n in range(M) if n != g]
    relations[g, others, index[GLOBAL_RELATION]] += 1
    relations[others, g, index[GLOBAL_RELATION]] += 1
    relations[np.arange(M), np.arange(M), index[SELF_RELATION]] += 1

    return GraphView(relations=relations, node_mask=scene.mask.astype(bool), global_index=g)


def init_gat_params(params, num_relations, d, rng):
    """Register W1 (d, d), the relation table W2 (K, d) and the scorer a (3d,)"""
    params.uniform("gat.w1", (d, d), rng)
    params.uniform("gat.w2", (num_relations, d), rng, fan_in=d)
    params.uniform("gat.a", (3 * d,), rng, fan_in=3 * d)


def attention_coefficients(view, node_feats, params):
    """
    Row-normalized attention over each node's active neighborhood

    Args:
        view (GraphView): Scene view
        node_feats (Tensor): (M, d) concept features
        params (Parameters): gat.* weights

    Returns:
        Tensor: (M, M) coefficients; rows of masked nodes are all zero and
        entries outside the neighborhood are exactly zero
    """
    M = view.num_nodes
    w1, w2, a = params["gat.w1"], params["gat.w2"], params["gat.a"]
    d = w1.shape[0]
    if node_feats.shape != (M, d):
        raise shape_error("attention_coefficients", node_feats.shape, (M, d))
    if view.relations.shape[-1] != w2.shape[0]:
        raise shape_error("attention_coefficients", view.relations.shape, w2.shape)

    projected = nx.matmul(node_feats, w1)
    score_i = nx.reshape(nx.matmul(projected, nx.narrow(a, 0, d)), (M, 1))
    score_j = nx.reshape(nx.matmul(projected, nx.narrow(a, d, 2 * d)), (1, M))
    relation_scores = nx.matmul(nx.constant(view.relations), nx.matmul(w2, nx.narrow(a, 2 * d, 3 * d)))
    logits = nx.leaky_relu(nx.add(nx.add(score_i, score_j), relation_scores), LEAKY_SLOPE)

    mask = np.where(view.adjacency(), 0.0, -np.inf)
    alpha = nx.masked_softmax(logits, mask)
    row_mask = view.node_mask.astype(np.float64)[:, None]
    return nx.mul(alpha, row_mask)


def encode_scene(view, node_feats, params):
    """
    Node states ELU(alpha @ h) and the Global summary

    Returns:
        tuple: ((M, d) node states, (d,) Global node state)
    """
    if not view.node_mask[view.global_index]:
        raise SGRError("the Global node is never masked", ErrorCategory.CONTRACT)
    alpha = attention_coefficients(view, node_feats, params)
    states = nx.elu(nx.matmul(alpha, node_feats))
    return states, nx.take_rows(states, view.global_index)
