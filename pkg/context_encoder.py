"""
Context Encoder - small transformer encoder trained from scratch

Encodes the restructured sentence "[CLS] e_a [SEP] e_b [SEP] sentence [SEP]"
into the [CLS] state, and initializes concept node features by encoding
each concept's surface the same way.
"""

import os
from collections import Counter

import numpy as np

import numerics as nx
from corpus import match_entities, tokenize
from error_handler import ErrorCategory, SGRError
from scene_graph import NodeKind

PAD, UNK, CLS, SEP, INIT = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[INIT]"
GLOBAL_TOKEN, UNKLOC_TOKEN = "[GLOBAL]", "[UNKLOC]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, INIT, GLOBAL_TOKEN, UNKLOC_TOKEN)


class Vocab:
    """
    Token -> index map; specials occupy the lowest indices
    """

    def __init__(self, tokens=()):
        self.itos = list(SPECIAL_TOKENS)
        for token in tokens:
            if token not in SPECIAL_TOKENS:
                self.itos.append(token)
        self.stoi = {token: i for i, token in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise SGRError("duplicate vocabulary token", ErrorCategory.MALFORMED_INPUT)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def index(self, token):
        return self.stoi.get(token, self.stoi[UNK])

    def encode(self, tokens):
        return [self.index(t) for t in tokens]

    @classmethod
    def from_instances(cls, instances, triples=None):
        """Vocabulary of every sentence, prompt, entity, candidate and knowledge surface"""
        counts = Counter()
        for inst in instances:
            for tokens in inst.sentence_tokens():
                counts.update(tokens)
            counts.update(inst.prompt_tokens())
            for entity in inst.entities:
                counts.update(tokenize(entity))
            for candidate in inst.location_candidates or []:
                counts.update(tokenize(candidate))
            for triple in inst.knowledge_triples or []:
                counts.update(tokenize(triple[0]) + tokenize(triple[2]))
        for head, _, tail in triples or []:
            counts.update(tokenize(head) + tokenize(tail))
        ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
        return cls(ordered)

    def save(self, path):
        """One token per line, index = line number"""
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for token in self.itos:
                f.write(token + "\n")

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise SGRError("vocab file not found", ErrorCategory.IO, path=path)
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise SGRError("vocab file must start with the special tokens", ErrorCategory.MALFORMED_INPUT,
                           path=path)
        return cls(tokens[len(SPECIAL_TOKENS):])


def init_encoder_params(params, vocab_size, config, rng):
    """Register the encoder weights (prefix ctx.) in params"""
    d, ffn = config.hidden_size, 4 * config.hidden_size
    params.uniform("ctx.token_emb", (vocab_size, d), rng, fan_in=d)
    params.uniform("ctx.pos_emb", (config.max_len, d), rng, fan_in=d)
    params.ones("ctx.emb_ln_g", (d,))
    params.zeros("ctx.emb_ln_b", (d,))
    for layer in range(config.num_layers):
        p = f"ctx.l{layer}."
        for name in ("wq", "wk", "wv", "wo"):
            params.uniform(p + name, (d, d), rng)
            params.zeros(p + "b" + name[1], (d,))
        params.ones(p + "ln1_g", (d,))
        params.zeros(p + "ln1_b", (d,))
        params.uniform(p + "ff1_w", (d, ffn), rng)
        params.zeros(p + "ff1_b", (ffn,))
        params.uniform(p + "ff2_w", (ffn, d), rng)
        params.zeros(p + "ff2_b", (d,))
        params.ones(p + "ln2_g", (d,))
        params.zeros(p + "ln2_b", (d,))


# ── input construction ───────────────────────────────────────────────

def restructure_input(sentence_tokens, tracked_entities, max_len=128, mentions=None):
    """
    Build "[CLS] e_a [SEP] e_b [SEP] ... [SEP] sentence [SEP]"

    The prefix lists the tracked entities mentioned in the sentence, in
    first-mention order, spelled as mentioned. Over-long inputs lose
    sentence tokens from the tail; the prefix is never cut.

    Args:
        sentence_tokens (list): Tokenized sentence
        tracked_entities (list): Entity strings of the paragraph
        max_len (int): Maximum sequence length
        mentions (list): Precomputed MentionSpan list (optional)

    Returns:
        list: Token sequence
    """
    if mentions is None:
        mentions = match_entities(sentence_tokens, tracked_entities)
    prefix, seen = [], set()
    for span in sorted(mentions, key=lambda m: m.start):
        if span.entity in seen:
            continue
        seen.add(span.entity)
        prefix += list(sentence_tokens[span.start:span.end]) + [SEP]

    body = list(sentence_tokens)
    budget = max_len - 2 - len(prefix)
    if budget < 0:
        raise SGRError("entity prefix alone exceeds max_len", ErrorCategory.CONTRACT,
                       prefix_len=len(prefix), max_len=max_len)
    return [CLS] + prefix + body[:budget] + [SEP]


def restructure_init(prompt_tokens, max_len=128):
    """Input of the virtual init step: "[CLS] [INIT] prompt [SEP]" """
    return [CLS, INIT] + list(prompt_tokens)[:max_len - 3] + [SEP]


def concept_tokens(node):
    """Encoder input of one concept node"""
    if node.kind == NodeKind.GLOBAL:
        surface = [GLOBAL_TOKEN]
    elif node.kind == NodeKind.UNKLOC:
        surface = [UNKLOC_TOKEN]
    else:
        surface = tokenize(node.surface)
    return [CLS] + surface + [SEP]


# ── forward pass ─────────────────────────────────────────────────────

def _self_attention(x, params, prefix, num_heads):
    d = x.shape[-1]
    dh = d // num_heads
    q = nx.add(nx.matmul(x, params[prefix + "wq"]), params[prefix + "bq"])
    k = nx.add(nx.matmul(x, params[prefix + "wk"]), params[prefix + "bk"])
    v = nx.add(nx.matmul(x, params[prefix + "wv"]), params[prefix + "bv"])
    heads = []
    for h in range(num_heads):
        qh = nx.narrow(q, h * dh, (h + 1) * dh)
        kh = nx.narrow(k, h * dh, (h + 1) * dh)
        vh = nx.narrow(v, h * dh, (h + 1) * dh)
        scores = nx.scale(nx.matmul(qh, nx.transpose(kh)), 1.0 / np.sqrt(dh))
        heads.append(nx.matmul(nx.softmax(scores), vh))
    merged = nx.concat(heads, axis=-1) if num_heads > 1 else heads[0]
    return nx.add(nx.matmul(merged, params[prefix + "wo"]), params[prefix + "bo"])


def encode_context(token_sequence, params, vocab, config, counter=None, kind="context"):
    """
    Transformer forward pass returning the last-layer [CLS] state

    Args:
        token_sequence (list): Tokens, position 0 is [CLS]
        params (Parameters): Model parameters (ctx.* entries)
        vocab (Vocab): Token vocabulary
        config: Object with hidden_size, num_layers, num_heads, max_len
        counter (Counter): Optional invocation counter
        kind (str): Counter key

    Returns:
        Tensor: (d,) context representation
    """
    if not token_sequence:
        raise SGRError("cannot encode an empty sequence", ErrorCategory.CONTRACT)
    if len(token_sequence) > config.max_len:
        raise SGRError("sequence longer than max_len", ErrorCategory.CONTRACT,
                       length=len(token_sequence), max_len=config.max_len)
    if counter is not None:
        counter[kind] += 1

    ids = vocab.encode(token_sequence)
    x = nx.add(nx.embedding(params["ctx.token_emb"], ids),
               nx.take_rows(params["ctx.pos_emb"], list(range(len(ids)))))
    x = nx.layer_norm(x, params["ctx.emb_ln_g"], params["ctx.emb_ln_b"])
    for layer in range(config.num_layers):
        p = f"ctx.l{layer}."
        x = nx.layer_norm(nx.add(x, _self_attention(x, params, p, config.num_heads)),
                          params[p + "ln1_g"], params[p + "ln1_b"])
        hidden = nx.gelu(nx.add(nx.matmul(x, params[p + "ff1_w"]), params[p + "ff1_b"]))
        ff = nx.add(nx.matmul(hidden, params[p + "ff2_w"]), params[p + "ff2_b"])
        x = nx.layer_norm(nx.add(x, ff), params[p + "ln2_g"], params[p + "ln2_b"])
    return nx.take_rows(x, 0)


def init_concept_features(graph, params, vocab, config, counter=None):
    """
    Static node features: every concept's surface through the encoder

    Concepts sharing a surface share one encoding.

    Returns:
        Tensor: (M, d) feature table in node order
    """
    cache = {}
    rows = []
    for node in graph.nodes:
        tokens = tuple(concept_tokens(node)[:config.max_len - 1])
        if tokens[-1] != SEP:
            tokens = tokens + (SEP,)
        if tokens not in cache:
            cache[tokens] = encode_context(list(tokens), params, vocab, config, counter, kind="concept")
        rows.append(cache[tokens])
    return nx.stack(rows)
