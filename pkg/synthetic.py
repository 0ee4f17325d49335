"""
Synthetic procedural corpus from a small rule grammar

Each paragraph tracks a few entities through templated events (move,
create, destroy, convert, filler). The gold state and location annotation
is known by construction, so the whole pipeline can be trained and scored
without the real datasets.
"""

import random

from corpus import NO_LOCATION, ProcedureInstance

ENTITY_POOL = (
    "water", "sugar", "seed", "rock", "ice", "steam", "sediment", "gas", "oil", "salt",
    "pollen", "nectar", "sap", "ash", "dust", "magma", "clay", "starch", "acid", "carbon",
)

LOCATION_POOL = (
    "soil", "root", "leaf", "river", "ocean", "cloud", "tank", "pipe", "jar", "oven",
    "stem", "lake", "cave", "field", "kettle", "basin", "valley", "flask",
)

# Upper-case symbols expand; <slot> tokens are filled from the event
GRAMMAR = {
    "MOVE": [["the", "<e>", "MOVE_VERB", "from", "the", "<a>", "to", "the", "<b>", "."],
             ["from", "the", "<a>", ",", "the", "<e>", "MOVE_VERB", "to", "the", "<b>", "."]],
    "MOVE_VERB": [["moves"], ["travels"], ["flows"], ["is", "carried"]],
    "CREATE": [["the", "<e>", "CREATE_VERB", "in", "the", "<l>", "."]],
    "CREATE_VERB": [["forms"], ["appears"], ["is", "produced"]],
    "DESTROY": [["the", "<e>", "DESTROY_VERB", "in", "the", "<l>", "."]],
    "DESTROY_VERB": [["is", "consumed"], ["breaks", "down"], ["disappears"]],
    "CONVERT": [["the", "<e1>", "CONVERT_VERB", "<e2>", "in", "the", "<l>", "."]],
    "CONVERT_VERB": [["turns", "into"], ["becomes"], ["changes", "into"]],
    "FILLER": [["nothing", "happens", "in", "the", "<l>", "."],
               ["time", "passes", "at", "the", "<l>", "."]],
}


def expand(symbol, rng, slots):
    """Expand a grammar symbol into a token list"""
    if symbol.startswith("<") and symbol.endswith(">"):
        return [slots[symbol[1:-1]]]
    if symbol not in GRAMMAR:
        return [symbol]
    tokens = []
    for part in rng.choice(GRAMMAR[symbol]):
        tokens.extend(expand(part, rng, slots))
    return tokens


def _events(world, absent, locations):
    """Events applicable to the current world (entity -> location)"""
    options = ["FILLER"]
    if world and len(locations) > 1:
        options.append("MOVE")
    if absent:
        options.append("CREATE")
    if world:
        options.append("DESTROY")
    if world and absent:
        options.append("CONVERT")
    return options


def generate_paragraph(rng, para_id, min_steps=3, max_steps=6):
    """
    One synthetic paragraph with its gold annotation

    Args:
        rng (random.Random): Source of randomness
        para_id (str): Paragraph id

    Returns:
        ProcedureInstance: Sentences, prompt, entities, gold states/locations
    """
    entities = rng.sample(ENTITY_POOL, rng.randint(2, 4))
    locations = rng.sample(LOCATION_POOL, rng.randint(3, 4))
    T = rng.randint(min_steps, max_steps)

    world = {}
    for entity in entities:
        if rng.random() < 0.6:
            world[entity] = rng.choice(locations)
    if not world:
        world[entities[0]] = rng.choice(locations)
    initial = [world.get(e, NO_LOCATION) for e in entities]
    prompt = "starting with " + " and ".join(f"the {e} in the {world[e]}" for e in entities if e in world) + " ."

    states = {e: [] for e in entities}
    trail = {e: [] for e in entities}
    ever = {e: e in world for e in entities}
    sentences = []
    for _ in range(T):
        absent = [e for e in entities if e not in world]
        event = rng.choice(_events(world, absent, locations))
        changed = {}
        if event == "MOVE":
            entity = rng.choice(sorted(world))
            target = rng.choice([l for l in locations if l != world[entity]])
            slots = {"e": entity, "a": world[entity], "b": target}
            world[entity] = target
            changed[entity] = "M"
        elif event == "CREATE":
            entity = rng.choice(absent)
            slots = {"e": entity, "l": rng.choice(locations)}
            world[entity] = slots["l"]
            changed[entity] = "C"
        elif event == "DESTROY":
            entity = rng.choice(sorted(world))
            slots = {"e": entity, "l": world.pop(entity)}
            changed[entity] = "D"
        elif event == "CONVERT":
            source = rng.choice(sorted(world))
            product = rng.choice(absent)
            slots = {"e1": source, "e2": product, "l": world.pop(source)}
            world[product] = slots["l"]
            changed[source], changed[product] = "D", "C"
        else:
            slots = {"l": rng.choice(locations)}
        sentences.append(" ".join(expand(event, rng, slots)))

        for entity in entities:
            if entity in changed:
                label = changed[entity]
            elif entity in world:
                label = "E"
            else:
                label = "O_B" if ever[entity] else "O_A"
            ever[entity] = ever[entity] or entity in world
            states[entity].append(label)
            trail[entity].append(world.get(entity, NO_LOCATION))

    return ProcedureInstance(
        para_id=para_id,
        sentences=sentences,
        entities=list(entities),
        prompt=prompt,
        gold_states=[states[e] for e in entities],
        gold_locations=[trail[e] for e in entities],
        gold_initial_locations=initial,
        location_candidates=list(locations),
    ).validate()


def generate_corpus(num_paragraphs, seed=0, min_steps=3, max_steps=6):
    """num_paragraphs synthetic paragraphs; identical for identical arguments"""
    rng = random.Random(seed)
    return [generate_paragraph(rng, f"syn-{seed}-{k:04d}", min_steps, max_steps)
            for k in range(num_paragraphs)]
