"""
Trainer - teacher-forced maximum-likelihood training with Adam

Loss per paragraph: for every step 0..T, binary cross-entropy of each
entity's presence plus categorical cross-entropy of the location of each
entity that exists in the gold scene. Batch losses are averaged. The
parameters with the best dev document-level F1 are kept.
"""

import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

import numerics as nx
from app_logger import log_non_finite_loss
from context_encoder import Vocab
from error_handler import ErrorCategory, SGRError
from evaluator import eval_document_level
from predictor import TEACHER_FORCED, SceneGraphReasoner, predict_records, rollout
from scene_graph import construct_gold_graphs, graph_for_instance
from state_reasoner import gold_records
from structure_encoder import build_relation_vocab

LOG_COLUMNS = ["epoch", "train_loss", "dev_doc_f1"]


def step_loss(predictions, gold_graphs):
    """
    Summed presence BCE and location CE over steps 0..T

    Args:
        predictions (list): ScenePrediction per step
        gold_graphs (list): Gold SceneGraph per step

    Returns:
        Tensor: Scalar loss
    """
    if len(predictions) != len(gold_graphs):
        raise SGRError("predictions and gold scene graphs are misaligned", ErrorCategory.CONTRACT,
                       predictions=len(predictions), gold=len(gold_graphs))
    if not predictions:
        raise SGRError("no steps to score", ErrorCategory.CONTRACT)
    total = None
    for prediction, gold in zip(predictions, gold_graphs):
        n = prediction.mask_logits.shape[0]
        mask = gold.entity_mask(n)
        term = nx.binary_cross_entropy_with_logits(prediction.mask_logits, mask)
        rows = [e for e in range(n) if mask[e]]
        if rows:
            targets = [gold.location_column(e) for e in rows]
            term = nx.add(term, nx.cross_entropy_with_logits(prediction.loc_logits, rows, targets))
        total = term if total is None else nx.add(total, term)
    return total


class Adam:
    """
    Adam optimizer over a Parameters collection

    Args:
        params (Parameters): Updated in place
        lr (float): Learning rate
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros(t.shape) for name, t in params.items()}
        self.v = {name: np.zeros(t.shape) for name, t in params.items()}

    def step(self, grads):
        """Apply one update; parameters without a gradient see a zero gradient"""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, tensor in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros(tensor.shape)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainingExample:
    instance: object
    graph: object
    gold: list


def prepare_examples(instances, split, triples=None, use_knowledge=True):
    """Complete graph and gold scenes of each annotated paragraph"""
    examples = []
    for instance in instances:
        if not instance.has_gold:
            raise SGRError("training data needs gold annotation", ErrorCategory.MISSING_FIELD,
                           para_id=instance.para_id, field="gold_states")
        graph = graph_for_instance(instance, split, triples, use_knowledge)
        examples.append(TrainingExample(instance, graph, construct_gold_graphs(instance, graph)))
    return examples


def instance_loss(model, example):
    result = rollout(example.instance, example.graph, model, TEACHER_FORCED, example.gold)
    return step_loss(result.predictions, example.gold)


def batch_loss(model, batch):
    """Mean paragraph loss of a batch"""
    total = None
    for example in batch:
        loss = instance_loss(model, example)
        total = loss if total is None else nx.add(total, loss)
    return nx.scale(total, 1.0 / len(batch))


def dev_document_f1(model, instances, triples=None, split="dev"):
    """Autoregressive document-level F1 against the gold rows"""
    results = predict_records(model, instances, triples, split=split)
    predicted = [row for result in results for row in result.records]
    gold = [row for instance in instances for row in gold_records(instance)]
    return eval_document_level(predicted, gold).overall_f1


@dataclass
class TrainResult:
    model: SceneGraphReasoner
    history: pd.DataFrame
    best_epoch: int
    best_dev_f1: float


def train(train_instances, dev_instances, config, triples=None, log_path=None, plot_path=None):
    """
    Train a SceneGraphReasoner

    Args:
        train_instances (list): Annotated training paragraphs
        dev_instances (list): Annotated dev paragraphs (may be empty)
        config (TrainConfig): Hyperparameters
        triples (list): Shared knowledge triples
        log_path (str): Optional CSV training log
        plot_path (str): Optional training-curve image

    Returns:
        TrainResult: Model restored to the selected epoch, plus the history
    """
    if not train_instances:
        raise SGRError("training corpus is empty", ErrorCategory.CONTRACT)

    examples = prepare_examples(train_instances, "train", triples, config.knowledge_train)
    vocab = Vocab.from_instances(train_instances, triples)
    relation_vocab = build_relation_vocab([ex.graph for ex in examples])
    model = SceneGraphReasoner.initialize(vocab, relation_vocab, config)
    optimizer = Adam(model.params, config.learning_rate)
    rng = np.random.default_rng(config.seed)

    print(f"[Trainer] {len(examples)} paragraph(s), {len(vocab)} token(s), "
          f"{len(relation_vocab)} relation(s), {model.params.num_values()} parameter value(s)")

    history = []
    best_epoch, best_f1, best_snapshot = 0, -1.0, None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        batch_losses = []
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            try:
                with nx.Tape() as tape:
                    loss = batch_loss(model, batch)
                grads = nx.backward(tape, loss)
            except SGRError as e:
                if e.category == ErrorCategory.NON_FINITE:
                    para_ids = [ex.instance.para_id for ex in batch]
                    log_non_finite_loss(epoch, batch_index, para_ids)
                    raise SGRError("non-finite value during training", ErrorCategory.NON_FINITE,
                                   epoch=epoch, batch=batch_index, para_ids=",".join(para_ids))
                raise
            optimizer.step(grads)
            batch_losses.append(loss.item())

        train_loss = float(np.mean(batch_losses))
        dev_f1 = float("nan")
        evaluate_now = epoch % config.eval_every == 0 or epoch == config.epochs
        if dev_instances and evaluate_now:
            dev_f1 = dev_document_f1(model, dev_instances, triples)
            if dev_f1 > best_f1:
                best_epoch, best_f1, best_snapshot = epoch, dev_f1, model.params.snapshot()
        history.append({"epoch": epoch, "train_loss": train_loss, "dev_doc_f1": dev_f1})
        print(f"[Trainer] epoch {epoch} loss={train_loss:.6f} dev_doc_f1={dev_f1:.4f}")

    if best_snapshot is not None:
        model.params.restore(best_snapshot)
        print(f"[Trainer] Selected epoch {best_epoch} (dev doc F1 {best_f1:.4f})")
    else:
        best_epoch = config.epochs

    frame = pd.DataFrame(history, columns=LOG_COLUMNS)
    if log_path:
        _ensure_parent(log_path)
        frame.to_csv(log_path, index=False)
    if plot_path:
        save_training_plot(frame, plot_path)

    accuracy = teacher_forced_accuracy(model, examples)
    print(f"[Trainer] Train teacher-forced accuracy: mask {accuracy.mask_accuracy:.4f}, "
          f"location {accuracy.location_accuracy:.4f}")
    return TrainResult(model, frame, best_epoch, best_f1 if best_snapshot is not None else float("nan"))


@dataclass
class TeacherForcedAccuracy:
    mask_correct: int = 0
    mask_total: int = 0
    location_correct: int = 0
    location_total: int = 0

    @property
    def mask_accuracy(self):
        return self.mask_correct / self.mask_total if self.mask_total else 1.0

    @property
    def location_accuracy(self):
        return self.location_correct / self.location_total if self.location_total else 1.0

    @property
    def overall(self):
        total = self.mask_total + self.location_total
        return (self.mask_correct + self.location_correct) / total if total else 1.0


def teacher_forced_accuracy(model, examples, triples=None):
    """
    Fraction of gold presence bits and gold location argmaxes reproduced

    Args:
        model (SceneGraphReasoner): Model to score
        examples (list): TrainingExample objects, or annotated instances
        triples (list): Knowledge triples used when instances are given
    """
    if examples and not isinstance(examples[0], TrainingExample):
        examples = prepare_examples(examples, "train", triples, model.config.knowledge_train)
    report = TeacherForcedAccuracy()
    for example in examples:
        result = rollout(example.instance, example.graph, model, TEACHER_FORCED, example.gold)
        for prediction, scene, gold in zip(result.predictions, result.scenes, example.gold):
            n = example.graph.num_entities
            gold_mask = gold.entity_mask(n)
            report.mask_correct += int(np.sum(scene.entity_mask(n) == gold_mask))
            report.mask_total += n
            loc_probs = prediction.loc_probs.numpy()
            for e in range(n):
                if gold_mask[e]:
                    report.location_total += 1
                    report.location_correct += int(int(np.argmax(loc_probs[e])) == gold.location_column(e))
    return report


def save_training_plot(history, path):
    """Train loss and dev document F1 per epoch"""
    _ensure_parent(path)
    fig, ax = plt.subplots(figsize=(10, 5))
    ax.plot(history["epoch"], history["train_loss"], label="train loss", linewidth=2)
    ax.set_xlabel("Epoch", fontsize=12)
    ax.set_ylabel("Loss", fontsize=12)
    ax.grid(True, alpha=0.3)
    dev = history.dropna(subset=["dev_doc_f1"])
    if not dev.empty:
        ax2 = ax.twinx()
        ax2.plot(dev["epoch"], dev["dev_doc_f1"], color="tab:orange", marker="o", label="dev doc F1")
        ax2.set_ylabel("Dev document F1", fontsize=12)
        ax2.legend(loc="upper right", fontsize=10)
    ax.legend(loc="upper left", fontsize=10)
    ax.set_title("Training Curve", fontsize=14, fontweight="bold")
    plt.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def _ensure_parent(path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
