"""
End-to-end tests of the command line
"""

import json

import pytest

from cli import run
from context_encoder import Vocab
from corpus import load_instances, load_predictions, save_instances, save_predictions
from error_handler import EXIT_CONTRACT, EXIT_IO, EXIT_OK
from state_reasoner import gold_records
from synthetic import generate_corpus


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "data" / "synthetic.jsonl"
    assert run(["gen-synthetic", "--paragraphs", "10", "--seed", "4", "--out", str(path)]) == EXIT_OK
    return path


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "sgr.env"
    path.write_text("hidden_size=8\nnum_layers=1\nnum_heads=2\nmax_len=48\nbatch_size=4\n"
                    "learning_rate=0.01\n")
    return path


def test_gen_synthetic_is_deterministic(tmp_path, corpus_file):
    again = tmp_path / "again.jsonl"
    run(["gen-synthetic", "--paragraphs", "10", "--seed", "4", "--out", str(again)])
    assert again.read_text() == corpus_file.read_text()
    assert len(load_instances(str(again))) == 10


def test_split_is_80_10_10(tmp_path, corpus_file):
    out = tmp_path / "splits"
    assert run(["split", "--data", str(corpus_file), "--seed", "1", "--out", str(out)]) == EXIT_OK
    sizes = {name: len(load_instances(str(out / f"{name}.jsonl"))) for name in ("train", "dev", "test")}
    assert sizes == {"train": 8, "dev": 1, "test": 1}


def test_preprocess_attaches_candidates_and_mentions(tmp_path, corpus_file):
    out = tmp_path / "prep.jsonl"
    assert run(["preprocess", "--data", str(corpus_file), "--split", "test", "--out", str(out)]) == EXIT_OK
    for instance in load_instances(str(out)):
        assert instance.location_candidates
        assert len(instance.mentions) == instance.num_steps


def test_train_predict_evaluate(tmp_path, corpus_file, small_config, capsys):
    ckpt = tmp_path / "ckpt" / "sgr.ckpt"
    log = tmp_path / "logs" / "train.csv"
    code = run(["train", "--data", str(corpus_file), "--dev", str(corpus_file), "--config", str(small_config),
                "--epochs", "2", "--seed", "3", "--checkpoint", str(ckpt), "--log", str(log)])
    assert code == EXIT_OK
    assert ckpt.exists() and log.exists()
    vocab = ckpt.with_suffix(".vocab")
    assert vocab.read_text().splitlines()[0] == "[PAD]"

    pred = tmp_path / "pred.tsv"
    dump = tmp_path / "graphs.jsonl"
    code = run(["predict", "--data", str(corpus_file), "--checkpoint", str(ckpt), "--out", str(pred),
                "--workers", "2", "--dump-graphs", str(dump), "--count-invocations", "--vocab", str(vocab)])
    assert code == EXIT_OK
    instances = load_instances(str(corpus_file))
    assert len(load_predictions(str(pred))) == sum(i.num_steps * i.num_entities for i in instances)
    assert len(dump.read_text().splitlines()) == len(instances)
    assert "scene-wise" in capsys.readouterr().out

    metrics = tmp_path / "metrics.json"
    code = run(["evaluate", "--pred", str(pred), "--gold", str(corpus_file), "--task", "all",
                "--out", str(metrics)])
    assert code == EXIT_OK
    report = json.loads(metrics.read_text())
    assert 0.0 <= report["document_level"]["overall_f1"] <= 1.0
    assert "recipes" in report


def test_gold_against_gold_scores_one(tmp_path, corpus_file):
    gold_tsv = tmp_path / "gold.tsv"
    instances = load_instances(str(corpus_file))
    save_predictions([row for inst in instances for row in gold_records(inst)], str(gold_tsv))
    metrics = tmp_path / "metrics.json"
    assert run(["evaluate", "--pred", str(gold_tsv), "--gold", str(gold_tsv), "--out", str(metrics)]) == EXIT_OK
    report = json.loads(metrics.read_text())
    assert report["document_level"]["overall_f1"] == 1.0
    assert report["sentence_level"]["macro"] == 1.0


def test_roundtrip_check_passes_on_synthetic_data(corpus_file, capsys):
    assert run(["roundtrip-check", "--data", str(corpus_file)]) == EXIT_OK
    assert "10/10" in capsys.readouterr().out


def test_roundtrip_check_flags_same_place_moves(tmp_path, water_instance, capsys):
    water_instance.gold_states[0][1] = "M"
    water_instance.gold_locations[0][1] = "root"
    path = tmp_path / "bad.jsonl"
    save_instances([water_instance], str(path))
    assert run(["roundtrip-check", "--data", str(path)]) == EXIT_CONTRACT
    assert "p1 rejected" in capsys.readouterr().out


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--hidden-size", "8", "--max-entries", "1", "--seed", "2"]) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out


def test_missing_input_exits_with_io_code(tmp_path, capsys, issue_log):
    assert run(["roundtrip-check", "--data", str(tmp_path / "absent.jsonl")]) == EXIT_IO
    assert "error (io)" in capsys.readouterr().err
    assert issue_log.read_issues()[-1]["issue_type"] == "io_error"


def test_contract_violation_exits_with_one(tmp_path, small_config):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code = run(["train", "--data", str(empty), "--config", str(small_config),
                "--checkpoint", str(tmp_path / "x.ckpt"), "--log", str(tmp_path / "log.csv")])
    assert code == EXIT_CONTRACT


def test_count_invocations_reports_entity_wise_growth(tmp_path, small_config, capsys):
    data = tmp_path / "one.jsonl"
    save_instances(generate_corpus(1, seed=9), str(data))
    ckpt = tmp_path / "m.ckpt"
    run(["train", "--data", str(data), "--config", str(small_config), "--epochs", "1",
         "--checkpoint", str(ckpt), "--log", str(tmp_path / "log.csv")])
    capsys.readouterr()
    assert run(["predict", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(tmp_path / "p.tsv"),
                "--count-invocations"]) == EXIT_OK
    instance = load_instances(str(data))[0]
    T, N = instance.num_steps, instance.num_entities
    out = capsys.readouterr().out
    assert f"scene-wise {T + 1}, entity-wise reference {N * (T + 1)}" in out


@pytest.mark.slow
def test_gradcheck_defaults_check_every_entry(capsys):
    assert run(["gradcheck", "--seed", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "T=3" in out
    nodes = int(out.split(" node(s)")[0].rsplit(" ", 1)[-1])
    assert nodes <= 8


def test_predict_rejects_a_foreign_vocab_file(tmp_path, small_config):
    data = tmp_path / "one.jsonl"
    save_instances(generate_corpus(1, seed=9), str(data))
    ckpt = tmp_path / "m.ckpt"
    assert run(["train", "--data", str(data), "--config", str(small_config), "--epochs", "1",
                "--checkpoint", str(ckpt), "--log", str(tmp_path / "log.csv")]) == EXIT_OK
    foreign = tmp_path / "other.vocab"
    Vocab(["unrelated"]).save(str(foreign))
    code = run(["predict", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(tmp_path / "p.tsv"),
                "--vocab", str(foreign)])
    assert code == EXIT_CONTRACT
