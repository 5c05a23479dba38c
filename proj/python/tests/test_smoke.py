import json

import pytest

import stalab


def test_encode_round_trip():
    ids = stalab.encode("Hello, world!")
    assert len(ids) == 13
    assert stalab.decode(ids) == "Hello, world!"


def test_unencodable_raises():
    with pytest.raises(stalab.Error, match="UnencodableCharacter"):
        stalab.encode("café")


def test_corpus_splits():
    records = stalab.gen_fact_corpus(seed=7)
    splits = [r["split"] for r in records]
    assert splits.count("forget") == 10
    assert splits.count("retain") == 90
    assert splits.count("holdout") == 20
    assert records == stalab.gen_fact_corpus(seed=7)


def test_random_string():
    s = stalab.gen_random_string(3, 40)
    assert len(s) == 40
    assert all(33 <= ord(c) <= 126 for c in s)


def test_welch_matches_scipy():
    scipy_stats = pytest.importorskip("scipy.stats")
    a, b = [2.1, 2.5, 2.3, 2.7], [3.9, 4.4, 4.1]
    ours = stalab.welch_t(a, b)
    ref = scipy_stats.ttest_ind(a, b, equal_var=False)
    assert ours["t"] == pytest.approx(ref.statistic, abs=1e-9)
    assert ours["p"] == pytest.approx(ref.pvalue, abs=1e-9)


def test_config_overrides():
    cfg = stalab.load_config(overrides=["attack.runs_per_prompt=2"])
    assert cfg["attack"]["runs_per_prompt"] == 2
    with pytest.raises(stalab.Error, match="InvalidConfig"):
        stalab.load_config(overrides=["nonsense.key=1"])


TINY = [
    "corpus.n_facts=20",
    "corpus.n_holdout=4",
    "filler.n_docs=20",
    "model.layers=1",
    "model.heads=2",
    "model.model_dim=16",
    "model.ffn_dim=32",
    "model.context_len=128",
    "pretrain.epochs=1",
    "finetune.epochs=1",
    "finetune.memorization_gate=0",
    'unlearn.methods=["GA"]',
    "unlearn.specs.GA.steps=2",
    "attack.max_iters_per_token=3",
    "attack.max_soft_tokens=2",
    "attack.runs_per_prompt=2",
    "attack.holdout_runs=1",
]


def test_lab_stages_and_audit(tmp_path):
    lab = stalab.Lab(tmp_path / "run", overrides=TINY)
    assert lab.gen_corpus()
    assert not lab.gen_corpus()
    lab.pretrain()
    lab.finetune()
    lab.unlearn("all")
    assert lab.zoo_ids() == ["base", "fine_tuned", "unlearned-GA"]

    ft = stalab.load_checkpoint(lab.artifact("zoo/fine_tuned.ckpt"))
    ga = stalab.load_checkpoint(lab.artifact("zoo/unlearned-GA.ckpt"))
    assert ga.provenance == "unlearned(GA)"

    with open(lab.artifact("corpus/facts.jsonl")) as f:
        records = [json.loads(line) for line in f]
    forget = [r for r in records if r["split"] == "forget"]
    budget = stalab.AttackBudget()
    budget.max_iters_per_token = 3
    budget.max_soft_tokens = 2
    budget.runs_per_prompt = 2
    report = stalab.sta_audit(ga, ft, forget, budget, seed=1)
    assert report["model_a"] == "unlearned-GA"
    assert len(report["samples_a"]) == 2 * len(forget)
    assert 0.0 <= report["p"] <= 1.0

    flags = stalab.oracle_audit(ft, [r["id"] for r in records], records)
    assert sum(flags.values()) == 20

    outcome = stalab.attack(ft, forget[0]["prompt"], forget[0]["completion"], budget, seed=3)
    assert outcome["soft_tokens_used"] in (1, 2)
