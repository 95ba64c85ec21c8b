"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints a single summary line as its last output; the conftest
collects those into an "acceptance criteria" section of the pytest report.
Run just this module with ``pytest tests/test_acceptance.py -v``.
"""

import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from mtlforge import cli
from mtlforge.checkpoint import save_checkpoint
from mtlforge.data import (
    REPORTING_SEEDS,
    Dataset,
    Example,
    SplitSpec,
    builtin_schemas,
    goemotions_splits,
    save_dataset,
    split,
    synth_generate,
)
from mtlforge.encoder import PRESETS, EncoderConfig
from mtlforge.experiments import directional
from mtlforge.heads import LabelSpace, combined_loss, cross_entropy, head_forward, init_head
from mtlforge.hpo import SearchSpace, TrialRecord, read_ledger, run_search, running_best, sample_config
from mtlforge.metrics import ConfusionMatrix, macro_f1, wilcoxon_signed_rank
from mtlforge.tensor import Tape, Tensor, backward
from mtlforge.tokenizer import build_vocab
from mtlforge.trainer import TaskSplits, TrainConfig, train_mtl, train_stl

from test_hpo import bowl, stable
from test_metrics import brute_macro_f1, enumerate_wilcoxon

REPO = Path(__file__).resolve().parents[1]


def report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def synth_splits(n, seed=69556):
    primary, auxiliary = synth_generate(n, vocab_words=400, seed=7, correlation=0.9)
    spec = SplitSpec(seed=seed)
    p = split(primary, spec)
    a = split(auxiliary, spec)
    vocab = build_vocab(p[0].texts + a[0].texts, 4000, 2)
    return TaskSplits(*p), TaskSplits(*a), vocab


def test_criterion_01_gradient_correctness(capsys):
    cfg = PRESETS["tiny"]
    assert (cfg.n_layers, cfg.d_model) == (2, 64)
    code = cli.main(["gradcheck", "--preset", "tiny", "--sample", "200", "--h", "1e-5"])
    line = capsys.readouterr().out.strip()
    err = float(line.split("max relative error ")[1].split()[0])
    report(1, code == 0 and err < 1e-4, f"2-layer d_model=64, 200 probes, max relative error {err:.2e} < 1e-4")


def test_criterion_02_lambda_one_equals_stl(tmp_path):
    primary, aux, vocab = synth_splits(500)
    enc = EncoderConfig(max_len=16)
    cfg = TrainConfig(max_epochs=4, patience=4)
    stl, r_stl = train_stl(primary, cfg, enc, vocab)
    mtl, r_mtl = train_mtl(primary, aux, TrainConfig(**{**cfg.to_dict(), "mode": "mtl", "lam": 1.0,
                                                        "schedule": "primary_only"}), enc, vocab)
    a, b = save_checkpoint(stl, tmp_path / "stl"), save_checkpoint(mtl, tmp_path / "mtl")
    shared = sorted(p.name for p in (a / "tensors").iterdir())
    mismatched = [n for n in shared if (a / "tensors" / n).read_bytes() != (b / "tensors" / n).read_bytes()]
    same_vocab = (a / "vocab.txt").read_bytes() == (b / "vocab.txt").read_bytes()
    same_scores = r_stl.test_macro_f1[primary.name] == r_mtl.test_macro_f1[primary.name]
    report(2, not mismatched and same_vocab and same_scores,
           f"{len(shared)} encoder/primary-head blobs byte-identical, {len(mismatched)} differ")


def test_criterion_03_loss_combination_identity():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        lam = float(rng.random())
        x = Tensor(rng.standard_normal((6, 8)))
        shared = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
        h1 = init_head(LabelSpace("p", tuple("abcd")), 8, trial, 0)
        h2 = init_head(LabelSpace("e", tuple("abcdefg")), 8, trial, 1)
        h1.W.data, h2.W.data = rng.standard_normal((8, 4)), rng.standard_normal((8, 7))
        y1, y2 = rng.integers(0, 4, 6), rng.integers(0, 7, 6)
        tensors = [shared, h1.W, h1.b, h2.W, h2.b]

        def grads(which):
            for t in tensors:
                t.grad = None
            with Tape() as tape:
                z = x @ shared
                l1 = cross_entropy(head_forward(h1, z), y1)
                l2 = cross_entropy(head_forward(h2, z), y2)
                loss = {"both": lambda: combined_loss(l1, l2, lam), "l1": lambda: l1, "l2": lambda: l2}[which]()
            backward(loss, tape)
            return [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]

        g, g1, g2 = grads("both"), grads("l1"), grads("l2")
        for gc, a, b in zip(g, g1, g2):
            worst = max(worst, float(np.max(np.abs(gc - (lam * a + (1 - lam) * b)))))
    report(3, worst < 1e-10, f"100 triples, max elementwise deviation {worst:.1e} < 1e-10")


def test_criterion_04_overfits_separable_data():
    primary, _ = synth_generate(500, vocab_words=400, seed=7, correlation=0.9)
    task = TaskSplits(*split(primary, SplitSpec(seed=69556)))
    vocab = build_vocab(task.train.texts, 4000, 2)
    cfg = TrainConfig(max_epochs=30, patience=30, eval_train=True)
    _, rep = train_stl(task, cfg, EncoderConfig(), vocab)
    curve = [e["train_macro_f1"][task.name] for e in rep.epochs]
    first = next((i + 1 for i, f in enumerate(curve) if f > 0.95), None)
    report(4, first is not None, f"train macro-F1 first above 0.95 at epoch {first}, peak {max(curve):.4f}")


@pytest.mark.slow
def test_criterion_05_directional_mtl_benefit(tmp_path):
    summary = directional(tmp_path)
    small, large = summary[150], summary[2000]
    assert (tmp_path / "size150" / "comparison.txt").is_file()
    ok = small["mtl"] >= small["stl"] and large["gap"] < small["gap"]
    report(5, ok, f"size 150: STL {small['stl']:.4f} MTL {small['mtl']:.4f} gap {small['gap']:+.4f}; "
                  f"size 2000 gap {large['gap']:+.4f}")


def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        K = int(rng.integers(2, 8))
        n = int(rng.integers(1, 61))
        gold, pred = rng.integers(0, K, n), rng.integers(0, K, n)
        assert macro_f1(ConfusionMatrix.from_predictions(gold, pred, K)) == float(brute_macro_f1(gold, pred, K))
    checked = 0
    for n in range(1, 11):
        for _ in range(30):
            diffs = [float(v) for v in rng.integers(-5, 6, n)]
            if not any(diffs):
                continue
            res = wilcoxon_signed_rank([(d, 0.0) for d in diffs])
            W, p = enumerate_wilcoxon(diffs)
            assert (res.W, res.p_two_sided) == (W, float(p))
            checked += 1
    base = wilcoxon_signed_rank([(1.0 + i, 0.0) for i in range(5)])
    ok = base.W == 0 and base.p_two_sided == 0.0625
    report(6, ok, f"1000 macro-F1 instances exact, {checked} Wilcoxon cases match enumeration, n=5 W=0 p=0.0625")


def test_criterion_07_split_protocol():
    space = builtin_schemas()["phm2017"]
    ds = Dataset("phm", space, [Example(str(i), f"t{i}", space.labels[i % 4]) for i in range(4987)])
    for seed in REPORTING_SEEDS:
        parts = split(ds, SplitSpec(seed=seed))
        again = split(ds, SplitSpec(seed=seed))
        ids = [[e.id for e in p.examples] for p in parts]
        assert tuple(map(len, ids)) == (3989, 498, 500)
        assert ids == [[e.id for e in p.examples] for p in again]
        flat = [i for part in ids for i in part]
        assert len(set(flat)) == 4987 and set(flat) == {e.id for e in ds.examples}
    report(7, True, "sizes (3989, 498, 500) for all 5 seeds, deterministic, disjoint and complete")


def test_criterion_08_schema_fidelity(tmp_path):
    schemas = builtin_schemas()
    counts = [schemas[k].K for k in ("phm2017", "hmc2019", "self2020", "ill2021", "goemotions")]
    assert counts == [4, 3, 3, 2, 7]
    assert schemas["goemotions"].labels == ("anger", "disgust", "fear", "joy", "sadness", "surprise", "neutral")
    emo = schemas["goemotions"]
    paths = []
    for name, n in (("train", 43410), ("dev", 5426), ("test", 5427)):
        ds = Dataset("goemotions", emo, [Example(f"{name}{i}", f"w{i % 97}", emo.labels[i % 7]) for i in range(n)])
        save_dataset(ds, tmp_path / f"{name}.jsonl")
        paths.append(tmp_path / f"{name}.jsonl")
    sizes = tuple(len(d) for d in goemotions_splits(*paths))
    report(8, sizes == (43410, 5426, 5427), f"classes 4/3/3/2/7, GoEmotions official splits {sizes}")


def test_criterion_09_end_to_end_determinism(tmp_path, capsys):
    (tmp_path / "configs").mkdir()
    shutil.copy(REPO / "configs" / "synthetic.ini", tmp_path / "configs" / "synthetic.ini")
    assert cli.main(["synth", str(tmp_path / "data" / "synth")]) == 0
    out = tmp_path / "run"
    argv = ["train", str(tmp_path / "configs" / "synthetic.ini"), "--seed", "69556", "--out", str(out)]
    assert cli.main(argv) == 0
    first = tmp_path / "first"
    shutil.copytree(out, first)
    assert cli.main(argv) == 0
    capsys.readouterr()
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file() and p.name != "report.timing.json")
    differ = [str(f) for f in files if (first / f).read_bytes() != (out / f).read_bytes()]
    assert json.loads((out / "report.json").read_text())["config"]["seed"] == 69556
    assert Path("checkpoint/manifest.txt") in files and Path("report.json") in files
    report(9, not differ, f"{len(files)} files compared byte for byte, {len(differ)} differ")


def test_criterion_10_hpo_sanity(tmp_path):
    space = SearchSpace.for_mode("mtl")
    rng = np.random.default_rng(10)
    history = [TrialRecord(i, {"batch_size": int(rng.choice([32, 64, 128])),
                               "learning_rate": float(10 ** rng.uniform(-6, -3)),
                               "dropout_p": float(rng.random()), "lam": float(rng.random())},
                           0, float(rng.random()), "done") for i in range(20)]
    for k in range(1000):
        cfg = sample_config(space, history[: k % 21], k)
        assert cfg.batch_size in (32, 64, 128) and 1e-6 <= cfg.learning_rate <= 1e-3
        assert 0 <= cfg.dropout_p <= 1 and 0 <= cfg.lam <= 1
    _, records = run_search(space, 20, bowl, 69556, ledger_path=tmp_path / "full.jsonl")
    curve = running_best(records)
    assert all(b >= a for a, b in zip(curve, curve[1:]))
    run_search(space, 12, bowl, 69556, ledger_path=tmp_path / "part.jsonl")
    _, resumed = run_search(space, 20, bowl, 69556, ledger_path=tmp_path / "part.jsonl")
    same = stable(resumed) == stable(records) == stable(read_ledger(tmp_path / "part.jsonl"))
    report(10, same, "1000 samples in bounds, running best monotone, resumed ledger equals uninterrupted run")
