import math

import numpy as np
import pytest

from qwthn.metrics import answer_accuracy, bleu4, evaluate_records, lcs_length, rouge_l, rouge_n, tokenize


REF = "the quick brown fox jumps over the lazy dog"


def test_tokenize():
    assert tokenize("a  b\tc\n") == ["a", "b", "c"]
    assert tokenize("心理咨询") == ["心", "理", "咨", "询"]
    assert tokenize("   ") == []


def test_bleu_examples():
    assert bleu4(REF, [REF]) == 1.0
    assert bleu4("alpha beta gamma delta", [REF]) == 0.0
    ref8 = "w1 w2 w3 w4 w5 w6 w7 w8"
    assert abs(bleu4("w3 w4 w5 w6", [ref8]) - math.exp(-1)) < 1e-9


def test_bleu_closest_reference_length():
    # c=4; references of length 4 and 8: r=4, no penalty.
    assert bleu4("a b c d", ["a b c d", "a b c d e f g h"]) == 1.0
    # c=4 sits between lengths 3 and 5; the tie picks r=3, so c > r and there is no penalty.
    assert bleu4("a b c d", ["a b c d e", "x y z"]) == 1.0
    assert bleu4("a b c d", ["a b c d e"]) == pytest.approx(math.exp(1 - 5 / 4), abs=1e-12)


def test_bleu_clipping():
    # "the" appears twice in the candidate but only once in the reference.
    assert bleu4("the the cat sat on", ["the cat sat on"]) < 1.0


def test_bleu_errors():
    with pytest.raises(ValueError):
        bleu4("a b c d", [])
    with pytest.raises(ValueError):
        bleu4("", ["a b c d"])


def test_bleu_monotone_under_truncation():
    # Dropping tokens from either end of a perfect match keeps every precision at 1, so only BP moves.
    rng = np.random.default_rng(5)
    words = [f"w{i}" for i in range(40)]
    for _ in range(30):
        ref = list(rng.choice(words, size=int(rng.integers(8, 20))))
        cand, prev = list(ref), 1.0
        while len(cand) > 4:
            cand = cand[1:] if rng.random() < 0.5 else cand[:-1]
            score = bleu4(cand, [ref])
            assert score <= prev + 1e-12
            prev = score


def test_rouge_n_examples():
    assert rouge_n(REF, REF, 1) == 1.0
    assert rouge_n(REF, REF, 2) == 1.0
    assert rouge_n("x y z", "a b c", 1) == 0.0
    assert abs(rouge_n("a b x d", "a b c d", 2) - 1 / 3) < 1e-9
    with pytest.raises(ValueError):
        rouge_n("a b", "a", 2)


def test_rouge_l_examples():
    assert abs(rouge_l("the cat mat", "the cat sat on mat") - 0.75) < 1e-9
    assert rouge_l("x y", "a b") == 0.0
    for beta in (0.5, 1.0, 2.0, 7.0):
        assert rouge_l(REF, REF, beta) == pytest.approx(1.0, abs=1e-15)
    assert lcs_length(list("ABCBDAB"), list("BDCABA")) == 4


def test_answer_accuracy_cases():
    out = [
        {"answer_segment": "the answer is 42", "full_text": "so the answer is 42"},
        {"answer_segment": "unsure", "full_text": "6 times 7 is 42. unsure"},
        {"answer_segment": "no", "full_text": "nothing here"},
    ]
    assert answer_accuracy(out, ["42", "42", "42"]) == {"sa": 1 / 3, "accuracy": 2 / 3}
    with pytest.raises(ValueError):
        answer_accuracy(out, ["42"])


def test_sa_never_exceeds_accuracy():
    rng = np.random.default_rng(11)
    alphabet = list("abc123 ")
    for _ in range(200):
        outs, gold = [], []
        for _ in range(int(rng.integers(1, 10))):
            seg = "".join(rng.choice(alphabet, size=int(rng.integers(0, 12))))
            full = "".join(rng.choice(alphabet, size=int(rng.integers(0, 12)))) + seg
            outs.append({"answer_segment": seg, "full_text": full})
            gold.append("".join(rng.choice(alphabet[:6], size=int(rng.integers(1, 3)))))
        r = answer_accuracy(outs, gold)
        assert r["sa"] <= r["accuracy"]


def test_reserialization_invariance():
    cand, ref = "the  cat\tsat", "the cat sat on\nthe mat"
    a = (bleu4(cand, [ref]), rouge_n(cand, ref, 1), rouge_n(cand, ref, 2), rouge_l(cand, ref))
    b = (bleu4(cand.split(), [ref.split()]), rouge_n(cand.split(), ref.split(), 1),
         rouge_n(cand.split(), ref.split(), 2), rouge_l(cand.split(), ref.split()))
    assert a == b


def test_evaluate_records_and_percent():
    recs = [
        {"candidate": REF, "references": [REF], "gold": "fox"},
        {"candidate": "a b x d", "references": "a b c d", "gold": "c", "answer_segment": "a b"},
    ]
    rep = evaluate_records(recs)
    assert rep.samples == 2
    assert rep.rouge2 == pytest.approx((1 + 1 / 3) / 2)
    assert rep.sa == 0.5 and rep.accuracy == 0.5
    pct = rep.to_dict(percent=True)
    assert pct["rouge2"] == pytest.approx(100 * rep.rouge2)
    assert all(0.0 <= v <= 1.0 for k, v in rep.to_dict().items() if k != "samples")
    with pytest.raises(ValueError):
        evaluate_records([])
