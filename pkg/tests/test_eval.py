import math

import numpy as np
import pytest

from ifnet.dataset import synth_store
from ifnet.errors import NoPositives
from ifnet.evaluation import (average_precision, eval_matching, eval_retrieval, eval_verification,
                              evaluate_descriptors, make_eval_split, match_ap, nearest_neighbours,
                              precision_at_k, read_descriptors, write_descriptors, write_report)
from ifnet.losses import LossConfig
from ifnet.net import NetConfig, describe_array, init
from ifnet.scheduling import OptimizerConfig, TrackPool, TrainingSchedule, train


def brute_ap(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, terms = 0, []
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            terms.append(hits / rank)
    return math.fsum(terms) / hits


def unit_rows(rng, n, d=8):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_ap_hand_fixture():
    assert average_precision([3, 2, 1], [1, 0, 1]) == pytest.approx(0.833333, abs=1e-6)
    assert average_precision([5, 4, 3, 2], [1, 1, 0, 0]) == 1.0
    for n in (1, 4, 17):
        assert average_precision(-np.arange(n), [0] * (n - 1) + [1]) == pytest.approx(1 / n)
    with pytest.raises(NoPositives):
        average_precision([1, 2], [0, 0])


def test_ap_matches_bruteforce_1000_lists():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        scores = rng.integers(0, 6, size=n).astype(float)  # coarse scores force ties
        labels = rng.random(n) < 0.4
        labels[rng.integers(n)] = True
        assert average_precision(scores, labels) == brute_ap(list(scores), list(labels))


def test_ap_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    for _ in range(100):
        s = rng.integers(-50, 50, size=30)
        lab = rng.random(30) < 0.5
        lab[0] = True
        assert average_precision(s, lab) == average_precision(2 * s + 7, lab)


def test_precision_at_k():
    assert precision_at_k([0.1, 0.2, 0.3], [1, 0, 1], k=2) == 0.5
    assert precision_at_k([0.1, 0.2], [1, 1]) == 1.0
    assert precision_at_k([0.3, 0.1, 0.2], [1, 0, 0], k=10) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        precision_at_k([0.1], [1], k=0)


def test_verification_separable_and_chance():
    a = np.eye(4)
    assert eval_verification(a, a, [1, 1, 1, 1]) == 1.0
    b = np.roll(a, 1, axis=0)
    both_a, both_b = np.vstack([a, a]), np.vstack([a, b])
    assert eval_verification(both_a, both_b, [1] * 4 + [0] * 4) == 1.0
    rng = np.random.default_rng(2)
    lab = np.array([True, False] * 100)
    ap = eval_verification(unit_rows(rng, 200), unit_rows(rng, 200), lab)
    assert 0.4 <= ap <= 0.6


def test_verification_inverted_labels_matches_bruteforce():
    a = np.eye(4)
    b = np.vstack([a[:2], np.roll(a, 1, axis=0)[2:]])
    lab = np.array([0, 0, 1, 1], bool)  # positives are the far pairs
    d = np.linalg.norm(a - b, axis=1)
    assert eval_verification(a, b, lab) == brute_ap(list(-d), list(lab))


def test_matching_permutation_is_perfect():
    rng = np.random.default_rng(3)
    a = unit_rows(rng, 12)
    perm = rng.permutation(12)
    truth = np.argsort(perm)
    assert match_ap(a, a[perm], truth) == 1.0
    assert eval_matching([(a, a[perm], truth)] * 3) == 1.0


def test_matching_identical_descriptors_bruteforce():
    a = np.ones((5, 4)) / 2
    nn, d = nearest_neighbours(a, a.copy())
    assert nn.tolist() == [0] * 5  # lowest index wins
    truth = np.arange(5)
    # only row 0 is correct; denominator counts all five rows
    assert match_ap(a, a.copy(), truth) == pytest.approx(brute_ap([0.0] * 5, [1, 0, 0, 0, 0]) / 5)


def test_matching_no_correct_gives_zero():
    a = np.eye(3)
    assert match_ap(a, a, [1, 2, 0]) == 0.0


def test_retrieval_self_and_bruteforce():
    rng = np.random.default_rng(4)
    q = unit_rows(rng, 6)
    assert eval_retrieval(q, q, np.eye(6, dtype=bool)) == 1.0
    for _ in range(20):
        q, pool = unit_rows(rng, 20), unit_rows(rng, 50)
        rel = rng.random((20, 50)) < 0.1
        rel[np.arange(20), rng.integers(0, 50, 20)] = True
        d = np.linalg.norm(q[:, None] - pool[None], axis=2)
        want = np.mean([brute_ap(list(-d[i]), list(rel[i])) for i in range(20)])
        assert eval_retrieval(q, pool, rel) == pytest.approx(want, abs=1e-12)
    with pytest.raises(NoPositives):
        eval_retrieval(q[:1], pool, np.zeros((1, 50), bool))


def test_removing_distractors_never_hurts():
    rng = np.random.default_rng(5)
    for _ in range(50):
        q, pool = unit_rows(rng, 1), unit_rows(rng, 30)
        rel = rng.random((1, 30)) < 0.2
        rel[0, 0] = True
        full = eval_retrieval(q, pool, rel)
        keep = rel[0] | (rng.random(30) < 0.5)
        assert eval_retrieval(q, pool[keep], rel[:, keep]) >= full - 1e-15


def test_shuffled_labels_do_not_leak():
    store = synth_store(6, 40, 3, "both")
    split = make_eval_split(store, seed=1)
    desc = describe_array(init(NetConfig.toy(rng_seed=0)), split.patches)
    ia, ib, lab = split.verification
    rng = np.random.default_rng(7)
    shuffled = [eval_verification(desc[ia], desc[ib], rng.permutation(lab)) for _ in range(20)]
    assert 0.4 <= np.mean(shuffled) <= 0.6


def test_split_structure():
    store = synth_store(8, 10, 4, "geometry")
    split = make_eval_split(store, "geo", seed=0)
    assert split.patches.shape == (40, 64, 64)
    assert len(split.matching) == 3
    for a, b, truth in split.matching:
        assert np.all(split.track_of[a] == split.track_of[b][truth])
    q, pool = split.retrieval
    assert len(q) == 10 and len(pool) == 30


def test_descriptor_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    d = unit_rows(rng, 10, 16)
    path = tmp_path / "d.txt"
    write_descriptors(path, d)
    assert path.read_text().splitlines()[0] == "IFDESC1 dim=16 count=10"
    back = read_descriptors(path)
    np.testing.assert_allclose(back, d, atol=1e-8)
    np.testing.assert_allclose(np.linalg.norm(back, axis=1), 1, atol=1e-5)


def test_report_csv(tmp_path):
    path = tmp_path / "r.csv"
    write_report(path, [{"task": "matching", "split": "ill", "value": 0.5, "count": 3, "seed": 1}])
    assert path.read_text().splitlines() == ["task,split,mAP,count,seed", "matching,ill,0.500000,3,1"]


def test_trained_beats_random_on_illumination_majority():
    split = make_eval_split(synth_store(901, 40, 4, "illumination"), "ill")
    wins = 0
    for seed in range(3):
        pool = TrackPool.from_store(synth_store(400 + seed, 64, 4, "illumination"))
        net = init(NetConfig.toy(descriptor_dim=32, rng_seed=seed))
        before = evaluate_descriptors(split, describe_array(net, split.patches))["matching"]
        train(net, TrainingSchedule("basic", (pool,), epochs=4, batch_n=16), LossConfig(),
              OptimizerConfig(lr0=0.01), rng_seed=seed)
        after = evaluate_descriptors(split, describe_array(net, split.patches))["matching"]
        wins += after > before
    assert wins >= 2
