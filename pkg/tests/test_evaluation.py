import numpy as np
import pytest

from czsl_prompt import (
    DataError,
    ScoreMatrix,
    SynthConfig,
    biased_accuracy,
    init_model,
    score_matrix,
    sweep_auc,
    synth_generate,
    topk_image_retrieval,
    topk_text_retrieval,
)
from czsl_prompt.evaluation import sweep_bias_points
from czsl_prompt.model import class_logits, encode_image, encode_text


def make_scores(logits, seen_mask, true_cols):
    logits = np.asarray(logits, dtype=np.float64)
    seen_mask = np.asarray(seen_mask, dtype=bool)
    true_cols = np.asarray(true_cols, dtype=np.int64)
    n, c = logits.shape
    return ScoreMatrix(
        logits=logits,
        candidates=np.stack([np.arange(c), np.zeros(c, dtype=np.int64)], axis=1),
        seen_mask=seen_mask,
        true_cols=true_cols,
        true_is_seen=seen_mask[true_cols].copy(),
    )


def random_scores(rng, n_max=20, c_max=12):
    n = int(rng.integers(2, n_max + 1))
    c = int(rng.integers(2, c_max + 1))
    n_seen_cols = int(rng.integers(1, c))
    seen_mask = np.zeros(c, dtype=bool)
    seen_mask[:n_seen_cols] = True
    true_cols = np.concatenate([
        rng.choice(np.flatnonzero(seen_mask), size=1),      # at least one seen truth
        rng.choice(np.flatnonzero(~seen_mask), size=1),     # and one unseen truth
        rng.integers(0, c, size=n - 2),
    ])
    return make_scores(rng.normal(size=(n, c)), seen_mask, true_cols)


def grid_auc(scores, n_points=100_001, chunk=2000):
    """Brute-force AUC: per-bias argmax over a dense uniform bias grid."""
    seen_cols = scores.seen_mask
    best_seen = scores.logits[:, seen_cols].max(axis=1)
    best_unseen = scores.logits[:, ~seen_cols].max(axis=1)
    margins = best_seen - best_unseen
    pad = max(1.0, float(scores.logits.max() - scores.logits.min()))
    biases = np.linspace(margins.min() - pad, margins.max() + pad, n_points)

    seen_rows = scores.true_is_seen
    seen_accs = np.empty(n_points)
    unseen_accs = np.empty(n_points)
    for start in range(0, n_points, chunk):
        bs = biases[start:start + chunk]
        shifted = scores.logits[None, :, :] + bs[:, None, None] * (~seen_cols)[None, None, :]
        preds = shifted.argmax(axis=2)
        correct = preds == scores.true_cols[None, :]
        seen_accs[start:start + len(bs)] = correct[:, seen_rows].mean(axis=1)
        unseen_accs[start:start + len(bs)] = correct[:, ~seen_rows].mean(axis=1)

    auc = 0.0
    for k in range(n_points - 1):
        auc += (seen_accs[k] - seen_accs[k + 1]) * (unseen_accs[k] + unseen_accs[k + 1]) / 2.0
    return auc


# ---------------------------------------------------------------------------
# score_matrix
# ---------------------------------------------------------------------------

@pytest.fixture
def trained_setup():
    space, ds = synth_generate(SynthConfig(n_states=4, n_objects=3, seen_fraction=0.5,
                                           samples_per_pair=2, noise_sigma=0.4, seed=21))
    table, enc = init_model(space, d=8, feature_dim=64, seed=1, encoder_seed=21)
    return space, ds, table, enc


def test_score_matrix_matches_class_logits(trained_setup):
    space, ds, table, enc = trained_setup
    sm = score_matrix(table, enc, ds["test"], space)
    cands = [tuple(p) for p in sm.candidates.tolist()]
    assert cands == sorted(space.seen_sorted) + list(space.unseen_for_split("test"))
    for i in (0, len(ds["test"]) // 2, len(ds["test"]) - 1):
        manual = class_logits(encode_image(ds["test"].sample(i)), cands, enc, table)
        assert np.allclose(sm.logits[i], manual, atol=1e-12)


def test_score_matrix_identical_samples_identical_rows(trained_setup):
    space, ds, table, enc = trained_setup
    sm = score_matrix(table, enc, ds["test"], space)
    labels = ds["test"].labels
    same = np.flatnonzero((labels == labels[0]).all(axis=1))
    assert len(same) >= 2  # noise makes them distinct rows but the shape holds
    dup_rows = np.flatnonzero((ds["test"].features == ds["test"].features[0]).all(axis=1))
    for j in dup_rows:
        assert np.array_equal(sm.logits[j], sm.logits[0])


def test_score_matrix_rejects_train_split(trained_setup):
    space, ds, table, enc = trained_setup
    with pytest.raises(DataError, match="val or test"):
        score_matrix(table, enc, ds["train"], space)


def test_score_matrix_threads_match(trained_setup):
    space, ds, table, enc = trained_setup
    a = score_matrix(table, enc, ds["test"], space, threads=1)
    b = score_matrix(table, enc, ds["test"], space, threads=3)
    assert np.allclose(a.logits, b.logits, atol=0.0)


# ---------------------------------------------------------------------------
# biased accuracy
# ---------------------------------------------------------------------------

def test_biased_accuracy_hand_matrix():
    scores = make_scores([[2.0, 1.0], [0.0, 3.0]], seen_mask=[True, False], true_cols=[0, 1])
    assert biased_accuracy(scores, 0.0) == (1.0, 1.0)


def test_biased_accuracy_limits():
    rng = np.random.default_rng(0)
    scores = random_scores(rng)
    span = float(scores.logits.max() - scores.logits.min())
    seen_lo, unseen_lo = biased_accuracy(scores, -2 * span - 1)
    # all predictions land in the seen block: unseen rows are always wrong
    assert unseen_lo == 0.0
    seen_hi, unseen_hi = biased_accuracy(scores, 2 * span + 1)
    assert seen_hi == 0.0
    # the saturated unseen accuracy equals unseen-only classification
    unseen_block = scores.logits[:, ~scores.seen_mask]
    offset = int(np.flatnonzero(~scores.seen_mask)[0])
    rows = ~scores.true_is_seen
    expect = (unseen_block[rows].argmax(axis=1) + offset == scores.true_cols[rows]).mean()
    assert unseen_hi == pytest.approx(expect)


def test_biased_accuracy_tie_prefers_lowest_index():
    scores = make_scores([[1.0, 1.0]], seen_mask=[True, False], true_cols=[0])
    assert biased_accuracy(scores, 0.0) == (1.0, 1.0)  # seen column wins the tie
    scores2 = make_scores([[1.0, 1.0]], seen_mask=[True, False], true_cols=[1])
    s, u = biased_accuracy(scores2, 0.0)
    assert u == 0.0 and s == 1.0  # no seen-truth rows -> 1.0 by convention


def test_biased_accuracy_exhaustive_argmax_oracle():
    rng = np.random.default_rng(33)
    for _ in range(10):
        scores = random_scores(rng)
        for bias in rng.normal(scale=2.0, size=8):
            shifted = [
                [v + (0.0 if scores.seen_mask[j] else bias) for j, v in enumerate(row)]
                for row in scores.logits.tolist()
            ]
            preds = [row.index(max(row)) for row in shifted]
            correct = [p == t for p, t in zip(preds, scores.true_cols.tolist())]
            seen_rows = scores.true_is_seen.tolist()
            s = np.mean([c for c, sr in zip(correct, seen_rows) if sr])
            u = np.mean([c for c, sr in zip(correct, seen_rows) if not sr])
            assert biased_accuracy(scores, float(bias)) == (pytest.approx(s), pytest.approx(u))


# ---------------------------------------------------------------------------
# sweep / AUC
# ---------------------------------------------------------------------------

def test_sweep_perfect_classifier():
    # true candidate strictly dominant in every row
    logits = np.full((4, 5), -1.0)
    true_cols = np.array([0, 1, 3, 4])
    logits[np.arange(4), true_cols] = 5.0
    scores = make_scores(logits, [True, True, True, False, False], true_cols)
    report = sweep_auc(scores)
    assert report.seen_acc == 1.0
    assert report.unseen_acc == 1.0
    assert report.best_hm == 1.0
    assert report.auc == pytest.approx(1.0)


def test_sweep_hopeless_unseen():
    # unseen rows misclassified at any bias: their best unseen column is wrong
    logits = np.array([[3.0, 0.0, -1.0], [2.0, -1.0, 0.0]])
    scores = make_scores(logits, [True, False, False], true_cols=[0, 1])
    report = sweep_auc(scores)
    assert report.auc == 0.0


def test_sweep_monotone_curve():
    rng = np.random.default_rng(5)
    for _ in range(10):
        report = sweep_auc(random_scores(rng))
        seen = [s for _, s, _ in report.curve]
        unseen = [u for _, _, u in report.curve]
        assert all(a >= b - 1e-12 for a, b in zip(seen, seen[1:]))
        assert all(a <= b + 1e-12 for a, b in zip(unseen, unseen[1:]))
        assert 0.0 <= report.auc <= 1.0 + 1e-12


def test_sweep_best_hm_at_least_bias_zero():
    rng = np.random.default_rng(6)
    for _ in range(10):
        report = sweep_auc(random_scores(rng))
        s, u = report.seen_acc, report.unseen_acc
        hm0 = 0.0 if s + u == 0 else 2 * s * u / (s + u)
        assert report.best_hm >= hm0 - 1e-12


def test_sweep_dense_grid_oracle():
    rng = np.random.default_rng(7)
    for _ in range(8):
        scores = random_scores(rng)
        assert sweep_auc(scores).auc == pytest.approx(grid_auc(scores), abs=1e-3)


def test_sweep_row_shift_invariance():
    rng = np.random.default_rng(8)
    scores = random_scores(rng)
    shifted = make_scores(scores.logits + rng.normal(size=(scores.logits.shape[0], 1)),
                          scores.seen_mask, scores.true_cols)
    assert sweep_auc(shifted).auc == pytest.approx(sweep_auc(scores).auc, abs=1e-12)


def test_sweep_one_sided_errors():
    scores = make_scores([[1.0, 0.0]], seen_mask=[True, False], true_cols=[0])
    with pytest.raises(DataError, match="one-sided split"):
        sweep_auc(scores)
    all_seen = make_scores([[1.0, 0.0]], seen_mask=[True, True], true_cols=[0])
    with pytest.raises(DataError, match="one-sided split"):
        sweep_bias_points(all_seen)


def test_sweep_state_object_diagnostics():
    logits = np.array([[5.0, 0.0], [5.0, 0.0]])
    sm = ScoreMatrix(
        logits=logits,
        candidates=np.array([[0, 0], [0, 1]]),
        seen_mask=np.array([True, False]),
        true_cols=np.array([0, 1]),
        true_is_seen=np.array([True, False]),
    )
    report = sweep_auc(sm)
    assert report.state_acc == 1.0   # both predictions share the true state
    assert report.object_acc == 0.5  # the unseen row predicts the wrong object


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def test_topk_text_matches_predict(trained_setup):
    space, ds, table, enc = trained_setup
    from czsl_prompt.model import predict
    from czsl_prompt.evaluation import _all_candidates
    sample = ds["test"].sample(0)
    top1 = topk_text_retrieval(table, enc, sample, space, k=1)
    assert top1[0] == predict(encode_image(sample), _all_candidates(space), enc, table)


def test_topk_text_full_sort(trained_setup):
    space, ds, table, enc = trained_setup
    from czsl_prompt.evaluation import _all_candidates
    cands = _all_candidates(space)
    sample = ds["test"].sample(3)
    ranked = topk_text_retrieval(table, enc, sample, space, k=len(cands) + 5)
    assert len(ranked) == len(cands)  # k beyond the candidate count truncates
    logits = class_logits(encode_image(sample), cands, enc, table)
    manual = [cands[i] for i in np.argsort(-logits, kind="stable")]
    assert ranked == manual


def test_topk_image_sort_oracle(trained_setup):
    space, ds, table, enc = trained_setup
    pair = space.seen_sorted[0]
    f_t = encode_text(enc, table, pair)
    scores = [float(encode_image(ds["test"].sample(i)) @ f_t) for i in range(len(ds["test"]))]
    manual = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:5]
    assert topk_image_retrieval(table, enc, pair, ds["test"], k=5) == manual


def test_topk_image_singleton_dataset(trained_setup):
    space, ds, table, enc = trained_setup
    from czsl_prompt import Dataset
    one = Dataset(features=ds["test"].features[:1], labels=ds["test"].labels[:1],
                  split="test", space=space)
    assert topk_image_retrieval(table, enc, space.seen_sorted[0], one, k=1) == [0]


def test_topk_image_duplicate_adjacent(trained_setup):
    space, ds, table, enc = trained_setup
    from czsl_prompt import Dataset
    feats = np.vstack([ds["test"].features[:1], ds["test"].features])
    labels = np.vstack([ds["test"].labels[:1], ds["test"].labels])
    dup = Dataset(features=feats, labels=labels, split="test", space=space)
    pair = space.seen_sorted[1]
    ranked = topk_image_retrieval(table, enc, pair, dup, k=len(dup))
    pos0, pos1 = ranked.index(0), ranked.index(1)
    assert abs(pos0 - pos1) == 1 and pos0 < pos1  # copies adjacent, index tie-break


def test_topk_k_validation(trained_setup):
    space, ds, table, enc = trained_setup
    with pytest.raises(DataError):
        topk_text_retrieval(table, enc, ds["test"].sample(0), space, k=0)
