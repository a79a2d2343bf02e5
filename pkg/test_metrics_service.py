import math
import random

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from errors import DataError
from metrics_service import (RocCurve, ScoreRecord, auc, auc_geometric, auc_rank, histogram_export,
                             log_weighted_precision, log_weighted_precision_at, metric_block, partial_area,
                             pauc_standardized, read_scores_csv, roc, select_operating_point, tar_at_far, tauc,
                             video_level, write_scores_csv, write_timeline_csv)


def records(natural, manipulated):
    out = [ScoreRecord(f'n{i}', 0, s, 0) for i, s in enumerate(natural)]
    out += [ScoreRecord(f'm{i}', 0, s, 1) for i, s in enumerate(manipulated)]
    return out


SIX = records([0.1, 0.2, 0.3], [0.25, 0.8, 0.9])
# (0,0) -> (0,0.5) -> (0.05,0.5) -> (0.05,1) -> (1,1)
STEP_CURVE = RocCurve(far=np.array([0.0, 0.0, 0.05, 0.05, 1.0]), tar=np.array([0.0, 0.5, 0.5, 1.0, 1.0]))


def test_record_validation():
    with pytest.raises(DataError):
        ScoreRecord('v', 0, float('nan'), 0)
    with pytest.raises(DataError):
        ScoreRecord('v', 0, 0.5, 2)


def test_six_score_fixture():
    assert auc(SIX) == pytest.approx(8 / 9, abs=1e-12)
    assert auc(SIX, method='rank') == pytest.approx(8 / 9, abs=1e-12)
    curve = roc(SIX)
    assert curve.far[0] == 0.0 and curve.tar[0] == 0.0
    assert curve.far[-1] == 1.0 and curve.tar[-1] == 1.0


def test_single_class_is_rejected():
    with pytest.raises(DataError):
        roc(records([0.1, 0.2], []))


def test_ties_count_half():
    assert auc(records([0.5], [0.5])) == pytest.approx(0.5)


def test_rank_and_geometric_auc_agree_with_sklearn():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(4, 30))
        scores = rng.integers(0, 6, n) / 5.0
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        recs = [ScoreRecord(f'v{i}', 0, float(s), int(y)) for i, (s, y) in enumerate(zip(scores, labels))]
        geometric = auc_geometric(roc(recs))
        assert auc_rank(recs) == pytest.approx(geometric, abs=1e-12)
        assert roc_auc_score(labels, scores) == pytest.approx(geometric, abs=1e-12)


def test_perfect_and_inverted():
    assert auc(records([0.1, 0.2], [0.8, 0.9])) == 1.0
    assert auc(records([0.8, 0.9], [0.1, 0.2])) == 0.0


def test_tar_at_far_on_step_curve():
    assert tar_at_far(STEP_CURVE, 0.05) == 1.0
    assert tar_at_far(STEP_CURVE, 0.049) == 0.5
    with pytest.raises(ValueError):
        tar_at_far(STEP_CURVE, 0.0)


def test_pauc_on_step_curve():
    assert partial_area(STEP_CURVE, 0.1) == pytest.approx(0.075)
    assert pauc_standardized(STEP_CURVE, 0.1) == pytest.approx(0.8684, abs=1e-4)


def test_pauc_at_one_equals_auc():
    curve = roc(SIX)
    assert pauc_standardized(curve, 1.0) == pytest.approx(auc_geometric(curve), abs=1e-12)


def test_pauc_chance_diagonal():
    diagonal = RocCurve(far=np.array([0.0, 1.0]), tar=np.array([0.0, 1.0]))
    assert pauc_standardized(diagonal, 0.1) == pytest.approx(0.5)


def test_tauc_on_step_curve():
    assert tauc(STEP_CURVE, 0.1) == pytest.approx(0.75, abs=1e-3)
    assert tauc(STEP_CURVE, 0.1, mode='vertex') == 1.0
    with pytest.raises(ValueError):
        tauc(STEP_CURVE, 0.1, mode='spline')


def test_perfect_separation_metric_block():
    block = metric_block(records([0.1, 0.2, 0.3], [0.7, 0.8, 0.9]), [0.1], [0.5, 0.9])
    assert block['auc'] == 1.0
    assert block['pauc']['0.1'] == pytest.approx(1.0)
    assert block['tauc']['0.1'] == 1.0
    assert block['tar_at_far']['0.1'] == 1.0
    assert block['log_wp']['0.9']['log_wp'] == 0.0
    assert block['accuracy_at_far10'] == 1.0
    assert (block['count'], block['natural'], block['manipulated']) == (6, 3, 3)


def test_log_wp_formula():
    wp = log_weighted_precision(records([0.9], [0.8]), recall_target=1.0)
    assert wp.log_wp == pytest.approx(math.log10(100 / 101))
    assert wp.log_wp == pytest.approx(-0.00432, abs=1e-5)
    assert wp.recall == 1.0 and wp.threshold == 0.8 and wp.reached


def test_log_wp_matches_exhaustive_sweep():
    rng = np.random.default_rng(4)
    for _ in range(50):
        nat = list(rng.integers(0, 20, 15) / 10.0)
        man = list(rng.integers(5, 25, 10) / 10.0)
        recs = records(nat, man)
        best = -math.inf
        for thr in sorted(set(nat + man)):
            tp = sum(s >= thr for s in man)
            fp = sum(s >= thr for s in nat)
            if tp / len(man) >= 0.5:
                value = 0.0 if fp == 0 else math.log10(100 * tp / (100 * tp + fp))
                best = max(best, value)
        assert log_weighted_precision(recs, 0.5).log_wp == best


def test_log_wp_unreachable_target_is_flagged():
    wp = log_weighted_precision(records([0.1], [0.5, 0.6]), recall_target=1.5)
    assert not wp.reached
    assert wp.recall == 1.0


def test_log_wp_at_fixed_threshold():
    wp = log_weighted_precision_at(records([0.9, 0.1], [0.8, 0.7]), threshold=0.75)
    assert wp.recall == 0.5
    assert wp.log_wp == pytest.approx(math.log10(100 / 101))


def test_video_level_mean_and_order_invariance():
    recs = [ScoreRecord('a', i, s, 1) for i, s in enumerate([0.1, 0.2, 0.6])]
    recs += [ScoreRecord('b', i, s, 0) for i, s in enumerate([1e16, 1.0, -1e16])]
    videos = video_level(recs)
    assert [v.video_id for v in videos] == ['a', 'b']
    assert videos[0].score == pytest.approx(0.3)
    assert videos[1].score == 1.0 / 3
    shuffled = recs[:]
    random.Random(0).shuffle(shuffled)
    assert video_level(shuffled) == videos
    assert video_level(recs, max_sequences=1)[0].score == 0.1


def test_video_level_conflicting_labels():
    with pytest.raises(DataError):
        video_level([ScoreRecord('a', 0, 0.1, 0), ScoreRecord('a', 1, 0.2, 1)])


def test_operating_point_selection():
    rng = np.random.default_rng(2)
    recs = []
    for v in range(20):
        label = v % 2
        for k in range(3):
            recs.append(ScoreRecord(f'v{v:02d}', k, float(rng.normal(1.0 + label, 0.5)), label))
    op = select_operating_point(recs, 0.5, folds=5, seed=0, sequence_counts=(None, 1, 2))
    assert op.max_sequences in (None, 1, 2)
    assert 0 <= op.fold < 5
    assert op.recall >= 0.5
    with pytest.raises(DataError):
        select_operating_point(recs[:6], 0.5, folds=5)


def test_histogram_overlap():
    separated = histogram_export(records([0.0, 0.1], [0.9, 1.0]), bins=10)
    assert separated.overlap == 0.0
    assert separated.natural.sum() == pytest.approx(1.0)
    same = histogram_export(records([0.2, 0.8], [0.2, 0.8]), bins=10)
    assert same.overlap == pytest.approx(1.0)


def test_scores_csv_roundtrip_and_errors(tmp_path):
    path = tmp_path / 'scores.csv'
    recs = [ScoreRecord('vid,1', 0, 0.1 + 0.2, 1), ScoreRecord('vid2', 3, 1 / 3, 0)]
    write_scores_csv(path, recs)
    assert path.read_text().splitlines()[0] == 'video_id,sequence_index,score,label'
    assert read_scores_csv(path) == recs
    bad = tmp_path / 'bad.csv'
    bad.write_text('id,score\nx,1\n')
    with pytest.raises(DataError):
        read_scores_csv(bad)
    bad.write_text('video_id,sequence_index,score,label\nx,0,abc,1\n')
    with pytest.raises(DataError):
        read_scores_csv(bad)
    with pytest.raises(DataError):
        read_scores_csv(tmp_path / 'missing.csv')


def test_timeline_csv(tmp_path):
    path = tmp_path / 'timeline.csv'
    write_timeline_csv(path, [(ScoreRecord('v', 1, 0.5, 1), 50, 113, 25.0)])
    lines = path.read_text().splitlines()
    assert lines[0] == 'video_id,sequence_index,start_frame,end_frame,start_seconds,score'
    assert lines[1] == 'v,1,50,113,2.000000,0.5'


def _random_records(rng, n):
    scores = rng.integers(0, 8, n) / 5.0
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    return [ScoreRecord(f'v{i}', 0, float(s), int(y)) for i, (s, y) in enumerate(zip(scores, labels))]


def test_monotone_transform_leaves_metrics_unchanged():
    rng = np.random.default_rng(7)
    for _ in range(50):
        recs = _random_records(rng, int(rng.integers(4, 40)))
        moved = [ScoreRecord(r.video_id, r.sequence_index, 2.0 * r.score ** 3 + r.score - 7.0, r.label)
                 for r in recs]
        a, b = roc(recs), roc(moved)
        np.testing.assert_array_equal(a.far, b.far)
        np.testing.assert_array_equal(a.tar, b.tar)
        assert auc(recs) == auc(moved)
        assert auc(recs, method='rank') == auc(moved, method='rank')
        for f in (0.05, 0.1, 0.5):
            assert tauc(a, f) == tauc(b, f)
            assert pauc_standardized(a, f) == pauc_standardized(b, f)
            assert tar_at_far(a, f) == tar_at_far(b, f)


def test_tauc_is_bounded_by_tar_at_cutoff():
    rng = np.random.default_rng(8)
    for _ in range(200):
        curve = roc(_random_records(rng, int(rng.integers(4, 60))))
        for f in (0.01, 0.05, 0.1, 0.3, 1.0):
            for mode in ('grid', 'vertex'):
                value = tauc(curve, f, mode=mode)
                assert 0.0 <= value <= tar_at_far(curve, f) + 1e-12


def test_label_independent_scores_give_chance_auc():
    rng = np.random.default_rng(9)
    n = 10_000
    recs = [ScoreRecord(f'v{i}', 0, float(s), int(y))
            for i, (s, y) in enumerate(zip(rng.random(n), rng.integers(0, 2, n)))]
    assert auc(recs) == pytest.approx(0.5, abs=0.02)
