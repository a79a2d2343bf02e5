"""Execução completa com a configuração padrão (200 vídeos, 32x32, F=10). Use --runslow."""

import numpy as np
import pytest

from command_builder import cmd_ablate, cmd_eval, cmd_gen_data, cmd_score, cmd_train
from config import load_run_config
from dataset_service import VideoStore, stratified_epoch
from metrics_service import roc

pytestmark = pytest.mark.slow


@pytest.fixture(scope='module')
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp('acceptance')
    run = load_run_config()
    cmd_gen_data(run, root / 'data')
    result = cmd_train(run, root / 'data', root / 'run')
    records = cmd_score(result.best_checkpoint, root / 'data', 'test', run.data.eval_stride,
                        root / 'run' / 'scores_test.csv', run)
    report = cmd_eval(root / 'run' / 'scores_test.csv', [0.1], [0.1, 0.5, 0.9], root / 'run' / 'eval')
    return root, run, records, report


def test_video_level_detection(trained):
    _, _, _, report = trained
    assert report['video']['auc'] >= 0.95
    assert report['video']['tar_at_far']['0.1'] >= 0.90


def test_distance_distributions_separate(trained):
    _, _, records, report = trained
    assert report['video']['overlap'] <= 0.10
    curve = roc(records)
    idx = int(np.searchsorted(curve.far, 0.1 + 1e-12, side='right') - 1)
    threshold = curve.thresholds[idx]
    natural = [r.score for r in records if r.label == 0]
    assert np.mean([s < threshold for s in natural]) >= 0.90


def test_rerun_is_deterministic(trained, tmp_path):
    root, run, _, _ = trained
    cmd_train(run, root / 'data', tmp_path / 'again')
    assert (tmp_path / 'again' / 'best.ckpt').read_bytes() == (root / 'run' / 'best.ckpt').read_bytes()
    assert (tmp_path / 'again' / 'train_log.jsonl').read_bytes() == (root / 'run' / 'train_log.jsonl').read_bytes()


def test_stratified_epoch_has_one_window_per_video(trained):
    root, run, _, _ = trained
    videos = VideoStore(root / 'data').videos('train')
    epoch = stratified_epoch(videos, run.data.sequence_length, run.seed, 1)
    assert len(epoch) == len(videos) == len({s.video_id for s in epoch})


def test_two_branch_is_not_worse_than_single_branch(trained):
    root, run, _, _ = trained
    report = cmd_ablate(run, root / 'data', root / 'ablation', ['two_branch', 'single_branch'], [0, 1, 2, 3, 4])
    assert report['two_branch']['median_tauc'] >= report['single_branch']['median_tauc']
