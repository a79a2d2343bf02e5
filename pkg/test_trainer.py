import json

import numpy as np
import pytest

from config import from_dict
from dataset_service import VideoStore, generate
from detector_model import IsolationNet
from trainer import ABLATION_VARIANTS, TRAIN_LOG, train, variant_config

SMALL_RUN = {
    'model': {'height': 16, 'width': 16, 'rgb_width': 2, 'log_width': 2, 'log_out': 2, 'fusion_width': 4,
              'backbone_widths': [4, 4], 'hidden': 3, 'log_scales': 2, 'log_kernel_size': 3},
    'data': {'n_natural': 4, 'n_manipulated': 4, 'frames': 8, 'height': 16, 'width': 16, 'sequence_length': 3,
             'eval_stride': 2, 'splits': {'train': 0.5, 'valid': 0.25, 'test': 0.25}},
    'train': {'epochs': 1, 'batch_size': 4, 'workers': 1},
}


@pytest.fixture(scope='module')
def store(tmp_path_factory):
    root = tmp_path_factory.mktemp('corpus')
    run = from_dict(SMALL_RUN)
    generate(run.data, run.seed, root, workers=1)
    return VideoStore(root)


@pytest.fixture
def base():
    return from_dict(SMALL_RUN)


def test_variants_override_config(base):
    assert {'no_ft', 'no_dropout'} <= set(ABLATION_VARIANTS)
    for name, overrides in ABLATION_VARIANTS.items():
        assert variant_config(base, overrides, seed=3).seed == 3
    assert variant_config(base, ABLATION_VARIANTS['no_ft'], 0).optimizer.block_lr_scales is False
    assert variant_config(base, ABLATION_VARIANTS['no_dropout'], 0).model.dropout == 0.0
    assert base.optimizer.block_lr_scales is True


def test_block_scales_follow_config(base, store, tmp_path):
    tuned = train(base, store, tmp_path / 'ft').model
    scales = {p.name.split('.')[0]: p.lr_scale for p in tuned.params()}
    assert scales['block1'] == 0.5 and scales['block2'] == 0.25

    flat = train(variant_config(base, ABLATION_VARIANTS['no_ft'], base.seed), store, tmp_path / 'no_ft').model
    assert all(p.lr_scale == 1.0 for p in flat.params())


def test_no_dropout_variant_trains(base, store, tmp_path):
    result = train(variant_config(base, ABLATION_VARIANTS['no_dropout'], base.seed), store, tmp_path / 'nd')
    assert result.model.config.dropout == 0.0
    assert len((tmp_path / 'nd' / TRAIN_LOG).read_text().splitlines()) == 1


def test_dropout_stream_is_split_from_window_stream(base, store, tmp_path, monkeypatch):
    seen = []
    original = IsolationNet.reseed_dropout

    def recording(self, seed):
        seen.append(seed)
        return original(self, seed)
    monkeypatch.setattr(IsolationNet, 'reseed_dropout', recording)
    train(base, store, tmp_path / 'r')
    child = np.random.SeedSequence([base.seed, 1]).spawn(2)[0]
    assert seen == [int(np.random.default_rng(child).integers(2 ** 31))]
    assert seen[0] != int(np.random.default_rng([base.seed, 1]).integers(2 ** 31))


def test_rebalance_logs_weights_per_type(store, tmp_path, caplog):
    tree = json.loads(json.dumps(SMALL_RUN))
    tree['data']['rebalance'] = True
    with caplog.at_level('INFO', logger='trainer'):
        train(from_dict(tree), store, tmp_path / 'rb')
    assert "'natural': 4.0" in caplog.text
    assert "'resample2': 1.0" in caplog.text
