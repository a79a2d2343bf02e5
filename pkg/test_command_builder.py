import json

import pytest

from app import build_parser, exit_code, main
from command_builder import COMMAND_METADATA, COMMANDS
from errors import CheckFailure, ConfigError, DataError, ShapeError

SMALL_RUN = {
    'model': {'height': 16, 'width': 16, 'rgb_width': 2, 'log_width': 2, 'log_out': 2, 'fusion_width': 4,
              'backbone_widths': [4, 4], 'hidden': 3, 'log_scales': 2, 'log_kernel_size': 3},
    'data': {'n_natural': 6, 'n_manipulated': 6, 'frames': 12, 'height': 16, 'width': 16, 'sequence_length': 3,
             'eval_stride': 2, 'splits': {'train': 0.5, 'valid': 0.25, 'test': 0.25}},
    'train': {'epochs': 2, 'batch_size': 4, 'workers': 2},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(SMALL_RUN))
    return path


def run(tmp_path, *argv):
    return main(list(argv) + ['--log-dir', str(tmp_path / 'logs')])


def test_registry_matches_subcommands():
    assert set(COMMANDS) == {'gen-data', 'train', 'score', 'eval', 'grad-check', 'ablate'}
    assert set(COMMANDS) == set(COMMAND_METADATA)
    parser = build_parser()
    args = parser.parse_args(['eval', 'x.csv', '--cutoff', '0.05', '--cutoff', '0.1', '--recall', '0.5'])
    assert args.cutoff == [0.05, 0.1] and args.recall == [0.5]


def test_exit_code_mapping():
    assert exit_code(ConfigError('x')) == 2
    assert exit_code(DataError('x')) == 3
    assert exit_code(ShapeError('x')) == 3
    assert exit_code(CheckFailure('x')) == 4
    assert exit_code(ValueError('x')) == 2
    assert exit_code(RuntimeError('x')) == 1


def test_pipeline(tmp_path, small_config, capsys):
    data, out = tmp_path / 'data', tmp_path / 'run'
    assert run(tmp_path, 'gen-data', '--config', str(small_config), '--out', str(data)) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats['videos'] == 12
    assert stats['band_energy_gap'] > 0
    assert len(stats['manifest_sha256']) == 64

    assert run(tmp_path, 'train', '--config', str(small_config), '--dataset', str(data), '--out', str(out)) == 0
    capsys.readouterr()
    log = [json.loads(line) for line in (out / 'train_log.jsonl').read_text().splitlines()]
    assert [entry['epoch'] for entry in log] == [1, 2]
    assert (out / 'best.ckpt').is_file() and (out / 'last.ckpt').is_file()

    scores = out / 'scores_test.csv'
    assert run(tmp_path, 'score', '--config', str(small_config), '--checkpoint', str(out / 'best.ckpt'),
               '--dataset', str(data), '--split', 'test', '--out', str(scores)) == 0
    # 2 vídeos de teste, T=12, F=3, stride 2: 8 janelas cada
    assert len(scores.read_text().splitlines()) == 1 + 16
    assert (out / 'scores_test.timeline.csv').is_file()

    assert run(tmp_path, 'eval', str(scores), '--out', str(out / 'eval_a'), '--cutoff', '0.1',
               '--cutoff', '0.5') == 0
    assert run(tmp_path, 'eval', str(scores), '--out', str(out / 'eval_b'), '--cutoff', '0.1',
               '--cutoff', '0.5') == 0
    report = json.loads((out / 'eval_a' / 'report.json').read_text())
    assert report['sequence']['count'] == 16 and report['video']['count'] == 2
    assert set(report['sequence']['pauc']) == {'0.1', '0.5'}
    assert set(report['video']['log_wp']) == {'0.1', '0.5', '0.9'}
    for name in ('report.json', 'roc.svg', 'histogram_sequence.svg', 'histogram_video.csv'):
        assert (out / 'eval_a' / name).read_bytes() == (out / 'eval_b' / name).read_bytes()


def test_training_is_deterministic(tmp_path, small_config):
    data = tmp_path / 'data'
    assert run(tmp_path, 'gen-data', '--config', str(small_config), '--out', str(data)) == 0
    for name in ('a', 'b'):
        assert run(tmp_path, 'train', '--config', str(small_config), '--dataset', str(data),
                   '--out', str(tmp_path / name), '--epochs', '1') == 0
    assert (tmp_path / 'a' / 'last.ckpt').read_bytes() == (tmp_path / 'b' / 'last.ckpt').read_bytes()
    assert (tmp_path / 'a' / 'train_log.jsonl').read_bytes() == (tmp_path / 'b' / 'train_log.jsonl').read_bytes()


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / 'bad.json'
    bad.write_text(json.dumps({'modle': {}}))
    assert run(tmp_path, 'gen-data', '--config', str(bad), '--out', str(tmp_path / 'd')) == 2


def test_missing_dataset_exit_code(tmp_path, small_config):
    assert run(tmp_path, 'train', '--config', str(small_config), '--dataset', str(tmp_path / 'nope'),
               '--out', str(tmp_path / 'r')) == 3


def test_eval_errors(tmp_path):
    csv_path = tmp_path / 'scores.csv'
    csv_path.write_text('video_id,score\n')
    assert run(tmp_path, 'eval', str(csv_path)) == 3
    csv_path.write_text('video_id,sequence_index,score,label\na,0,0.1,0\nb,0,0.9,1\n')
    assert run(tmp_path, 'eval', str(csv_path), '--cutoff', '0') == 2


def test_grad_check_exit_codes(tmp_path, capsys):
    assert run(tmp_path, 'grad-check', '--check', 'relu', '--check', 'gap') == 0
    out = capsys.readouterr().out
    assert 'relu' in out and 'gap' in out
    assert run(tmp_path, 'grad-check', '--check', 'relu', '--mutate', 'relu', '--seed', '0') == 4


def test_log_file_is_written(tmp_path):
    run(tmp_path, 'grad-check', '--check', 'gap', '--seed', '0', '--verbose')
    assert (tmp_path / 'logs' / 'isofake.log').is_file()


def test_ablate_reports_median_per_variant(tmp_path, small_config, capsys):
    data = tmp_path / 'data'
    assert run(tmp_path, 'gen-data', '--config', str(small_config), '--out', str(data)) == 0
    capsys.readouterr()
    assert run(tmp_path, 'ablate', '--config', str(small_config), '--dataset', str(data),
               '--out', str(tmp_path / 'abl'), '--epochs', '1', '--seeds', '0', '1',
               '--variants', 'two_branch', 'single_branch') == 0
    report = json.loads((tmp_path / 'abl' / 'ablation.json').read_text())
    assert set(report) == {'two_branch', 'single_branch'}
    for row in report.values():
        assert set(row['tauc']) == {'0', '1'}
        assert 0.0 <= row['median_tauc'] <= 1.0
    assert (tmp_path / 'abl' / 'single_branch' / 'seed1' / 'best.ckpt').is_file()


def test_metadata_carries_only_parser_fields():
    for meta in COMMAND_METADATA.values():
        assert set(meta) == {'label', 'description', 'arguments', 'uses_config'}
    assert COMMAND_METADATA['eval']['uses_config'] is False
    assert COMMAND_METADATA['train']['uses_config'] is True
