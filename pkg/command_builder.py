# command_builder.py

import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from config import RunConfig, load_run_config
from dataset_service import DatasetManifest, VideoStore, band_energy_gap, generate, manifest_hash
from detector_model import load_model_checkpoint
from errors import CheckFailure, ShapeError
from grad_check import CHECKS, DEFAULT_SEEDS, MUTATION_TARGETS, run_checks, summarize
from metrics_service import (ScoreRecord, file_sha256, histogram_export, log_weighted_precision_at, metric_block,
                             read_scores_csv, roc, select_operating_point, video_level, write_histograms_csv,
                             write_scores_csv, write_timeline_csv)
from plot_service import plot_histograms, plot_roc
from trainer import ABLATION_VARIANTS, TrainResult, run_ablation, score_split, train

logger = logging.getLogger(__name__)

COMMANDS: Dict[str, Callable] = {}
COMMAND_METADATA: Dict[str, Dict[str, Any]] = {}

DEFAULT_CUTOFFS = (0.1,)
DEFAULT_RECALLS = (0.1, 0.5, 0.9)
REPORT_FILE = 'report.json'


def arg(*flags, **kwargs) -> Tuple[Tuple[str, ...], Dict[str, Any]]:
    """Descreve um argumento de subcomando (repassado ao argparse)."""
    return flags, kwargs


def register_command(name, label, arguments: Sequence = (), **kwargs):
    """Decorador para registrar subcomandos e metadados automaticamente."""
    meta = {
        'label': label,
        'description': kwargs.get('description', ''),
        'arguments': list(arguments),
        'uses_config': kwargs.get('uses_config', True),
    }
    COMMAND_METADATA[name] = meta

    def decorator(func):
        COMMANDS[name] = func
        return func

    return decorator


def _run_config(args) -> RunConfig:
    overrides: Dict[str, Any] = {}
    if getattr(args, 'seed', None) is not None:
        overrides['seed'] = args.seed
    if getattr(args, 'epochs', None) is not None:
        overrides['train.epochs'] = args.epochs
    if getattr(args, 'log_dir', None):
        overrides['paths.log_dir'] = args.log_dir
    return load_run_config(getattr(args, 'config', None), overrides)


def _emit(payload: Dict[str, Any]):
    print(json.dumps(payload, indent=2, sort_keys=True))


# --- gen-data ---

def cmd_gen_data(run: RunConfig, out_dir: Path) -> Tuple[DatasetManifest, Dict[str, Any]]:
    """Gera o corpus e devolve o manifesto e as estatísticas impressas."""
    manifest = generate(run.data, run.seed, out_dir, run.train.workers)
    store = VideoStore(out_dir)
    stats = {
        'videos': len(manifest.videos),
        'counts': manifest.counts(),
        'manifest_sha256': manifest_hash(out_dir),
        'band_energy_gap': band_energy_gap(store.videos()),
    }
    logger.info(f"Corpus gerado em {out_dir}: {stats['videos']} vídeos, gap de energia {stats['band_energy_gap']:.4g}")
    return manifest, stats


@register_command('gen-data', 'Gerar corpus sintético', arguments=[
    arg('--out', help='diretório do dataset (padrão: paths.dataset_dir)'),
], description='Gera vídeos naturais/manipulados, manifesto e estatísticas do corpus.')
def _handle_gen_data(args) -> int:
    run = _run_config(args)
    _, stats = cmd_gen_data(run, Path(args.out or run.paths.dataset_dir))
    _emit(stats)
    return 0


# --- train ---

def cmd_train(run: RunConfig, dataset_dir: Path, out_dir: Path) -> TrainResult:
    store = VideoStore(dataset_dir)
    return train(run, store, out_dir)


@register_command('train', 'Treinar detector', arguments=[
    arg('--dataset', help='diretório do dataset (padrão: paths.dataset_dir)'),
    arg('--out', help='diretório de saída (padrão: paths.out_dir)'),
    arg('--epochs', type=int, help='sobrescreve train.epochs'),
], description='Treina com épocas estratificadas e grava checkpoints + train_log.jsonl.')
def _handle_train(args) -> int:
    run = _run_config(args)
    result = cmd_train(run, Path(args.dataset or run.paths.dataset_dir), Path(args.out or run.paths.out_dir))
    last = result.history[-1] if result.history else {}
    _emit({'best_epoch': result.best_epoch, 'checkpoint': str(result.best_checkpoint), 'last_epoch': last})
    return 0


# --- score ---

def cmd_score(checkpoint: Path, dataset_dir: Path, split: str, stride: int, out_csv: Path,
              run: Optional[RunConfig] = None) -> List[ScoreRecord]:
    """Grava o CSV de escores e, ao lado, a linha do tempo por janela."""
    store = VideoStore(dataset_dir)
    model, hyper, manifest, _ = load_model_checkpoint(checkpoint)
    c, m = model.config, store.manifest
    if (c.channels, c.height, c.width) != (m.channels, m.height, m.width):
        raise ShapeError(f"Checkpoint {c.channels}x{c.height}x{c.width} incompatível com o dataset "
                         f"{m.channels}x{m.height}x{m.width}.")
    echo = manifest.get('extra', {}).get('run_config', {}).get('data', {})
    F = echo.get('sequence_length', run.data.sequence_length if run else 10)
    fps = run.data.fps if run else echo.get('fps', 25.0)
    rows = score_split(model, hyper, store, split, F, stride)
    records = [r for r, _, _ in rows]
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out_csv, records)
    write_timeline_csv(out_csv.with_name(out_csv.stem + '.timeline.csv'),
                       [(r, start, end, fps) for r, start, end in rows])
    return records


@register_command('score', 'Pontuar sequências', arguments=[
    arg('--checkpoint', required=True, help='checkpoint do modelo (best.ckpt)'),
    arg('--dataset', help='diretório do dataset (padrão: paths.dataset_dir)'),
    arg('--split', default='test', choices=['train', 'valid', 'test']),
    arg('--stride', type=int, help='um quadro a cada N (padrão: data.eval_stride)'),
    arg('--out', help='CSV de saída (padrão: <out_dir>/scores_<split>.csv)'),
], description='Distância ao centro para cada sequência de avaliação do split.')
def _handle_score(args) -> int:
    run = _run_config(args)
    out = Path(args.out) if args.out else Path(run.paths.out_dir) / f'scores_{args.split}.csv'
    stride = args.stride if args.stride is not None else run.data.eval_stride
    records = cmd_score(Path(args.checkpoint), Path(args.dataset or run.paths.dataset_dir), args.split,
                        stride, out, run)
    _emit({'records': len(records), 'csv': str(out)})
    return 0


# --- eval ---

def _test_from_valid(valid: List[ScoreRecord], test: List[ScoreRecord], recalls: Sequence[float],
                     alpha: float, seed: int) -> Dict[str, Any]:
    block = {}
    for r in recalls:
        op = select_operating_point(valid, r, alpha, folds=5, seed=seed, sequence_counts=(None, 1, 2, 4))
        applied = log_weighted_precision_at(video_level(test, op.max_sequences), op.threshold, alpha)
        block[format(r, 'g')] = {
            'valid': {'log_wp': op.log_wp, 'recall': op.recall, 'fold': op.fold},
            'threshold': op.threshold,
            'max_sequences': op.max_sequences,
            'test_from_valid': {'log_wp': applied.log_wp, 'recall': applied.recall},
        }
    return block


def cmd_eval(score_csv: Path, cutoffs: Sequence[float], recall_targets: Sequence[float], out_dir: Path,
             valid_csv: Optional[Path] = None, tauc_mode: str = 'grid', grid_n: int = 1000,
             alpha: float = 100.0, seed: int = 0) -> Dict[str, Any]:
    """Relatório JSON (sequência e vídeo) + SVGs de ROC e histogramas."""
    records = read_scores_csv(score_csv)
    videos = video_level(records)
    report: Dict[str, Any] = {
        'input': score_csv.name,
        'input_sha256': file_sha256(score_csv),
        'cutoffs': list(cutoffs),
        'recall_targets': list(recall_targets),
        'tauc_mode': tauc_mode,
        'sequence': metric_block(records, cutoffs, recall_targets, alpha, grid_n, tauc_mode),
        'video': metric_block(videos, cutoffs, recall_targets, alpha, grid_n, tauc_mode),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    for level, recs in (('sequence', records), ('video', videos)):
        hist = histogram_export(recs)
        report[level]['overlap'] = hist.overlap
        write_histograms_csv(out_dir / f'histogram_{level}.csv', hist)
        plot_histograms(hist, out_dir / f'histogram_{level}.svg', level)
    plot_roc({'sequência': roc(records), 'vídeo': roc(videos)}, out_dir / 'roc.svg', max(cutoffs))
    if valid_csv is not None:
        report['valid_input_sha256'] = file_sha256(valid_csv)
        report['dfdc'] = _test_from_valid(read_scores_csv(valid_csv), records, recall_targets, alpha, seed)
    (out_dir / REPORT_FILE).write_text(json.dumps(report, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return report


@register_command('eval', 'Avaliar escores', uses_config=False, arguments=[
    arg('scores', help='CSV de escores (video_id,sequence_index,score,label)'),
    arg('--out', help='diretório do relatório (padrão: ao lado do CSV)'),
    arg('--cutoff', type=float, action='append', help='FAR de corte (repetível; padrão 0.1)'),
    arg('--recall', type=float, action='append', help='recall alvo de log(wP) (repetível; padrão 0.1 0.5 0.9)'),
    arg('--valid-csv', help='escores de validação para o protocolo test-from-valid'),
    arg('--tauc-mode', default='grid', choices=['grid', 'vertex']),
    arg('--grid-n', type=int, default=1000),
    arg('--seed', type=int, default=0),
], description='AUC, pAUC, tAUC, TAR@FAR e log(wP) em nível de sequência e de vídeo.')
def _handle_eval(args) -> int:
    csv_path = Path(args.scores)
    out = Path(args.out) if args.out else csv_path.parent / f'{csv_path.stem}_eval'
    report = cmd_eval(csv_path, args.cutoff or DEFAULT_CUTOFFS, args.recall or DEFAULT_RECALLS, out,
                      Path(args.valid_csv) if args.valid_csv else None, args.tauc_mode, args.grid_n,
                      seed=args.seed)
    _emit({level: {'auc': report[level]['auc'], 'pauc': report[level]['pauc'], 'tauc': report[level]['tauc'],
                   'tar_at_far': report[level]['tar_at_far']} for level in ('sequence', 'video')})
    return 0


# --- grad-check ---

def cmd_grad_check(seeds: Sequence[int], tolerance: float = 1e-4, mutate: Optional[str] = None,
                   only: Optional[Sequence[str]] = None, full: bool = False) -> List[Dict[str, Any]]:
    """Tabela por verificação; CheckFailure se alguma exceder a tolerância."""
    table = summarize(run_checks(seeds, tolerance, only, mutate, full))
    for row in table:
        status = 'ok' if row['passed'] else 'FALHOU'
        print(f"{row['check']:<22} {row['max_rel_error']:.3e}  x{row['evaluations']:<4} {status}")
    failed = [row['check'] for row in table if not row['passed']]
    if failed:
        raise CheckFailure(f"{len(failed)} verificação(ões) de gradiente acima de {tolerance:g}",
                           details=', '.join(failed))
    return table


@register_command('grad-check', 'Verificar gradientes', uses_config=False, arguments=[
    arg('--seed', type=int, action='append', help="semente (repetível; padrão 0..19)"),
    arg('--tolerance', type=float, default=1e-4),
    arg('--check', action='append', choices=sorted(CHECKS), help='restringe a verificações específicas'),
    arg('--mutate', choices=sorted(MUTATION_TARGETS), help='corrompe um backward (sentinela)'),
    arg('--full', action='store_true', help='roda as verificações de ponta a ponta em todas as sementes'),
], description='Diferenças finitas (64 bits, eps 1e-5) contra todos os backward.')
def _handle_grad_check(args) -> int:
    cmd_grad_check(args.seed or DEFAULT_SEEDS, args.tolerance, args.mutate, args.check, args.full)
    return 0


# --- ablate ---

def cmd_ablate(run: RunConfig, dataset_dir: Path, out_dir: Path, variants: Sequence[str],
               seeds: Sequence[int]) -> Dict[str, Any]:
    store = VideoStore(dataset_dir)
    report = run_ablation(run, store, variants, seeds, out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / 'ablation.json').write_text(json.dumps(report, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return report


@register_command('ablate', 'Ablação de arquitetura', arguments=[
    arg('--dataset', help='diretório do dataset (padrão: paths.dataset_dir)'),
    arg('--out', help='diretório de saída (padrão: <out_dir>/ablation)'),
    arg('--variants', nargs='+', default=['two_branch', 'single_branch'], choices=sorted(ABLATION_VARIANTS)),
    arg('--seeds', nargs='+', type=int, default=[0, 1, 2, 3, 4]),
    arg('--epochs', type=int, help='sobrescreve train.epochs'),
], description='Treina cada variante em várias sementes e compara o tAUC@10% de vídeo.')
def _handle_ablate(args) -> int:
    run = _run_config(args)
    out = Path(args.out) if args.out else Path(run.paths.out_dir) / 'ablation'
    report = cmd_ablate(run, Path(args.dataset or run.paths.dataset_dir), out, args.variants, args.seeds)
    _emit({name: row['median_tauc'] for name, row in report.items()})
    return 0
