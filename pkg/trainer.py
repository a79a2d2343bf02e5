# trainer.py
"""
Protocolo de treino: centro pré-calculado antes da época 0, épocas
estratificadas, rebalanceamento opcional, Adam com taxas por bloco e queda em
platô guiada pela perda de validação.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import RunConfig, from_dict
from dataset_service import VideoStore, draw_window, eval_sequences, rebalance, stratified_epoch
from detector_model import (FaceSequence, IsolationNet, assign_lr_scales, build, load_model_checkpoint,
                            save_model_checkpoint)
from errors import DataError, ShapeError
from isolation_loss import (NATURAL, BatchPartition, HypersphereSpec, anomaly_scores, compute_center,
                            isolation_loss, isolation_loss_grad)
from metrics_service import ScoreRecord, auc_geometric, roc, tauc, video_level
from optimizer import Adam, plateau_schedule

logger = logging.getLogger(__name__)

TRAIN_LOG = 'train_log.jsonl'
BEST_CHECKPOINT = 'best.ckpt'
LAST_CHECKPOINT = 'last.ckpt'

# Fluxos aleatórios reservados (fora do intervalo de épocas)
CENTER_STREAM = 1 << 30
VALID_STREAM = (1 << 30) + 1

ABLATION_VARIANTS: Dict[str, Dict[str, object]] = {
    'two_branch': {},
    'single_branch': {'model.single_branch': True},
    'fusion_sum': {'model.recurrent_fusion': 'sum'},
    'groups1': {'model.fusion_groups': 1},
    'no_recurrence': {'model.recurrent': False},
    'no_ft': {'optimizer.block_lr_scales': False},
    'no_dropout': {'model.dropout': 0.0},
}


@dataclass
class TrainResult:
    model: IsolationNet
    hyper: HypersphereSpec
    history: List[Dict] = field(default_factory=list)
    best_epoch: int = 0
    out_dir: Optional[Path] = None

    @property
    def best_checkpoint(self) -> Path:
        return self.out_dir / BEST_CHECKPOINT


def _stack(sequences: Sequence[FaceSequence]) -> np.ndarray:
    return np.stack([s.frames for s in sequences])


def embed_sequences(model: IsolationNet, sequences: Sequence[FaceSequence], batch_size: int = 32) -> np.ndarray:
    """Embeddings (N, E) em modo avaliação, em lotes."""
    if not sequences:
        return np.zeros((0, model.config.embedding_dim))
    chunks = [model.embed(_stack(sequences[i:i + batch_size])) for i in range(0, len(sequences), batch_size)]
    return np.concatenate(chunks).astype(np.float64)


def _check_store(run: RunConfig, store: VideoStore):
    m = store.manifest
    c = run.model
    if (m.channels, m.height, m.width) != (c.channels, c.height, c.width):
        raise ShapeError(f"Corpus {m.channels}x{m.height}x{m.width} incompatível com o modelo "
                         f"{c.channels}x{c.height}x{c.width}.")


def precompute_center(model: IsolationNet, store: VideoStore, run: RunConfig) -> np.ndarray:
    """Média dos embeddings de uma janela semeada por vídeo natural de treino."""
    naturals = [v for v in store.videos('train') if v.label == NATURAL]
    if not naturals:
        raise DataError("O split de treino não tem vídeos naturais para calcular o centro.")
    seqs = stratified_epoch(naturals, run.data.sequence_length, run.seed, CENTER_STREAM, run.data.train_stride)
    emb = embed_sequences(model, seqs, run.train.batch_size)
    return compute_center(list(emb))


def _evaluate(model: IsolationNet, hyper: HypersphereSpec, sequences: Sequence[FaceSequence],
              batch_size: int) -> Tuple[Optional[float], Optional[float]]:
    if not sequences:
        return None, None
    emb = embed_sequences(model, sequences, batch_size)
    labels = [s.label for s in sequences]
    loss = isolation_loss(emb, BatchPartition.from_labels(labels), hyper)
    if len(set(labels)) < 2:
        return loss, None
    scores = anomaly_scores(emb, hyper)
    records = [ScoreRecord(s.video_id, i, float(d), s.label) for i, (s, d) in enumerate(zip(sequences, scores))]
    return loss, auc_geometric(roc(records))


def train(run: RunConfig, store: VideoStore, out_dir: Union[str, Path]) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_store(run, store)
    F, stride = run.data.sequence_length, run.data.train_stride
    bs = run.train.batch_size

    model = build(run.model, run.seed)
    if run.optimizer.block_lr_scales:
        assign_lr_scales(model, run.optimizer.lr)
    center = precompute_center(model, store, run)
    r_minus, r_plus = run.radii
    hyper = HypersphereSpec(center, r_minus, r_plus)
    logger.info(f"Centro calculado (dim={hyper.dim}); raios r-={r_minus:.4g} r+={r_plus:.4g}")

    opt = Adam(model.params(), run.optimizer.lr, (run.optimizer.beta1, run.optimizer.beta2),
               run.optimizer.eps, run.optimizer.weight_decay)
    train_videos = store.videos('train')
    by_id = {v.video_id: v for v in train_videos}
    plan = rebalance(store.entries('train')) if run.data.rebalance else None
    if plan is not None:
        logger.info(f"Rebalanceamento ativo; pesos efetivos por tipo: {plan.effective_by_type()}")
    valid_seqs = stratified_epoch(store.videos('valid'), F, run.seed, VALID_STREAM, stride)

    config_echo = run.to_dict()
    save_model_checkpoint(out_dir / BEST_CHECKPOINT, model, hyper, opt, {'epoch': 0, 'run_config': config_echo})

    history: List[Dict] = []
    valid_history: List[float] = []
    best_loss = float('inf')
    best_epoch = 0
    log_path = out_dir / TRAIN_LOG
    with open(log_path, 'w', encoding='utf-8') as log_file:
        for epoch in range(1, run.train.epochs + 1):
            # stratified_epoch usa a raiz (seed, epoch); dropout e redesenhos usam filhos independentes
            dropout_seq, redraw_seq = np.random.SeedSequence([run.seed, epoch]).spawn(2)
            model.reseed_dropout(int(np.random.default_rng(dropout_seq).integers(2 ** 31)))
            rng = np.random.default_rng(redraw_seq)
            seqs = stratified_epoch(train_videos, F, run.seed, epoch, stride)
            if plan is not None:
                seqs = plan.expand(seqs, lambda vid: draw_window(by_id[vid], F, rng, stride), rng)

            batch_losses = []
            for i in range(0, len(seqs), bs):
                batch = seqs[i:i + bs]
                partition = BatchPartition.from_labels([s.label for s in batch])
                emb = model.forward(_stack(batch), training=True)
                batch_losses.append(isolation_loss(emb, partition, hyper))
                model.zero_grad()
                model.backward(isolation_loss_grad(emb, partition, hyper))
                opt.step()
            train_loss = float(np.mean(batch_losses))

            valid_loss, valid_auc = _evaluate(model, hyper, valid_seqs, bs)
            monitored = train_loss if valid_loss is None else valid_loss
            valid_history.append(monitored)
            lr, drops = plateau_schedule(valid_history, run.optimizer.lr, run.scheduler.patience,
                                         run.scheduler.factor, run.scheduler.max_drops)
            opt.set_lr(lr)

            is_best = monitored < best_loss
            if is_best:
                best_loss, best_epoch = monitored, epoch
                save_model_checkpoint(out_dir / BEST_CHECKPOINT, model, hyper, opt,
                                      {'epoch': epoch, 'run_config': config_echo})
            entry = {'epoch': epoch, 'train_loss': train_loss, 'valid_loss': valid_loss,
                     'valid_auc': valid_auc, 'lr': lr, 'drops': drops, 'best': is_best}
            history.append(entry)
            log_file.write(json.dumps(entry, sort_keys=True) + '\n')
            log_file.flush()
            logger.info(f"Época {epoch}/{run.train.epochs}: treino={train_loss:.5f} valid={valid_loss} "
                        f"auc={valid_auc} lr={lr:g}")

    save_model_checkpoint(out_dir / LAST_CHECKPOINT, model, hyper, opt,
                          {'epoch': run.train.epochs, 'run_config': config_echo})
    logger.info(f"Treino concluído; melhor época {best_epoch} (perda monitorada {best_loss:.5f})")
    return TrainResult(model, hyper, history, best_epoch, out_dir)


def score_split(model: IsolationNet, hyper: HypersphereSpec, store: VideoStore, split: str,
                F: int, stride: int = 7, batch_size: int = 32) -> List[Tuple[ScoreRecord, int, int]]:
    """(registro, quadro inicial, quadro final) para cada sequência de avaliação do split."""
    if hyper is None:
        raise ShapeError("Checkpoint sem centro/raios; não é possível pontuar.")
    if hyper.dim != model.config.embedding_dim:
        raise ShapeError(f"Centro de dimensão {hyper.dim} != embedding {model.config.embedding_dim}.")
    rows = []
    for video in store.videos(split):
        seqs = eval_sequences(video, F, stride)
        scores = anomaly_scores(embed_sequences(model, seqs, batch_size), hyper)
        for i, (seq, score) in enumerate(zip(seqs, scores)):
            end = seq.start_index + (seq.length - 1) * seq.stride
            rows.append((ScoreRecord(video.video_id, i, float(score), video.label), seq.start_index, end))
    logger.info(f"{len(rows)} sequências pontuadas no split '{split}'.")
    return rows


def variant_config(base: RunConfig, overrides: Dict[str, object], seed: int) -> RunConfig:
    tree = base.to_dict()
    tree['seed'] = seed
    for dotted, value in overrides.items():
        section, key = dotted.split('.')
        tree[section][key] = value
    return from_dict(tree)


def run_ablation(base: RunConfig, store: VideoStore, variants: Sequence[str], seeds: Sequence[int],
                 out_dir: Union[str, Path], far_cutoff: float = 0.1) -> Dict[str, Dict]:
    """Treina cada variante em cada semente e reporta o tAUC de vídeo no split de teste."""
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"Variantes desconhecidas: {unknown}. Disponíveis: {sorted(ABLATION_VARIANTS)}")
    out_dir = Path(out_dir)
    report: Dict[str, Dict] = {}
    for name in variants:
        per_seed = {}
        for seed in seeds:
            run = variant_config(base, ABLATION_VARIANTS[name], seed)
            result = train(run, store, out_dir / name / f'seed{seed}')
            model, hyper, _, _ = load_model_checkpoint(result.best_checkpoint, run.model)
            rows = score_split(model, hyper, store, 'test', run.data.sequence_length, run.data.eval_stride)
            videos = video_level([r for r, _, _ in rows])
            per_seed[str(seed)] = tauc(roc(videos), far_cutoff)
            logger.info(f"Ablação {name} seed={seed}: tAUC@{far_cutoff:g}={per_seed[str(seed)]:.4f}")
        report[name] = {'tauc': per_seed, 'median_tauc': float(np.median(list(per_seed.values())))}
    return report
