# metrics_service.py
"""
Métricas de avaliação sobre escores de anomalia (maior = mais provável manipulação).

Convenções: classe positiva = manipulado; previsão positiva quando
``score >= limiar``; FAR = FP / N_naturais, TAR = TP / N_manipulados.
"""

import csv
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata
from sklearn.model_selection import KFold

from errors import DataError
from isolation_loss import MANIPULATED, NATURAL

logger = logging.getLogger(__name__)

SCORE_HEADER = ['video_id', 'sequence_index', 'score', 'label']
TIMELINE_HEADER = ['video_id', 'sequence_index', 'start_frame', 'end_frame', 'start_seconds', 'score']
_FAR_TOL = 1e-12


@dataclass(frozen=True)
class ScoreRecord:
    video_id: str
    sequence_index: int
    score: float
    label: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DataError(f"Escore não finito para '{self.video_id}' #{self.sequence_index}: {self.score}.")
        if self.label not in (NATURAL, MANIPULATED):
            raise DataError(f"Rótulo inválido {self.label} para '{self.video_id}' (use 0 ou 1).")


@dataclass(frozen=True)
class RocCurve:
    """Pontos de operação (FAR, TAR) em ordem de limiar decrescente, de (0, 0) até (1, 1)."""
    far: np.ndarray
    tar: np.ndarray
    thresholds: Optional[np.ndarray] = None
    n_natural: int = 0
    n_manipulated: int = 0

    def __post_init__(self):
        far = np.asarray(self.far, dtype=np.float64)
        tar = np.asarray(self.tar, dtype=np.float64)
        if far.shape != tar.shape or far.ndim != 1 or far.size < 2:
            raise ValueError("RocCurve precisa de vetores FAR/TAR do mesmo tamanho (>= 2 pontos).")
        if np.any(np.diff(far) < 0) or np.any(np.diff(tar) < 0):
            raise ValueError("FAR e TAR devem ser não decrescentes ao longo da varredura.")
        if far.min() < 0 or tar.min() < 0 or far.max() > 1 or tar.max() > 1:
            raise ValueError("FAR e TAR devem estar em [0, 1].")
        object.__setattr__(self, 'far', far)
        object.__setattr__(self, 'tar', tar)

    def tar_step(self, x: np.ndarray) -> np.ndarray:
        """TAR da função degrau: maior TAR entre os pontos com FAR <= x."""
        idx = np.searchsorted(self.far, np.asarray(x, dtype=np.float64) + _FAR_TOL, side='right') - 1
        return self.tar[np.maximum(idx, 0)]


def _arrays(records: Sequence[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.label for r in records], dtype=np.int64)
    n_man = int(labels.sum())
    if n_man == 0 or n_man == len(labels):
        raise DataError(f"São necessárias as duas classes (naturais={len(labels) - n_man}, manipulados={n_man}).")
    return scores, labels


def _sweep(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contagens acumuladas (TP, FP) em cada limiar distinto, do maior para o menor."""
    order = np.argsort(-scores, kind='stable')
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(1 - y)[last_of_group]
    return s[last_of_group], tp, fp


def roc(records: Sequence[ScoreRecord]) -> RocCurve:
    scores, labels = _arrays(records)
    thresholds, tp, fp = _sweep(scores, labels)
    n_man = int(labels.sum())
    n_nat = labels.size - n_man
    return RocCurve(far=np.r_[0.0, fp / n_nat], tar=np.r_[0.0, tp / n_man],
                    thresholds=np.r_[np.inf, thresholds], n_natural=n_nat, n_manipulated=n_man)


def auc_geometric(curve: RocCurve) -> float:
    """Área por trapézios sobre os vértices; empates (segmentos diagonais) valem 1/2."""
    return float(np.sum(np.diff(curve.far) * (curve.tar[1:] + curve.tar[:-1]) / 2.0))


def auc_rank(records: Sequence[ScoreRecord]) -> float:
    """Estatística de Mann-Whitney com postos médios para empates."""
    scores, labels = _arrays(records)
    ranks = rankdata(scores)
    n_man = int(labels.sum())
    n_nat = labels.size - n_man
    u = ranks[labels == MANIPULATED].sum() - n_man * (n_man + 1) / 2.0
    return float(u / (n_man * n_nat))


def auc(source: Union[RocCurve, Sequence[ScoreRecord]], method: str = 'geometric') -> float:
    if method == 'rank':
        if isinstance(source, RocCurve):
            raise ValueError("O método 'rank' precisa dos registros, não da curva.")
        return auc_rank(source)
    if method != 'geometric':
        raise ValueError(f"Método de AUC desconhecido '{method}'.")
    curve = source if isinstance(source, RocCurve) else roc(source)
    return auc_geometric(curve)


def _check_far(far: float, name: str = 'far'):
    if not 0.0 < far <= 1.0:
        raise ValueError(f"{name} deve estar em (0, 1] (recebido {far}).")


def tar_at_far(curve: RocCurve, far: float) -> float:
    _check_far(far)
    return float(curve.tar_step(far))


def tauc(curve: RocCurve, far_cutoff: float, grid_n: int = 1000, mode: str = 'grid') -> float:
    """
    TAR média no intervalo (0, far_cutoff].

    ``grid``: ``grid_n`` FARs uniformes avaliados na função degrau.
    ``vertex``: média sobre os FARs efetivamente atingidos pela curva no intervalo.
    """
    _check_far(far_cutoff, 'far_cutoff')
    if mode == 'grid':
        if grid_n < 1:
            raise ValueError(f"grid_n deve ser >= 1 (recebido {grid_n}).")
        grid = far_cutoff * np.arange(1, grid_n + 1, dtype=np.float64) / grid_n
        return float(curve.tar_step(grid).mean())
    if mode == 'vertex':
        achieved = np.unique(curve.far[(curve.far > 0) & (curve.far <= far_cutoff + _FAR_TOL)])
        if achieved.size == 0:
            return tar_at_far(curve, far_cutoff)
        return float(curve.tar_step(achieved).mean())
    raise ValueError(f"Modo de tAUC desconhecido '{mode}' (use grid ou vertex).")


def partial_area(curve: RocCurve, f: float) -> float:
    """Integral de TAR em FAR sobre [0, f], linear por partes entre vértices."""
    far, tar = curve.far, curve.tar
    area = 0.0
    for i in range(far.size - 1):
        x0, x1 = far[i], far[i + 1]
        if x0 >= f:
            break
        if x1 <= f:
            area += (x1 - x0) * (tar[i] + tar[i + 1]) / 2.0
        else:
            y_f = tar[i] + (tar[i + 1] - tar[i]) * (f - x0) / (x1 - x0)
            area += (f - x0) * (tar[i] + y_f) / 2.0
    return float(area)


def pauc_standardized(curve: RocCurve, far_cutoff: float) -> float:
    """pAUC padronizado (McClish): 0.5 no acaso, 1 na perfeição."""
    _check_far(far_cutoff, 'far_cutoff')
    f = far_cutoff
    a = partial_area(curve, f)
    chance = f * f / 2.0
    return 0.5 * (1.0 + (a - chance) / (f - chance))


def video_level(records: Sequence[ScoreRecord], max_sequences: Optional[int] = None) -> List[ScoreRecord]:
    """
    Um registro por vídeo com a média dos escores das sequências.

    ``max_sequences`` limita a média às n primeiras sequências (por índice).
    A soma é correta por arredondamento, então a ordem dos registros não importa.
    """
    if not records:
        raise DataError("video_level precisa de pelo menos um registro.")
    groups: Dict[str, List[ScoreRecord]] = {}
    for r in records:
        groups.setdefault(r.video_id, []).append(r)
    out = []
    for vid in sorted(groups):
        items = sorted(groups[vid], key=lambda r: r.sequence_index)
        labels = {r.label for r in items}
        if len(labels) != 1:
            raise DataError(f"Rótulos conflitantes no vídeo '{vid}'.")
        if max_sequences is not None:
            items = items[:max_sequences]
        out.append(ScoreRecord(vid, 0, math.fsum(r.score for r in items) / len(items), labels.pop()))
    return out


class WeightedPrecision(NamedTuple):
    log_wp: float
    recall: float
    threshold: float
    reached: bool


def _log_wp(tp: int, fp: int, alpha: float) -> float:
    if fp == 0:
        return 0.0
    return math.log10(alpha * tp / (alpha * tp + fp))


def log_weighted_precision(records: Sequence[ScoreRecord], recall_target: float,
                           alpha: float = 100.0) -> WeightedPrecision:
    """
    Maior log10(wP), wP = a*TP / (a*TP + FP), entre os limiares com recall >= alvo.

    Empates em wP favorecem maior recall e depois maior limiar. Alvo inatingível
    devolve o ponto de recall máximo com ``reached=False``.
    """
    if not recall_target > 0:
        raise ValueError(f"recall_target deve ser positivo (recebido {recall_target}).")
    scores, labels = _arrays(records)
    thresholds, tp, fp = _sweep(scores, labels)
    n_man = int(labels.sum())
    best = None
    for thr, t, f in zip(thresholds, tp, fp):
        recall = t / n_man
        if recall < recall_target:
            continue
        key = (_log_wp(int(t), int(f), alpha), recall, thr)
        if best is None or key > best:
            best = key
    if best is None:
        t, f = int(tp[-1]), int(fp[-1])
        logger.warning(f"Recall alvo {recall_target} inatingível; usando recall máximo {t / n_man}.")
        return WeightedPrecision(_log_wp(t, f, alpha), t / n_man, float(thresholds[-1]), False)
    return WeightedPrecision(best[0], float(best[1]), float(best[2]), True)


def log_weighted_precision_at(records: Sequence[ScoreRecord], threshold: float,
                              alpha: float = 100.0) -> WeightedPrecision:
    """log10(wP) com limiar fixo (protocolo test-from-valid); o recall é apenas reportado."""
    scores, labels = _arrays(records)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == MANIPULATED)))
    fp = int(np.sum(pred & (labels == NATURAL)))
    recall = tp / int(labels.sum())
    log_wp = _log_wp(tp, fp, alpha) if tp or fp else float('-inf')
    return WeightedPrecision(log_wp, recall, float(threshold), True)


class OperatingPoint(NamedTuple):
    threshold: float
    max_sequences: Optional[int]
    fold: int
    log_wp: float
    recall: float


def select_operating_point(records: Sequence[ScoreRecord], recall_target: float, alpha: float = 100.0,
                           folds: int = 5, seed: int = 0,
                           sequence_counts: Sequence[Optional[int]] = (None,)) -> OperatingPoint:
    """
    Validação cruzada em k dobras de vídeos: em cada dobra retida escolhe o par
    (número de sequências por vídeo, limiar) que maximiza log(wP) no recall alvo;
    devolve o melhor par entre as dobras.
    """
    video_ids = np.array(sorted({r.video_id for r in records}))
    if video_ids.size < folds:
        raise DataError(f"São necessários >= {folds} vídeos para {folds} dobras (há {video_ids.size}).")
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    best: Optional[OperatingPoint] = None
    for fold, (_, held) in enumerate(splitter.split(video_ids)):
        held_ids = set(video_ids[held])
        subset = [r for r in records if r.video_id in held_ids]
        for n in sequence_counts:
            videos = video_level(subset, max_sequences=n)
            if len({r.label for r in videos}) < 2:
                logger.debug(f"Dobra {fold} sem as duas classes; ignorada.")
                continue
            wp = log_weighted_precision(videos, recall_target, alpha)
            if best is None or (wp.log_wp, wp.recall) > (best.log_wp, best.recall):
                best = OperatingPoint(wp.threshold, n, fold, wp.log_wp, wp.recall)
    if best is None:
        raise DataError("Nenhuma dobra contém as duas classes.")
    return best


def accuracy_at(records: Sequence[ScoreRecord], threshold: float) -> float:
    scores = np.array([r.score for r in records])
    labels = np.array([r.label for r in records])
    return float(np.mean((scores >= threshold).astype(int) == labels))


@dataclass
class ScoreHistograms:
    edges: np.ndarray
    natural: np.ndarray
    manipulated: np.ndarray

    @property
    def overlap(self) -> float:
        return overlap_coefficient(self.natural, self.manipulated)


def histogram_export(records: Sequence[ScoreRecord], bins: int = 50) -> ScoreHistograms:
    """Histogramas genuíno/impostor normalizados (soma 1) sobre a mesma faixa de escores."""
    scores, labels = _arrays(records)
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    nat, _ = np.histogram(scores[labels == NATURAL], bins=edges)
    man, _ = np.histogram(scores[labels == MANIPULATED], bins=edges)
    return ScoreHistograms(edges, nat / nat.sum(), man / man.sum())


def overlap_coefficient(hist_a: np.ndarray, hist_b: np.ndarray) -> float:
    """Soma dos mínimos bin a bin de dois histogramas normalizados."""
    return float(np.minimum(hist_a, hist_b).sum())


# --- Arquivos ---

def write_scores_csv(path: Union[str, Path], records: Iterable[ScoreRecord]):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(SCORE_HEADER)
        for r in records:
            writer.writerow([r.video_id, r.sequence_index, format(r.score, '.17g'), r.label])


def read_scores_csv(path: Union[str, Path]) -> List[ScoreRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"CSV de escores não encontrado: {path}")
    records = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise DataError(f"Cabeçalho inesperado em {path}: {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                vid, idx, score, label = row
                records.append(ScoreRecord(vid, int(idx), float(score), int(label)))
            except ValueError as e:
                raise DataError(f"Linha {lineno} malformada em {path}: {row}", details=str(e))
    return records


def write_timeline_csv(path: Union[str, Path], rows: Iterable[Tuple[ScoreRecord, int, int, float]]):
    """Linha do tempo por janela: (registro, quadro inicial, quadro final, fps)."""
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(TIMELINE_HEADER)
        for r, start, end, fps in rows:
            writer.writerow([r.video_id, r.sequence_index, start, end, format(start / fps, '.6f'),
                             format(r.score, '.17g')])


def write_histograms_csv(path: Union[str, Path], hist: ScoreHistograms):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['bin_low', 'bin_high', 'natural', 'manipulated'])
        for i in range(hist.natural.size):
            writer.writerow([format(hist.edges[i], '.17g'), format(hist.edges[i + 1], '.17g'),
                             format(hist.natural[i], '.17g'), format(hist.manipulated[i], '.17g')])


def file_sha256(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def metric_block(records: Sequence[ScoreRecord], cutoffs: Sequence[float], recall_targets: Sequence[float],
                 alpha: float = 100.0, grid_n: int = 1000, tauc_mode: str = 'grid') -> Dict:
    """Bloco do relatório: AUC, pAUC/tAUC/TAR em cada corte e log(wP) em cada recall."""
    curve = roc(records)
    block = {
        'count': len(records),
        'natural': curve.n_natural,
        'manipulated': curve.n_manipulated,
        'auc': auc_geometric(curve),
        'auc_rank': auc_rank(records),
        'pauc': {}, 'tauc': {}, 'tar_at_far': {}, 'log_wp': {},
    }
    for f in cutoffs:
        key = format(f, 'g')
        block['pauc'][key] = pauc_standardized(curve, f)
        block['tauc'][key] = tauc(curve, f, grid_n, tauc_mode)
        block['tar_at_far'][key] = tar_at_far(curve, f)
    for r in recall_targets:
        wp = log_weighted_precision(records, r, alpha)
        block['log_wp'][format(r, 'g')] = wp._asdict()
    threshold_far10 = _threshold_at_far(curve, 0.1)
    block['accuracy_at_far10'] = accuracy_at(records, threshold_far10)
    return block


def _threshold_at_far(curve: RocCurve, far: float) -> float:
    """Limiar do ponto de operação usado por ``tar_at_far``."""
    idx = int(np.searchsorted(curve.far, far + _FAR_TOL, side='right') - 1)
    return float(curve.thresholds[max(idx, 0)])
