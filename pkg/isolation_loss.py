# isolation_loss.py
"""
Perda de isolamento com duas hiperesferas em torno de um centro fixo c.

    L = mean_nat max(0, ||e - c|| - r_minus) + mean_man max(0, r_plus - ||e - c||)

Cada termo é normalizado pela própria cardinalidade; uma classe vazia contribui 0.
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Sequence, Tuple

import numpy as np

from errors import ShapeError

logger = logging.getLogger(__name__)

NATURAL = 0
MANIPULATED = 1

# Radii de referência: (dimensão do embedding, r_minus, r_plus).
REFERENCE_RADII_RECURRENT = (256, 0.042, 1.638)
REFERENCE_RADII_BACKBONE = (1024, 2.5, 97.5)

_CENTER_EPS = 1e-12


@dataclass(frozen=True)
class HypersphereSpec:
    center: np.ndarray
    r_minus: float
    r_plus: float

    def __post_init__(self):
        if not 0.0 < self.r_minus < self.r_plus:
            raise ValueError(f"Raios inválidos: é preciso 0 < r_minus ({self.r_minus}) < r_plus ({self.r_plus}).")
        center = np.array(self.center, dtype=np.float64)
        center.setflags(write=False)
        object.__setattr__(self, 'center', center)

    @property
    def margin(self) -> float:
        return self.r_plus - self.r_minus

    @property
    def dim(self) -> int:
        return int(self.center.shape[0])


@dataclass(frozen=True)
class BatchPartition:
    natural: Tuple[int, ...]
    manipulated: Tuple[int, ...]

    def __post_init__(self):
        if set(self.natural) & set(self.manipulated):
            raise ValueError("As partições natural/manipulada não podem se sobrepor.")
        if not self.natural and not self.manipulated:
            raise ValueError("Mini-batch sem amostras naturais nem manipuladas.")

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> 'BatchPartition':
        labels = [int(v) for v in labels]
        return cls(natural=tuple(i for i, v in enumerate(labels) if v == NATURAL),
                   manipulated=tuple(i for i, v in enumerate(labels) if v == MANIPULATED))


def scaled_radii(dim: int, recurrent: bool = True) -> Tuple[float, float]:
    """Raios de referência reescalados por sqrt(dim / dim_ref)."""
    ref_dim, r_minus, r_plus = REFERENCE_RADII_RECURRENT if recurrent else REFERENCE_RADII_BACKBONE
    scale = float(np.sqrt(dim / ref_dim))
    return r_minus * scale, r_plus * scale


def compute_center(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Média aritmética dos embeddings naturais; o resultado é congelado."""
    if len(embeddings) == 0:
        raise ValueError("Não é possível calcular o centro de uma lista vazia.")
    dims = {np.shape(e) for e in embeddings}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ShapeError(f"Embeddings com dimensões inconsistentes: {sorted(dims)}.")
    arr = np.asarray(embeddings, dtype=np.float64)
    center = arr.mean(axis=0)
    center.setflags(write=False)
    return center


def _distances(embeddings: np.ndarray, spec: HypersphereSpec) -> Tuple[np.ndarray, np.ndarray]:
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if emb.shape[1] != spec.dim:
        raise ShapeError(f"Embedding de dimensão {emb.shape[1]} != dimensão do centro {spec.dim}.")
    diff = emb - spec.center
    # Uma redução por linha: a distância de uma amostra não depende do tamanho do lote.
    dist = np.array([np.sqrt(np.dot(d, d)) for d in diff])
    return diff, dist


def anomaly_score(e: np.ndarray, spec: HypersphereSpec) -> float:
    """Distância euclidiana ao centro; maior = mais provável manipulação."""
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1:
        raise ShapeError(f"anomaly_score espera um vetor; recebeu shape {e.shape}.")
    return float(_distances(e[None], spec)[1][0])


def anomaly_scores(embeddings: np.ndarray, spec: HypersphereSpec) -> np.ndarray:
    return _distances(embeddings, spec)[1]


def _exact_mean(values: List[float]) -> Fraction:
    return sum((Fraction(v) for v in values), Fraction(0)) / len(values)


def isolation_loss(embeddings: np.ndarray, partition: BatchPartition, spec: HypersphereSpec) -> float:
    """
    Valor escalar da perda.

    As médias são calculadas em aritmética racional e arredondadas uma única vez,
    de modo que replicar uma partição não altera nenhum bit do resultado.
    """
    _, dist = _distances(embeddings, spec)
    total = Fraction(0)
    if partition.natural:
        total += _exact_mean([max(0.0, dist[i] - spec.r_minus) for i in partition.natural])
    if partition.manipulated:
        total += _exact_mean([max(0.0, spec.r_plus - dist[j]) for j in partition.manipulated])
    return float(total)


def isolation_loss_grad(embeddings: np.ndarray, partition: BatchPartition, spec: HypersphereSpec) -> np.ndarray:
    """Subgradiente em relação a cada embedding; zero na dobra da hinge e no centro."""
    diff, dist = _distances(embeddings, spec)
    grad = np.zeros_like(diff)
    n_nat, n_man = len(partition.natural), len(partition.manipulated)
    for i in partition.natural:
        if dist[i] > spec.r_minus and dist[i] >= _CENTER_EPS:
            grad[i] = diff[i] / (dist[i] * n_nat)
    for j in partition.manipulated:
        if dist[j] < spec.r_plus and dist[j] >= _CENTER_EPS:
            grad[j] = -diff[j] / (dist[j] * n_man)
    return grad
