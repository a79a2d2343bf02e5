# config.py

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from detector_model import ModelConfig
from errors import ConfigError
from isolation_loss import scaled_radii

logger = logging.getLogger(__name__)

# Valores padrão reproduzem a execução de aceitação (200 vídeos 32x32, F=10).
DEFAULT_RUN_CONFIG: Dict[str, Any] = {
    'seed': 0,
    'model': {
        'height': 32,
        'width': 32,
        'channels': 3,
        'rgb_width': 8,
        'log_width': 8,
        'log_out': 8,
        'fusion_width': 16,
        'fusion_groups': 2,
        'backbone_widths': [32, 64, 128],
        'hidden': 32,
        'recurrent_fusion': 'cat',
        'recurrent': True,
        'single_branch': False,
        'log_scales': 3,
        'log_kernel_size': 5,
        'log_sigma': 1.0,
        'dropout': 0.2,
        'precision': 'float32',
    },
    'loss': {
        # None = raios de referência reescalados pela dimensão do embedding
        'r_minus': None,
        'r_plus': None,
    },
    'optimizer': {
        'lr': 1e-3,
        'beta1': 0.9,
        'beta2': 0.999,
        'eps': 1e-8,
        'weight_decay': 1e-6,
        # False: todas as camadas na taxa global (sem ajuste fino por bloco)
        'block_lr_scales': True,
    },
    'scheduler': {
        'patience': 50,
        'factor': 10.0,
        'max_drops': 3,
    },
    'data': {
        'n_natural': 100,
        'n_manipulated': 100,
        'frames': 64,
        'height': 32,
        'width': 32,
        'channels': 3,
        'strength_min': 1.0,
        'strength_max': 1.0,
        'manipulation_types': ['resample2'],
        'splits': {'train': 0.7, 'valid': 0.1, 'test': 0.2},
        'sequence_length': 10,
        'train_stride': 1,
        'eval_stride': 7,
        'rebalance': False,
        'fps': 25.0,
    },
    'train': {
        'epochs': 50,
        'batch_size': 8,
        'workers': 4,
    },
    'paths': {
        'dataset_dir': 'data',
        'out_dir': 'runs/default',
        'log_dir': 'logs',
    },
}

# Variáveis de ambiente -> chave pontuada da configuração
ENV_OVERRIDES: Dict[str, Tuple[str, type]] = {
    'ISOFAKE_LOG_DIR': ('paths.log_dir', str),
    'ISOFAKE_PRECISION': ('model.precision', str),
    'ISOFAKE_WORKERS': ('train.workers', int),
}

MANIPULATION_TYPES = ('resample2', 'resample4')


@dataclass
class LossConfig:
    r_minus: Optional[float] = None
    r_plus: Optional[float] = None

    def __post_init__(self):
        if (self.r_minus is None) != (self.r_plus is None):
            raise ConfigError("loss.r_minus e loss.r_plus devem ser ambos definidos ou ambos nulos.")
        if self.r_minus is not None and not 0.0 < self.r_minus < self.r_plus:
            raise ConfigError(f"Raios inválidos: é preciso 0 < r_minus ({self.r_minus}) < r_plus ({self.r_plus}).")

    def resolve(self, model: ModelConfig) -> Tuple[float, float]:
        if self.r_minus is not None:
            return float(self.r_minus), float(self.r_plus)
        return scaled_radii(model.embedding_dim, recurrent=model.recurrent)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    block_lr_scales: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"optimizer.lr deve ser positivo (recebido {self.lr}).")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("optimizer.beta1/beta2 devem estar em [0, 1).")


@dataclass
class SchedulerConfig:
    patience: int = 50
    factor: float = 10.0
    max_drops: int = 3

    def __post_init__(self):
        if self.patience < 1 or self.factor <= 1.0 or self.max_drops < 0:
            raise ConfigError(f"Agendador inválido: patience={self.patience}, factor={self.factor}, "
                              f"max_drops={self.max_drops}.")


@dataclass
class DataConfig:
    n_natural: int = 100
    n_manipulated: int = 100
    frames: int = 64
    height: int = 32
    width: int = 32
    channels: int = 3
    strength_min: float = 1.0
    strength_max: float = 1.0
    manipulation_types: List[str] = field(default_factory=lambda: ['resample2'])
    splits: Dict[str, float] = field(default_factory=lambda: {'train': 0.7, 'valid': 0.1, 'test': 0.2})
    sequence_length: int = 10
    train_stride: int = 1
    eval_stride: int = 7
    rebalance: bool = False
    fps: float = 25.0

    def __post_init__(self):
        if self.n_natural < 0 or self.n_manipulated < 0 or self.n_natural + self.n_manipulated == 0:
            raise ConfigError(f"Contagens de vídeos inválidas ({self.n_natural}/{self.n_manipulated}).")
        if self.height < 2 or self.width < 2 or self.channels < 1 or self.frames < 1:
            raise ConfigError(f"Extensões sem sentido: T={self.frames}, {self.channels}x{self.height}x{self.width}.")
        if not 0.0 <= self.strength_min <= self.strength_max <= 1.0:
            raise ConfigError(f"Intensidade do artefato deve estar em [0, 1] "
                              f"(recebido {self.strength_min}..{self.strength_max}).")
        if self.n_manipulated and self.strength_min == 0.0:
            raise ConfigError("Vídeos manipulados exigem intensidade > 0 (data.strength_min).")
        unknown = [t for t in self.manipulation_types if t not in MANIPULATION_TYPES]
        if unknown or not self.manipulation_types:
            raise ConfigError(f"data.manipulation_types inválido: {self.manipulation_types}.")
        if any(v < 0 for v in self.splits.values()) or abs(sum(self.splits.values()) - 1.0) > 1e-9:
            raise ConfigError(f"data.splits deve somar 1 (recebido {self.splits}).")
        if self.sequence_length < 1 or self.train_stride < 1 or self.eval_stride < 1:
            raise ConfigError("data.sequence_length e os strides devem ser >= 1.")
        if self.sequence_length > self.frames:
            raise ConfigError(f"data.sequence_length ({self.sequence_length}) maior que T ({self.frames}).")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    workers: int = 4

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError(f"Treino inválido: epochs={self.epochs}, batch_size={self.batch_size}, "
                              f"workers={self.workers}.")


@dataclass
class PathsConfig:
    dataset_dir: str = 'data'
    out_dir: str = 'runs/default'
    log_dir: str = 'logs'


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        m, d = self.model, self.data
        if (m.height, m.width, m.channels) != (d.height, d.width, d.channels):
            raise ConfigError(f"Extensões do modelo {m.channels}x{m.height}x{m.width} diferem das do corpus "
                              f"{d.channels}x{d.height}x{d.width}.")

    @property
    def radii(self) -> Tuple[float, float]:
        return self.loss.resolve(self.model)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['model'] = self.model.to_dict()
        return d


def _merge(base: Dict[str, Any], update: Dict[str, Any], prefix: str = '') -> Dict[str, Any]:
    """Mescla ``update`` sobre ``base`` rejeitando chaves desconhecidas em qualquer nível."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        dotted = f'{prefix}{key}'
        if key not in base:
            raise ConfigError(f"Chave de configuração desconhecida: '{dotted}'.")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{dotted}' deve ser um objeto.")
            merged[key] = _merge(base[key], value, f'{dotted}.')
        else:
            merged[key] = value
    return merged


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any):
    *parents, leaf = dotted.split('.')
    node = tree
    for key in parents:
        node = node[key]
    node[leaf] = value


def _env_overrides() -> Dict[str, Any]:
    tree: Dict[str, Any] = {}
    for env, (dotted, cast) in ENV_OVERRIDES.items():
        raw = os.getenv(env)
        if raw is None or raw == '':
            continue
        try:
            value = cast(raw)
        except ValueError:
            raise ConfigError(f"Variável {env}='{raw}' inválida.")
        node = tree
        *parents, leaf = dotted.split('.')
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
        logger.debug(f"Configuração '{dotted}' sobrescrita por {env}.")
    return tree


def from_dict(tree: Dict[str, Any]) -> RunConfig:
    """Constrói o RunConfig tipado a partir de uma árvore já completa."""
    merged = _merge(DEFAULT_RUN_CONFIG, tree)
    try:
        return RunConfig(
            seed=int(merged['seed']),
            model=ModelConfig(**merged['model']),
            loss=LossConfig(**merged['loss']),
            optimizer=OptimizerConfig(**merged['optimizer']),
            scheduler=SchedulerConfig(**merged['scheduler']),
            data=DataConfig(**merged['data']),
            train=TrainConfig(**merged['train']),
            paths=PathsConfig(**merged['paths']),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Configuração inválida: {e}")


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Padrões <- arquivo JSON <- variáveis de ambiente <- ``overrides``.

    ``overrides`` aceita chaves pontuadas (``{'train.epochs': 0}``), como as
    produzidas pelas flags da linha de comando.
    """
    tree = copy.deepcopy(DEFAULT_RUN_CONFIG)
    if path is not None:
        path = Path(path)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Arquivo de configuração não encontrado: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"JSON inválido em {path}: {e}")
        if not isinstance(user, dict):
            raise ConfigError(f"{path} deve conter um objeto JSON.")
        tree = _merge(tree, user)
        logger.info(f"Configuração carregada de {path}")
    tree = _merge(tree, _env_overrides())
    for dotted, value in (overrides or {}).items():
        node = DEFAULT_RUN_CONFIG
        for key in dotted.split('.'):
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"Chave de configuração desconhecida: '{dotted}'.")
            node = node[key]
        _set_dotted(tree, dotted, value)
    return from_dict(tree)
