# detector_model.py
"""
Detector recorrente de dois ramos (RGB e Deep LoG).

Por quadro: ramo RGB || (primeiro bloco -> Deep LoG) -> concatenação de canais
-> fusão 1x1 em grupos -> blocos do backbone (pool 2x, conv 3x3, ReLU, dropout)
-> pooling médio global. Depois, recorrência bidirecional sobre os F vetores
resulta em um embedding por sequência.

Os DenseBlocks originais são substituídos por pilhas conv 3x3 + ReLU, sem
batch-norm nem camadas de transição; a topologia (dois ramos, fusão, backbone,
GAP, cabeça recorrente) é mantida.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from deep_log import DeepLoG, LoGSpec, pyramid_extents
from errors import ConfigError, ShapeError
from isolation_loss import HypersphereSpec
from nn_layers import (AvgPool2, Bidirectional, Conv2d, Dropout, GlobalAvgPool, Layer, Param, ReLU,
                       Sequential)
from tensor_io import load_checkpoint, save_checkpoint
from tensor_ops import resolve_dtype

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = 'isofake-model'


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    channels: int = 3
    rgb_width: int = 8
    log_width: int = 8
    log_out: int = 8
    fusion_width: int = 16
    fusion_groups: int = 2
    backbone_widths: Tuple[int, ...] = (32, 64, 128)
    hidden: int = 32
    recurrent_fusion: str = 'cat'
    recurrent: bool = True
    single_branch: bool = False
    log_scales: int = 3
    log_kernel_size: int = 5
    log_sigma: float = 1.0
    dropout: float = 0.2
    precision: str = 'float32'

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        if self.recurrent_fusion not in ('cat', 'sum'):
            raise ConfigError(f"model.recurrent_fusion deve ser 'cat' ou 'sum' (recebido '{self.recurrent_fusion}').")
        if self.fusion_groups not in (1, 2):
            raise ConfigError(f"model.fusion_groups deve ser 1 ou 2 (recebido {self.fusion_groups}).")
        if not self.backbone_widths:
            raise ConfigError("model.backbone_widths não pode ser vazio.")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"model.dropout deve estar em [0, 1) (recebido {self.dropout}).")
        try:
            resolve_dtype(self.precision)
        except ValueError as e:
            raise ConfigError(str(e))

    @property
    def fusion_in(self) -> int:
        return self.rgb_width + (0 if self.single_branch else self.log_out)

    @property
    def pooled_dim(self) -> int:
        return self.backbone_widths[-1]

    @property
    def embedding_dim(self) -> int:
        if not self.recurrent:
            return self.pooled_dim
        return 2 * self.hidden if self.recurrent_fusion == 'cat' else self.hidden

    def log_spec(self) -> LoGSpec:
        return LoGSpec.build(S=self.log_scales, K=self.log_width, K_out=self.log_out,
                             kernel_size=self.log_kernel_size, sigma=self.log_sigma)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['backbone_widths'] = list(self.backbone_widths)
        return d


@dataclass
class FaceSequence:
    frames: np.ndarray
    video_id: str
    label: int
    start_index: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ShapeError(f"FaceSequence '{self.video_id}' precisa de frames (F>=1, C, H, W); shape={self.frames.shape}.")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


class IsolationNet:
    """Rede Phi: lote de sequências (B, F, C, H, W) -> embeddings (B, E)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.dtype = resolve_dtype(config.precision)
        _check_channel_arithmetic(config)
        rng = np.random.default_rng(seed)
        dt = self.dtype
        c = config

        self.rgb = Sequential('rgb', [Conv2d('rgb.conv', c.channels, c.rgb_width, 3, rng=rng, dtype=dt),
                                      ReLU('rgb.relu')])
        self.log_branch: Optional[Sequential] = None
        if not c.single_branch:
            self.log_branch = Sequential('log', [Conv2d('log.conv', c.channels, c.log_width, 3, rng=rng, dtype=dt),
                                                 ReLU('log.relu'),
                                                 DeepLoG('log.deep_log', c.log_spec(), rng=rng, dtype=dt)])
        self.fusion = Sequential('fusion', [Conv2d('fusion.conv', c.fusion_in, c.fusion_width, 1,
                                                   groups=c.fusion_groups, rng=rng, dtype=dt),
                                            ReLU('fusion.relu')])
        self.blocks: List[Sequential] = []
        prev = c.fusion_width
        for depth, width in enumerate(c.backbone_widths, start=1):
            name = f'block{depth}'
            self.blocks.append(Sequential(name, [AvgPool2(f'{name}.pool'),
                                                 Conv2d(f'{name}.conv', prev, width, 3, rng=rng, dtype=dt),
                                                 ReLU(f'{name}.relu'),
                                                 Dropout(f'{name}.dropout', c.dropout, seed=int(rng.integers(2 ** 31)))]))
            prev = width
        self.gap = GlobalAvgPool('gap')
        self.head: Optional[Bidirectional] = None
        if c.recurrent:
            self.head = Bidirectional('head', c.pooled_dim, c.hidden, c.recurrent_fusion, rng=rng, dtype=dt)
        self._tape: Optional[Dict[str, Any]] = None

    # --- parâmetros ---
    def components(self) -> List[Tuple[str, Layer]]:
        parts: List[Tuple[str, Layer]] = [('rgb', self.rgb)]
        if self.log_branch is not None:
            parts.append(('log', self.log_branch))
        parts.append(('fusion', self.fusion))
        parts.extend((blk.name, blk) for blk in self.blocks)
        if self.head is not None:
            parts.append(('head', self.head))
        return parts

    def params(self) -> List[Param]:
        return [p for _, comp in self.components() for p in comp.params()]

    def named_params(self) -> Dict[str, Param]:
        return {p.name: p for p in self.params()}

    def parameter_census(self) -> Dict[str, int]:
        census = {name: int(sum(p.value.size for p in comp.params())) for name, comp in self.components()}
        census['total'] = int(sum(census.values()))
        return census

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for p in self.params():
            p.astype(self.dtype)
        return self

    def reseed_dropout(self, seed: int):
        rng = np.random.default_rng(seed)
        for blk in self.blocks:
            blk.layers[-1].reseed(int(rng.integers(2 ** 31)))

    # --- forward / backward ---
    def forward(self, frames: np.ndarray, training: bool = False) -> np.ndarray:
        c = self.config
        if frames.ndim != 5 or frames.shape[2:] != (c.channels, c.height, c.width):
            raise ShapeError(f"Entrada esperada (B, F, {c.channels}, {c.height}, {c.width}); recebida {frames.shape}.")
        B, F = frames.shape[:2]
        x = frames.reshape(B * F, c.channels, c.height, c.width).astype(self.dtype, copy=False)
        z = self.rgb.forward(x, training)
        if self.log_branch is not None:
            z = np.concatenate([z, self.log_branch.forward(x, training)], axis=1)
        z = self.fusion.forward(z, training)
        for blk in self.blocks:
            z = blk.forward(z, training)
        pooled = self.gap.forward(z, training).reshape(B, F, -1)
        self._tape = {'B': B, 'F': F}
        if self.head is not None:
            return self.head.forward(pooled.transpose(1, 0, 2), training)
        return pooled.mean(axis=1)

    def backward(self, d_emb: np.ndarray) -> np.ndarray:
        """Propaga dL/d(embedding), acumula gradientes e devolve dL/d(frames)."""
        if self._tape is None:
            raise RuntimeError("backward chamado sem forward correspondente.")
        B, F = self._tape['B'], self._tape['F']
        self._tape = None
        c = self.config
        d_emb = d_emb.astype(self.dtype, copy=False)
        if self.head is not None:
            d_pooled = self.head.backward(d_emb).transpose(1, 0, 2)
        else:
            d_pooled = np.broadcast_to(d_emb[:, None, :] / F, (B, F, d_emb.shape[1]))
        dz = self.gap.backward(np.ascontiguousarray(d_pooled).reshape(B * F, -1))
        for blk in reversed(self.blocks):
            dz = blk.backward(dz)
        dz = self.fusion.backward(dz)
        dx = self.rgb.backward(dz[:, :c.rgb_width])
        if self.log_branch is not None:
            dx = dx + self.log_branch.backward(dz[:, c.rgb_width:])
        return dx.reshape(B, F, c.channels, c.height, c.width)

    def embed(self, frames: np.ndarray) -> np.ndarray:
        """Forward em modo avaliação (determinístico, sem dropout)."""
        emb = self.forward(frames, training=False)
        self._tape = None
        return emb


def _check_channel_arithmetic(config: ModelConfig):
    g = config.fusion_groups
    if config.fusion_in % g or config.fusion_width % g:
        raise ShapeError(f"Fusão com {config.fusion_in}->{config.fusion_width} canais não é divisível por g={g}.")
    reduction = 2 ** len(config.backbone_widths)
    if config.height % reduction or config.width % reduction:
        raise ShapeError(f"Entrada {config.height}x{config.width} não é divisível por {reduction} "
                         f"({len(config.backbone_widths)} blocos com pool 2x).")
    if not config.single_branch:
        pyramid_extents(config.height, config.width, config.log_spec())


def build(config: ModelConfig, seed: int = 0) -> IsolationNet:
    """Constrói o modelo com inicialização determinística e registra o censo de parâmetros."""
    model = IsolationNet(config, seed)
    census = model.parameter_census()
    logger.info(f"Modelo construído (seed={seed}, embedding={config.embedding_dim}): {census}")
    return model


def forward_sequence(model: IsolationNet, seq: FaceSequence, training: bool = False) -> np.ndarray:
    """Embedding de uma única sequência."""
    c = model.config
    if seq.frames.shape[1:] != (c.channels, c.height, c.width):
        raise ShapeError(f"Quadros de '{seq.video_id}' com shape {seq.frames.shape[1:]} != "
                         f"{(c.channels, c.height, c.width)} do modelo.")
    return model.forward(seq.frames[None], training)[0]


def assign_lr_scales(model: IsolationNet, global_lr: Optional[float] = None) -> Dict[str, float]:
    """
    Escala de taxa por parâmetro: bloco L do backbone recebe 1/2^L; ramos,
    camada de fusão e cabeça recorrente usam a taxa global.
    """
    scales: Dict[str, float] = {}
    for name, comp in model.components():
        if name.startswith('block'):
            scale = 1.0 / 2 ** int(name[len('block'):])
        else:
            scale = 1.0
        for p in comp.params():
            p.lr_scale = scale
            scales[p.name] = scale
    if global_lr is not None:
        logger.debug(f"Taxas efetivas: { {n: global_lr * s for n, s in scales.items()} }")
    return scales


def save_model_checkpoint(path: Union[str, Path], model: IsolationNet, hyper: Optional[HypersphereSpec],
                          optimizer=None, extra: Optional[Dict[str, Any]] = None) -> None:
    params = model.params()
    manifest: Dict[str, Any] = {
        'kind': CHECKPOINT_KIND,
        'model_config': model.config.to_dict(),
        'seed': model.seed,
        'layers': [{'name': p.name, 'shape': list(p.value.shape), 'lr_scale': p.lr_scale} for p in params],
        'radii': None if hyper is None else {'r_minus': hyper.r_minus, 'r_plus': hyper.r_plus},
        'adam_step': None if optimizer is None else optimizer.t,
        'extra': extra or {},
    }
    tensors = {p.name: p.value for p in params}
    if hyper is not None:
        tensors['loss.center'] = hyper.center
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    save_checkpoint(path, manifest, tensors)


def load_model_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None):
    """Carrega (modelo, HypersphereSpec|None, manifesto, tensores) validando shapes contra a configuração."""
    manifest, tensors = load_checkpoint(path)
    if manifest.get('kind') != CHECKPOINT_KIND:
        raise ShapeError(f"{path} não é um checkpoint de modelo.")
    config = ModelConfig(**manifest['model_config'])
    if expected is not None:
        for key in ('height', 'width', 'channels'):
            if getattr(expected, key) != getattr(config, key):
                raise ShapeError(f"Checkpoint com {key}={getattr(config, key)} incompatível com a configuração "
                                 f"({getattr(expected, key)}).")
    model = IsolationNet(config, manifest['seed'])
    for layer in manifest['layers']:
        p = model.named_params().get(layer['name'])
        if p is None or list(p.value.shape) != layer['shape']:
            raise ShapeError(f"Parâmetro '{layer['name']}' ausente ou com shape divergente no modelo.")
        p.value = tensors[layer['name']].astype(model.dtype)
        p.grad = np.zeros_like(p.value)
        p.lr_scale = layer['lr_scale']
    hyper = None
    if manifest.get('radii') is not None:
        center = tensors['loss.center']
        if center.shape[0] != config.embedding_dim:
            raise ShapeError(f"Centro de dimensão {center.shape[0]} != embedding {config.embedding_dim}.")
        hyper = HypersphereSpec(center, manifest['radii']['r_minus'], manifest['radii']['r_plus'])
    return model, hyper, manifest, tensors
