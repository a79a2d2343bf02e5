# grad_check.py
"""
Verificação dos gradientes analíticos contra diferenças finitas centrais.

Cada verificação é registrada com ``@register_check`` e recebe um gerador
semeado; devolve pares (alvo, analítico, numérico). Tudo roda em 64 bits,
independentemente da precisão de treino.
"""

import logging
from contextlib import ExitStack, contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple
from unittest import mock

import numpy as np

from deep_log import DeepLoG, LoGSpec
from detector_model import IsolationNet, ModelConfig
from isolation_loss import BatchPartition, HypersphereSpec, isolation_loss, isolation_loss_grad
from nn_layers import AvgPool2, Bidirectional, Conv2d, Dropout, GlobalAvgPool, Layer, LSTMCell, ReLU
from tensor_ops import finite_diff_grad, relative_error

logger = logging.getLogger(__name__)

GRAD_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4
KINK_MARGIN = 1e-4
MAX_DRAWS = 50
BIAS_JITTER = 0.3
DEFAULT_SEEDS = tuple(range(20))
# Abaixo desta norma o erro é medido em termos absolutos
ABS_FLOOR = 1e-7

CHECKS: Dict[str, Callable] = {}
CHECK_METADATA: Dict[str, Dict[str, object]] = {}

# Alvos do gancho de mutação: nome -> classes cujo backward é corrompido
MUTATION_TARGETS = {
    'conv': (Conv2d,),
    'relu': (ReLU,),
    'pool': (AvgPool2,),
    'gap': (GlobalAvgPool,),
    'lstm': (LSTMCell,),
    'deep_log': (DeepLoG,),
}

Triple = Tuple[str, np.ndarray, np.ndarray]


def register_check(name: str, description: str = '', heavy: bool = False):
    """Decorador para registrar uma verificação de gradiente. ``heavy`` roda só na primeira semente."""
    CHECK_METADATA[name] = {'description': description, 'heavy': heavy}

    def decorator(func):
        CHECKS[name] = func
        return func
    return decorator


@dataclass
class CheckResult:
    check: str
    seed: int
    target: str
    rel_error: float
    passed: bool


@contextmanager
def mutated(target: Optional[str], factor: float = 1.5):
    """Corrompe o backward de uma família de camadas enquanto o contexto está ativo."""
    if target is None:
        yield
        return
    if target not in MUTATION_TARGETS:
        raise ValueError(f"Alvo de mutação desconhecido '{target}'. Opções: {sorted(MUTATION_TARGETS)}")
    with ExitStack() as stack:
        for cls in MUTATION_TARGETS[target]:
            original = cls.backward

            def corrupted(self, dy, _original=original):
                return _original(self, dy) * factor
            stack.enter_context(mock.patch.object(cls, 'backward', corrupted))
        logger.warning(f"Backward de '{target}' corrompido por um fator {factor} (teste de sentinela).")
        yield


def _layer_triples(layer: Layer, x: np.ndarray, rng: np.random.Generator, training: bool = False,
                   before_forward: Callable[[], None] = lambda: None) -> List[Triple]:
    """Compara dL/dx e dL/dparam para L = sum(R * layer(x)) com R aleatório fixo."""
    before_forward()
    y = layer.forward(x, training)
    proj = rng.standard_normal(y.shape)
    for p in layer.params():
        p.zero_grad()
    dx = layer.backward(proj)

    def loss_x(z):
        before_forward()
        return float(np.sum(proj * layer.forward(z, training)))

    triples = [('input', dx, finite_diff_grad(loss_x, x, GRAD_EPS))]
    for p in layer.params():
        original = p.value

        def loss_p(v, p=p):
            p.value = v
            before_forward()
            out = float(np.sum(proj * layer.forward(x, training)))
            return out
        numeric = finite_diff_grad(loss_p, original, GRAD_EPS)
        p.value = original
        triples.append((p.name, p.grad.copy(), numeric))
    layer._tape = None
    return triples


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x + np.where(x >= 0, margin, -margin)


@register_check('conv3x3', 'convolução 3x3 com padding replicado')
def check_conv3x3(rng):
    layer = Conv2d('conv', 3, 4, 3, rng=rng)
    return _layer_triples(layer, rng.standard_normal((2, 3, 5, 6)), rng)


@register_check('grouped1x1', 'convolução pontual em 2 grupos (fusão)')
def check_grouped1x1(rng):
    layer = Conv2d('fusion', 4, 6, 1, groups=2, rng=rng)
    layer.bias.value = rng.standard_normal(6)
    return _layer_triples(layer, rng.standard_normal((2, 4, 3, 3)), rng)


@register_check('relu', 'ReLU longe da dobra')
def check_relu(rng):
    return _layer_triples(ReLU('relu'), _away_from_zero(rng, (2, 3, 4, 4)), rng)


@register_check('avgpool', 'pooling médio 2x2')
def check_avgpool(rng):
    return _layer_triples(AvgPool2('pool'), rng.standard_normal((2, 3, 4, 6)), rng)


@register_check('gap', 'pooling médio global')
def check_gap(rng):
    return _layer_triples(GlobalAvgPool('gap'), rng.standard_normal((2, 3, 4, 5)), rng)


@register_check('dropout', 'dropout em avaliação e em treino com máscara fixa')
def check_dropout(rng):
    layer = Dropout('drop', 0.2, seed=int(rng.integers(2 ** 31)))
    x = rng.standard_normal((2, 3, 4, 4))
    triples = _layer_triples(layer, x, rng, training=False)
    seed = int(rng.integers(2 ** 31))
    triples += [(f'train.{t}', a, n) for t, a, n in
                _layer_triples(layer, x, rng, training=True, before_forward=lambda: layer.reseed(seed))]
    return triples


@register_check('lstm_cell', 'célula LSTM com BPTT')
def check_lstm_cell(rng):
    layer = LSTMCell('lstm', 4, 3, rng=rng)
    layer.bias.value = layer.bias.value + 0.1 * rng.standard_normal(layer.bias.value.shape)
    return _layer_triples(layer, rng.standard_normal((3, 2, 4)), rng)


@register_check('bidirectional', 'cabeça bidirecional (cat e sum)')
def check_bidirectional(rng):
    triples = []
    for fusion in ('cat', 'sum'):
        layer = Bidirectional(f'bi_{fusion}', 4, 3, fusion, rng=rng)
        triples += _layer_triples(layer, rng.standard_normal((3, 2, 4)), rng)
    return triples


@register_check('deep_log', 'passa-banda multiescala + redução 1x1')
def check_deep_log(rng):
    spec = LoGSpec.build(S=2, K=2, K_out=3, kernel_size=3, sigma=1.0)
    layer = DeepLoG('deep_log', spec, rng=rng)
    return _layer_triples(layer, rng.standard_normal((2, 2, 8, 8)), rng)


@register_check('isolation_loss', 'perda de isolamento em relação aos embeddings')
def check_isolation_loss(rng):
    emb = rng.standard_normal((6, 4))
    labels = [0, 1, 0, 1, 0, 1]
    part = BatchPartition.from_labels(labels)
    center = rng.standard_normal(4) * 0.1
    dist = np.linalg.norm(emb - center, axis=1)
    hyper = HypersphereSpec(center, 0.5 * dist.min(), 2.0 * dist.max())
    analytic = isolation_loss_grad(emb, part, hyper)
    numeric = finite_diff_grad(lambda e: isolation_loss(e, part, hyper), emb, GRAD_EPS)
    return [('embeddings', analytic, numeric)]


def tiny_model_config(**overrides) -> ModelConfig:
    """Configuração mínima (8x8, S=2, kernel 3) usada nas verificações de ponta a ponta."""
    base = dict(height=8, width=8, channels=3, rgb_width=2, log_width=2, log_out=2, fusion_width=4,
                fusion_groups=2, backbone_widths=(4, 4), hidden=3, log_scales=2, log_kernel_size=3,
                dropout=0.2, precision='float64')
    base.update(overrides)
    return ModelConfig(**base)


def _min_relu_margin(model: IsolationNet, frames: np.ndarray) -> float:
    """Menor |entrada| de qualquer ReLU do modelo para estes quadros."""
    margins = []
    original = ReLU.forward

    def recording(self, x, training=False):
        margins.append(float(np.abs(x).min()))
        return original(self, x, training)
    with mock.patch.object(ReLU, 'forward', recording):
        model.embed(frames)
    return min(margins)


def _end_to_end(rng, config: ModelConfig) -> List[Triple]:
    model = IsolationNet(config, seed=int(rng.integers(2 ** 31)))
    # Bias zero deixa vizinhanças inteiras exatamente sobre a dobra da ReLU.
    for p in model.params():
        if p.name.endswith('bias'):
            p.value = p.value + BIAS_JITTER * rng.standard_normal(p.value.shape)
    shape = (2, 3, config.channels, config.height, config.width)
    # Sorteia quadros até todas as ReLUs ficarem longe da dobra.
    for _ in range(MAX_DRAWS):
        frames = rng.uniform(0.0, 1.0, shape)
        if _min_relu_margin(model, frames) >= KINK_MARGIN:
            break
    else:
        logger.warning(f"Nenhum sorteio com margem >= {KINK_MARGIN} nas ReLUs; seguindo com o último.")
    part = BatchPartition.from_labels([0, 1])
    emb = model.forward(frames)
    center = emb.mean(axis=0) + 0.01 * rng.standard_normal(emb.shape[1])
    dist = np.linalg.norm(emb - center, axis=1)
    hyper = HypersphereSpec(center, 0.5 * dist.min(), 2.0 * dist.max() + 1.0)

    model.zero_grad()
    dx = model.backward(isolation_loss_grad(emb, part, hyper))

    def loss_of_frames(z):
        return isolation_loss(model.embed(z), part, hyper)

    triples = [('frames', dx, finite_diff_grad(loss_of_frames, frames, GRAD_EPS))]
    for p in model.params():
        original = p.value

        def loss_p(v, p=p):
            p.value = v
            return isolation_loss(model.embed(frames), part, hyper)
        numeric = finite_diff_grad(loss_p, original, GRAD_EPS)
        p.value = original
        triples.append((p.name, p.grad.copy(), numeric))
    return triples


@register_check('end_to_end', 'Phi + perda, dois ramos, fusão cat, F=3', heavy=True)
def check_end_to_end(rng):
    return _end_to_end(rng, tiny_model_config())


@register_check('end_to_end_sum', 'Phi + perda, fusão recorrente sum', heavy=True)
def check_end_to_end_sum(rng):
    return _end_to_end(rng, tiny_model_config(recurrent_fusion='sum'))


@register_check('end_to_end_backbone', 'Phi sem recorrência (média temporal)', heavy=True)
def check_end_to_end_backbone(rng):
    return _end_to_end(rng, tiny_model_config(recurrent=False))


def check_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < ABS_FLOOR:
        return float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)))
    return relative_error(analytic, numeric)


def run_checks(seeds: Iterable[int] = DEFAULT_SEEDS, tolerance: float = DEFAULT_TOLERANCE,
               only: Optional[Sequence[str]] = None, mutate: Optional[str] = None,
               full: bool = False) -> List[CheckResult]:
    """Roda as verificações registradas; as pesadas usam só a primeira semente, salvo ``full``."""
    seeds = list(seeds)
    names = list(only) if only else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"Verificações desconhecidas: {unknown}. Disponíveis: {sorted(CHECKS)}")
    results = []
    with mutated(mutate):
        for name in names:
            run_seeds = seeds[:1] if CHECK_METADATA[name]['heavy'] and not full else seeds
            for seed in run_seeds:
                rng = np.random.default_rng(seed)
                for target, analytic, numeric in CHECKS[name](rng):
                    err = check_error(analytic, numeric)
                    results.append(CheckResult(name, seed, target, err, err <= tolerance))
                    if err > tolerance:
                        logger.error(f"Falha em {name}[{target}] seed={seed}: erro relativo {err:.3e}")
    return results


def summarize(results: Sequence[CheckResult]) -> List[Dict[str, object]]:
    """Tabela por verificação: pior erro relativo e aprovação."""
    table: Dict[str, Dict[str, object]] = {}
    for r in results:
        row = table.setdefault(r.check, {'check': r.check, 'max_rel_error': 0.0, 'passed': True, 'evaluations': 0})
        row['max_rel_error'] = max(row['max_rel_error'], r.rel_error)
        row['passed'] = row['passed'] and r.passed
        row['evaluations'] += 1
    return list(table.values())
