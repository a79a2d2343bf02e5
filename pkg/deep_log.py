# deep_log.py
"""
Gargalo Deep LoG: passa-banda multiescala fixo seguido de redução 1x1 treinável.

    band_s = x - up(down^s(blur^s(x)))      s = 1..S
    x'     = w_1x1([band_1, ..., band_S])   K -> S*K -> K'

O kernel gaussiano nunca recebe gradiente nem entra no otimizador.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from errors import ShapeError
from nn_layers import Conv2d, Layer, Param
from tensor_ops import (GaussianKernel, depthwise_gaussian_blur, depthwise_gaussian_blur_adjoint, downsample2,
                        downsample2_adjoint, gaussian_kernel2d, upsample_to, upsample_to_adjoint)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoGSpec:
    S: int
    kernel: GaussianKernel
    K: int
    K_out: int

    def __post_init__(self):
        if self.S < 1:
            raise ValueError(f"O número de escalas S deve ser >= 1 (recebido {self.S}).")
        if self.K < 1 or self.K_out < 1:
            raise ValueError(f"Canais inválidos K={self.K}, K'={self.K_out}.")

    @classmethod
    def build(cls, S: int = 3, K: int = 8, K_out: int = 8, kernel_size: int = 5, sigma: float = 1.0) -> 'LoGSpec':
        return cls(S=S, kernel=gaussian_kernel2d(kernel_size, sigma), K=K, K_out=K_out)


def pyramid_extents(H: int, W: int, spec: LoGSpec) -> List[Tuple[int, int]]:
    """
    Extensões de cada nível da cadeia blur->decimação.

    Exige H, W >= 2^(S-1). Níveis menores que o kernel passam pelo padding
    replicado; um nível 1x1 decimado continua 1x1.
    """
    need = 2 ** (spec.S - 1)
    if H < need or W < need:
        raise ShapeError(f"Extensão espacial {H}x{W} pequena demais para S={spec.S} escalas (mínimo {need}x{need}).")
    extents = [(H, W)]
    for _ in range(spec.S):
        h, w = extents[-1]
        extents.append(((h + 1) // 2, (w + 1) // 2))
    return extents


def bandpass(x: np.ndarray, spec: LoGSpec) -> np.ndarray:
    """(..., K, H, W) -> (..., S*K, H, W), bandas concatenadas no eixo de canais."""
    if x.ndim < 3:
        raise ShapeError(f"bandpass espera (..., K, H, W); recebeu {x.shape}.")
    H, W = x.shape[-2:]
    pyramid_extents(H, W, spec)
    bands = []
    level = x
    for _ in range(spec.S):
        level = downsample2(depthwise_gaussian_blur(level, spec.kernel, allow_small=True), allow_small=True)
        bands.append(x - upsample_to(level, H, W))
    return np.concatenate(bands, axis=-3)


def bandpass_adjoint(g: np.ndarray, spec: LoGSpec) -> np.ndarray:
    """Transposta de ``bandpass``: (..., S*K, H, W) -> (..., K, H, W)."""
    H, W = g.shape[-2:]
    extents = pyramid_extents(H, W, spec)
    K = g.shape[-3] // spec.S
    grads = [g[..., s * K:(s + 1) * K, :, :] for s in range(spec.S)]
    dx = sum(grads)
    acc = None
    for s in range(spec.S, 0, -1):
        contrib = upsample_to_adjoint(-grads[s - 1], *extents[s])
        acc = contrib if acc is None else acc + contrib
        acc = depthwise_gaussian_blur_adjoint(downsample2_adjoint(acc, *extents[s - 1]), spec.kernel)
    return dx + acc


class DeepLoG(Layer):
    def __init__(self, name: str, spec: LoGSpec, rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__(name)
        self.spec = spec
        self.reduction = Conv2d(f'{name}.reduce', spec.S * spec.K, spec.K_out, ksize=1, rng=rng, dtype=dtype)

    def params(self) -> List[Param]:
        return self.reduction.params()

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.spec.K:
            raise ShapeError(f"'{self.name}' espera (N, {self.spec.K}, H, W); recebeu {x.shape}.")
        self._tape = {}
        return self.reduction.forward(bandpass(x, self.spec), training)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._pop_tape()
        return bandpass_adjoint(self.reduction.backward(dy), self.spec)


def deep_log_forward(x: np.ndarray, layer: DeepLoG, training: bool = False) -> np.ndarray:
    """Aplica o Deep LoG a uma imagem (K, H, W) ou a um lote (N, K, H, W)."""
    if x.ndim == 3:
        return layer.forward(x[None], training)[0]
    return layer.forward(x, training)
