# tensor_ops.py
"""
Operações fixas (não treináveis) sobre tensores densos.

Todo tensor do projeto é um ``numpy.ndarray`` em ordem C (row-major: o último
eixo varia mais rápido). Essa é a única linearização usada, inclusive nos
arquivos ISOF gravados por ``tensor_io``. As funções de imagem operam sempre
nos dois últimos eixos (H, W); eixos anteriores (canal, lote) são preservados.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from errors import ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {'float32': np.float32, 'float64': np.float64}


def resolve_dtype(name: str) -> np.dtype:
    """Converte o nome de precisão da configuração em dtype do numpy."""
    try:
        return np.dtype(_DTYPES[name])
    except KeyError:
        raise ValueError(f"Precisão desconhecida '{name}'. Use float32 ou float64.")


@dataclass(frozen=True)
class GaussianKernel:
    size: int
    sigma: float
    weights: np.ndarray

    def offsets(self):
        """Itera (di, dj, peso) com deslocamentos relativos ao centro do kernel."""
        half = self.size // 2
        for i in range(self.size):
            for j in range(self.size):
                yield i - half, j - half, float(self.weights[i, j])


def gaussian_kernel2d(size: int = 5, sigma: float = 1.0) -> GaussianKernel:
    """Amostra uma gaussiana 2D e renormaliza para soma 1."""
    if not isinstance(size, (int, np.integer)) or size < 3 or size % 2 == 0:
        raise ValueError(f"O tamanho do kernel deve ser ímpar e >= 3 (recebido: {size}).")
    if not sigma > 0:
        raise ValueError(f"Sigma deve ser positivo (recebido: {sigma}).")
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    ii, jj = np.meshgrid(ax, ax, indexing='ij')
    weights = np.exp(-(ii ** 2 + jj ** 2) / (2.0 * sigma ** 2))
    weights = weights / weights.sum()
    # Simetria exata sob reflexões e transposição (remove resíduos de arredondamento).
    weights = (weights + weights[::-1, :] + weights[:, ::-1] + weights[::-1, ::-1]) / 4.0
    weights = (weights + weights.T) / 2.0
    weights.setflags(write=False)
    return GaussianKernel(size=int(size), sigma=float(sigma), weights=weights)


def edge_pad(x: np.ndarray, pad: int) -> np.ndarray:
    """Padding replicado (edge-clamp) nos dois últimos eixos."""
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths, mode='edge')


def fold_edge_pad(gp: np.ndarray, pad: int) -> np.ndarray:
    """Adjunto de ``edge_pad``: devolve ao pixel de borda o gradiente das cópias."""
    if pad == 0:
        return gp
    g = gp[..., pad:-pad, :].copy()
    g[..., 0, :] += gp[..., :pad, :].sum(axis=-2)
    g[..., -1, :] += gp[..., -pad:, :].sum(axis=-2)
    out = g[..., pad:-pad].copy()
    out[..., 0] += g[..., :pad].sum(axis=-1)
    out[..., -1] += g[..., -pad:].sum(axis=-1)
    return out


def _check_image(x: np.ndarray, name: str = 'x') -> Tuple[int, int]:
    if x.ndim < 2:
        raise ShapeError(f"'{name}' precisa de pelo menos 2 eixos (H, W); shape={x.shape}.")
    return x.shape[-2], x.shape[-1]


def depthwise_gaussian_blur(x: np.ndarray, kernel: GaussianKernel, allow_small: bool = False) -> np.ndarray:
    """
    Convolui cada canal independentemente com o kernel gaussiano, padding replicado.

    Calculado como x + sum(w * (shift(x) - x)): para entrada constante todas as
    diferenças são exatamente zero, então a saída é bit a bit igual à entrada.
    Com ``allow_small`` imagens menores que o kernel são aceitas (a borda
    replicada cobre o kernel inteiro), como nos níveis finais da pirâmide.
    """
    H, W = _check_image(x)
    if not allow_small and (H < kernel.size or W < kernel.size):
        raise ShapeError(f"Imagem {H}x{W} menor que o kernel {kernel.size}x{kernel.size}.")
    pad = kernel.size // 2
    xp = edge_pad(x, pad)
    acc = np.zeros_like(x)
    for di, dj, w in kernel.offsets():
        acc += w * (xp[..., pad + di:pad + di + H, pad + dj:pad + dj + W] - x)
    return x + acc


def depthwise_gaussian_blur_adjoint(g: np.ndarray, kernel: GaussianKernel) -> np.ndarray:
    """Adjunto (transposta) de ``depthwise_gaussian_blur`` aplicado a ``g``."""
    H, W = _check_image(g, 'g')
    pad = kernel.size // 2
    gp = np.zeros(g.shape[:-2] + (H + 2 * pad, W + 2 * pad), dtype=g.dtype)
    total = 0.0
    for di, dj, w in kernel.offsets():
        gp[..., pad + di:pad + di + H, pad + dj:pad + dj + W] += w * g
        total += w
    return (1.0 - total) * g + fold_edge_pad(gp, pad)


def downsample2(x: np.ndarray, allow_small: bool = False) -> np.ndarray:
    """Decimação por 2 mantendo linhas/colunas de índice par (0, 2, 4, ...). Extensão 1 vira 1 com ``allow_small``."""
    H, W = _check_image(x)
    if not allow_small and (H < 2 or W < 2):
        raise ShapeError(f"Não é possível decimar uma imagem {H}x{W}.")
    return x[..., ::2, ::2].copy()


def downsample2_adjoint(g: np.ndarray, H: int, W: int) -> np.ndarray:
    out = np.zeros(g.shape[:-2] + (H, W), dtype=g.dtype)
    out[..., ::2, ::2] = g
    return out


def _interp_coords(n_out: int, n_in: int):
    """Coordenadas bilineares alinhadas aos cantos: índice baixo, alto e peso."""
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def interpolation_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Matriz n_out x n_in da interpolação linear alinhada aos cantos."""
    lo, hi, t = _interp_coords(n_out, n_in)
    A = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(A, (rows, lo), 1.0 - t)
    np.add.at(A, (rows, hi), t)
    return A


def upsample_to(x: np.ndarray, H: int, W: int) -> np.ndarray:
    """Interpolação bilinear (cantos alinhados) até exatamente H x W."""
    h, w = _check_image(x)
    if H < h or W < w:
        raise ShapeError(f"Destino {H}x{W} menor que a origem {h}x{w}.")
    lo, hi, t = _interp_coords(H, h)
    t = t.astype(x.dtype)[:, None]
    a = x[..., lo, :]
    rows = a + t * (x[..., hi, :] - a)
    lo, hi, u = _interp_coords(W, w)
    b = rows[..., lo]
    # Forma a + t*(b - a): constantes são reproduzidas sem erro de arredondamento.
    return b + u.astype(x.dtype) * (rows[..., hi] - b)


def upsample_to_adjoint(g: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = _check_image(g, 'g')
    A_h = interpolation_matrix(H, h).astype(g.dtype)
    A_w = interpolation_matrix(W, w).astype(g.dtype)
    return A_h.T @ g @ A_w


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Gradiente por diferenças centrais, sempre em 64 bits."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        f_plus = float(f(x))
        x[idx] = orig - eps
        f_minus = float(f(x))
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Erro relativo ||a - n|| / max(||a||, ||n||), zero quando ambos são nulos."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-300:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)
