# nn_layers.py
"""
Camadas treináveis com gradientes analíticos exatos.

Convenções:
  - lotes de imagens são (N, C, H, W); sequências são (T, B, features);
  - ``forward`` grava na fita (tape) o que o ``backward`` precisa; ``backward``
    acumula em ``Param.grad`` e devolve o gradiente da entrada;
  - ``backward`` sem ``forward`` correspondente é erro.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ShapeError
from tensor_ops import edge_pad, fold_edge_pad

logger = logging.getLogger(__name__)


@dataclass
class Param:
    name: str
    value: np.ndarray
    lr_scale: float = 1.0
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"Gradiente de '{self.name}' com shape {self.grad.shape} != {self.value.shape}.")

    def zero_grad(self):
        self.grad[...] = 0.0

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)


class Layer:
    """Base das camadas: nome, fita de forward e lista de parâmetros."""

    def __init__(self, name: str):
        self.name = name
        self._tape: Optional[Dict[str, Any]] = None

    def params(self) -> List[Param]:
        return []

    def _pop_tape(self) -> Dict[str, Any]:
        if self._tape is None:
            raise RuntimeError(f"backward chamado em '{self.name}' sem forward correspondente.")
        tape, self._tape = self._tape, None
        return tape

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Convolução 2D, stride 1, padding replicado, com grupos."""

    def __init__(self, name: str, in_ch: int, out_ch: int, ksize: int = 3, groups: int = 1,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__(name)
        if groups < 1 or in_ch % groups or out_ch % groups:
            raise ShapeError(f"'{name}': canais {in_ch}->{out_ch} não são divisíveis por groups={groups}.")
        if ksize < 1 or ksize % 2 == 0:
            raise ShapeError(f"'{name}': ksize deve ser ímpar (recebido {ksize}).")
        self.in_ch, self.out_ch, self.ksize, self.groups = in_ch, out_ch, ksize, groups
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (in_ch // groups) * ksize * ksize
        w = rng.standard_normal((out_ch, in_ch // groups, ksize, ksize)) * np.sqrt(2.0 / fan_in)
        self.weight = Param(f'{name}.weight', w.astype(dtype))
        self.bias = Param(f'{name}.bias', np.zeros(out_ch, dtype=dtype))

    def params(self) -> List[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"'{self.name}' espera (N, {self.in_ch}, H, W); recebeu {x.shape}.")
        N, _, H, W = x.shape
        k, pad = self.ksize, self.ksize // 2
        cin, cout = self.in_ch // self.groups, self.out_ch // self.groups
        windows = sliding_window_view(edge_pad(x, pad), (k, k), axis=(-2, -1))
        y = np.empty((N, self.out_ch, H, W), dtype=x.dtype)
        cols_per_group = []
        for g in range(self.groups):
            cols = windows[:, g * cin:(g + 1) * cin].transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, cin * k * k)
            w_mat = self.weight.value[g * cout:(g + 1) * cout].reshape(cout, -1)
            out = cols @ w_mat.T + self.bias.value[g * cout:(g + 1) * cout]
            y[:, g * cout:(g + 1) * cout] = out.reshape(N, H, W, cout).transpose(0, 3, 1, 2)
            cols_per_group.append(cols)
        self._tape = {'cols': cols_per_group, 'shape': x.shape}
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        tape = self._pop_tape()
        N, _, H, W = tape['shape']
        k, pad = self.ksize, self.ksize // 2
        cin, cout = self.in_ch // self.groups, self.out_ch // self.groups
        dx = np.empty(tape['shape'], dtype=dy.dtype)
        for g in range(self.groups):
            dy_g = dy[:, g * cout:(g + 1) * cout].transpose(0, 2, 3, 1).reshape(-1, cout)
            w_mat = self.weight.value[g * cout:(g + 1) * cout].reshape(cout, -1)
            self.weight.grad[g * cout:(g + 1) * cout] += (dy_g.T @ tape['cols'][g]).reshape(cout, cin, k, k)
            self.bias.grad[g * cout:(g + 1) * cout] += dy_g.sum(axis=0)
            dcols = (dy_g @ w_mat).reshape(N, H, W, cin, k, k)
            dxp = np.zeros((N, cin, H + 2 * pad, W + 2 * pad), dtype=dy.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + H, j:j + W] += dcols[..., i, j].transpose(0, 3, 1, 2)
            dx[:, g * cin:(g + 1) * cin] = fold_edge_pad(dxp, pad)
        return dx


class ReLU(Layer):
    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        mask = x > 0
        self._tape = {'mask': mask}
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._pop_tape()['mask'], dy, 0.0).astype(dy.dtype, copy=False)


class AvgPool2(Layer):
    """Média em blocos 2x2 sem sobreposição (reduz H e W pela metade)."""

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        N, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ShapeError(f"'{self.name}': extensão {H}x{W} precisa ser par.")
        self._tape = {'shape': x.shape}
        return x.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        shape = self._pop_tape()['shape']
        return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3).reshape(shape) * 0.25


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C), média por canal."""

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"'{self.name}' espera (N, C, H, W); recebeu {x.shape}.")
        self._tape = {'shape': x.shape}
        return x.mean(axis=(2, 3))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        N, C, H, W = self._pop_tape()['shape']
        return np.broadcast_to(dy[:, :, None, None] / (H * W), (N, C, H, W)).copy()


class Dropout(Layer):
    """Dropout invertido: em treino zera com prob. p e escala por 1/(1-p); em avaliação é identidade."""

    def __init__(self, name: str, p: float = 0.2, seed: int = 0):
        super().__init__(name)
        if not 0.0 <= p < 1.0:
            raise ValueError(f"'{name}': probabilidade de dropout deve estar em [0, 1) (recebido {p}).")
        self.p = p
        self.reseed(seed)

    def reseed(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if not training or self.p == 0.0:
            self._tape = {'mask': None}
            return x
        mask = (self._rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        self._tape = {'mask': mask}
        return x * mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        mask = self._pop_tape()['mask']
        return dy if mask is None else dy * mask


class Sequential(Layer):
    """Encadeia camadas; o backward percorre a lista ao contrário."""

    def __init__(self, name: str, layers: Sequence[Layer]):
        super().__init__(name)
        self.layers = list(layers)

    def params(self) -> List[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LSTMCell(Layer):
    """
    Célula LSTM padrão de 4 portões (ordem i, f, g, o) sobre [x_t, h_{t-1}].

    Pesos uniformes em +-1/sqrt(hidden); bias do portão de esquecimento inicia em 1.
    """

    def __init__(self, name: str, input_dim: int, hidden_dim: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__(name)
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(hidden_dim)
        w = rng.uniform(-bound, bound, (4 * hidden_dim, input_dim + hidden_dim))
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim:2 * hidden_dim] = 1.0
        self.weight = Param(f'{name}.weight', w.astype(dtype))
        self.bias = Param(f'{name}.bias', b.astype(dtype))

    def params(self) -> List[Param]:
        return [self.weight, self.bias]

    def zero_state(self, batch: int, dtype) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros((batch, self.hidden_dim), dtype=dtype), np.zeros((batch, self.hidden_dim), dtype=dtype)

    def step(self, x_t: np.ndarray, state: Tuple[np.ndarray, np.ndarray]):
        """Um passo da recorrência. Retorna o novo estado (h, c) e o cache do passo."""
        h_prev, c_prev = state
        D = self.hidden_dim
        xh = np.concatenate([x_t, h_prev], axis=1)
        z = xh @ self.weight.value.T + self.bias.value
        i, f = _sigmoid(z[:, :D]), _sigmoid(z[:, D:2 * D])
        g, o = np.tanh(z[:, 2 * D:3 * D]), _sigmoid(z[:, 3 * D:])
        c = f * c_prev + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        return (h, c), (xh, i, f, g, o, c_prev, tanh_c)

    def forward(self, xs: np.ndarray, training: bool = False) -> np.ndarray:
        """Percorre xs (T, B, input_dim) a partir do estado zero e devolve o h final (B, hidden)."""
        if xs.ndim != 3 or xs.shape[0] == 0:
            raise ShapeError(f"'{self.name}': sequência vazia ou mal formada {xs.shape}.")
        if xs.shape[2] != self.input_dim:
            raise ShapeError(f"'{self.name}' espera features={self.input_dim}; recebeu {xs.shape[2]}.")
        state = self.zero_state(xs.shape[1], xs.dtype)
        caches = []
        for x_t in xs:
            state, cache = self.step(x_t, state)
            caches.append(cache)
        self._tape = {'caches': caches}
        return state[0]

    sequence = forward

    def backward(self, dh: np.ndarray) -> np.ndarray:
        caches = self._pop_tape()['caches']
        D, I = self.hidden_dim, self.input_dim
        w = self.weight.value
        dc = np.zeros_like(dh)
        dxs = np.empty((len(caches), dh.shape[0], I), dtype=dh.dtype)
        for t in range(len(caches) - 1, -1, -1):
            xh, i, f, g, o, c_prev, tanh_c = caches[t]
            dct = dc + dh * o * (1.0 - tanh_c ** 2)
            dz = np.concatenate([
                dct * g * i * (1.0 - i),
                dct * c_prev * f * (1.0 - f),
                dct * i * (1.0 - g ** 2),
                dh * tanh_c * o * (1.0 - o),
            ], axis=1)
            self.weight.grad += dz.T @ xh
            self.bias.grad += dz.sum(axis=0)
            dxh = dz @ w
            dxs[t] = dxh[:, :I]
            dh = dxh[:, I:]
            dc = dct * f
        return dxs


class Bidirectional(Layer):
    """Duas células independentes: uma sobre xs, outra sobre xs invertido; fusão cat ou sum."""

    def __init__(self, name: str, input_dim: int, hidden_dim: int, fusion: str = 'cat',
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        super().__init__(name)
        if fusion not in ('cat', 'sum'):
            raise ValueError(f"Fusão recorrente desconhecida '{fusion}' (use cat ou sum).")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fusion = fusion
        self.hidden_dim = hidden_dim
        self.forward_cell = LSTMCell(f'{name}.fwd', input_dim, hidden_dim, rng, dtype)
        self.backward_cell = LSTMCell(f'{name}.bwd', input_dim, hidden_dim, rng, dtype)

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim if self.fusion == 'cat' else self.hidden_dim

    def params(self) -> List[Param]:
        return self.forward_cell.params() + self.backward_cell.params()

    def forward(self, xs: np.ndarray, training: bool = False) -> np.ndarray:
        h_fwd = self.forward_cell.forward(xs)
        h_bwd = self.backward_cell.forward(xs[::-1])
        self._tape = {}
        if self.fusion == 'cat':
            return np.concatenate([h_fwd, h_bwd], axis=1)
        return h_fwd + h_bwd

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self._pop_tape()
        if self.fusion == 'cat':
            d_fwd, d_bwd = dy[:, :self.hidden_dim], dy[:, self.hidden_dim:]
        else:
            d_fwd = d_bwd = dy
        return self.forward_cell.backward(d_fwd) + self.backward_cell.backward(d_bwd)[::-1]
