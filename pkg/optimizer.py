# optimizer.py

import logging
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from nn_layers import Param

logger = logging.getLogger(__name__)


class Adam:
    """
    Adam com correção de viés e weight decay desacoplado.

    Taxa efetiva de cada parâmetro = lr global x ``Param.lr_scale``. Parâmetros
    com taxa efetiva zero não são tocados (nem momentos, nem valor).
    """

    def __init__(self, params: Iterable[Param], lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-6):
        self.params: List[Param] = list(params)
        self.set_lr(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.value) for p in self.params}

    def set_lr(self, lr: float):
        if not lr > 0:
            raise ValueError(f"A taxa de aprendizado global deve ser positiva (recebido {lr}).")
        self.lr = float(lr)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            rate = self.lr * p.lr_scale
            if rate == 0.0:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value -= rate * (update + self.weight_decay * p.value)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        state = {}
        for p in self.params:
            state[f'adam.m/{p.name}'] = self.m[p.name]
            state[f'adam.v/{p.name}'] = self.v[p.name]
        return state

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], t: int):
        for p in self.params:
            self.m[p.name] = tensors[f'adam.m/{p.name}'].astype(p.value.dtype)
            self.v[p.name] = tensors[f'adam.v/{p.name}'].astype(p.value.dtype)
        self.t = int(t)


def adam_step(params: Sequence[Param], global_lr: float, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0, optimizer: Adam = None) -> Adam:
    """Um passo de Adam; reaproveita ``optimizer`` (e seus momentos) quando fornecido."""
    if optimizer is None:
        optimizer = Adam(params, global_lr, betas, eps, weight_decay)
    else:
        optimizer.set_lr(global_lr)
    optimizer.step()
    return optimizer


def plateau_schedule(history: Sequence[float], base_lr: float, patience: int = 50,
                     factor: float = 10.0, max_drops: int = 3) -> Tuple[float, int]:
    """
    Reproduz o histórico de perda de validação e devolve (lr atual, quedas aplicadas).

    A taxa cai por ``factor`` sempre que ``patience`` épocas passam sem novo mínimo
    desde a última melhora ou queda, no máximo ``max_drops`` vezes.
    """
    best = float('inf')
    anchor = 0
    drops = 0
    for epoch, loss in enumerate(history):
        if loss < best:
            best = loss
            anchor = epoch
        elif epoch - anchor >= patience and drops < max_drops:
            drops += 1
            anchor = epoch
            logger.debug(f"Plateau na época {epoch}: queda {drops}/{max_drops} da taxa de aprendizado.")
    return base_lr / factor ** drops, drops
