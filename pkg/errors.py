# errors.py

from typing import Optional


class IsolationError(Exception):
    """Erro base do projeto. Carrega uma mensagem curta e detalhes opcionais."""
    exit_code = 1

    def __init__(self, message: str, details: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.details = details


class ConfigError(IsolationError, ValueError):
    """Configuração inválida (chave desconhecida, valor fora do intervalo)."""
    exit_code = 2


class DataError(IsolationError, ValueError):
    """Dataset ausente, corrompido ou incompatível com a operação."""
    exit_code = 3


class ShapeError(DataError):
    """Dimensões de tensor incompatíveis com a operação ou com o modelo."""


class CheckFailure(IsolationError):
    """Uma verificação de gradiente (ou de propriedade) excedeu a tolerância."""
    exit_code = 4
