# app.py
"""
Ponto de entrada da linha de comando: `python app.py <subcomando> [opções]`.

Subcomandos vêm do registro em command_builder. Erros do projeto viram
códigos de saída: 2 configuração, 3 dados/dimensões, 4 verificação, 1 demais.
"""

import argparse
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import List, Optional

from command_builder import COMMANDS, COMMAND_METADATA
from errors import IsolationError

logger = logging.getLogger(__name__)

LOG_FILE = 'isofake.log'
LOG_FORMAT = '[%(asctime)s] %(levelname)s in %(module)s [%(threadName)s]: %(message)s'

_installed_handlers: List[logging.Handler] = []


# --- Configuração de Logging ---
def setup_logging(log_dir: Optional[str] = None, verbose: bool = False) -> Path:
    log_dir = Path(log_dir or os.environ.get('ISOFAKE_LOG_DIR', 'logs'))
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / LOG_FILE
    level = logging.DEBUG if verbose else logging.INFO

    log_formatter = logging.Formatter(LOG_FORMAT)

    # Handler para arquivo (5MB por arquivo, mantém os últimos 5)
    file_handler = RotatingFileHandler(log_file, maxBytes=5 * 1024 * 1024, backupCount=5, encoding='utf-8')
    file_handler.setFormatter(log_formatter)
    file_handler.setLevel(level)

    # Console em stderr; stdout fica reservado para a saída dos subcomandos
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(log_formatter)
    console_handler.setLevel(level)

    root = logging.getLogger()
    for handler in _installed_handlers:
        root.removeHandler(handler)
        handler.close()
    _installed_handlers[:] = [file_handler, console_handler]
    for handler in _installed_handlers:
        root.addHandler(handler)
    root.setLevel(level)

    # Silencia logs excessivos de bibliotecas externas
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.getLogger('PIL').setLevel(logging.WARNING)
    return log_file


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='isofake', description='Isolamento de deepfakes em hiperesfera.')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--verbose', '-v', action='store_true', help='log em nível DEBUG')
    common.add_argument('--log-dir', help='diretório dos logs (padrão: logs ou $ISOFAKE_LOG_DIR)')
    with_config = argparse.ArgumentParser(add_help=False)
    with_config.add_argument('--config', help='arquivo JSON de configuração')
    with_config.add_argument('--seed', type=int, help='sobrescreve a semente da execução')

    subparsers = parser.add_subparsers(dest='command', metavar='<subcomando>')
    subparsers.required = True
    for name, meta in COMMAND_METADATA.items():
        parents = [common, with_config] if meta['uses_config'] else [common]
        sub = subparsers.add_parser(name, parents=parents, help=meta['label'], description=meta['description'])
        for flags, kwargs in meta['arguments']:
            sub.add_argument(*flags, **kwargs)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, IsolationError):
        return exc.exit_code
    # Argumentos fora do domínio (ex.: corte de FAR <= 0) contam como erro de configuração
    if isinstance(exc, ValueError):
        return 2
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_dir, args.verbose)
    logger.debug(f"Subcomando '{args.command}' com argumentos {vars(args)}")
    try:
        return COMMANDS[args.command](args)
    except IsolationError as e:
        detail = f" ({e.details})" if e.details else ''
        logger.error(f"{e.message}{detail}")
        return e.exit_code
    except Exception as e:
        code = exit_code(e)
        logger.error(f"Erro em '{args.command}': {e}", exc_info=code == 1)
        return code


if __name__ == '__main__':
    sys.exit(main())
