# tensor_io.py
"""
Serialização binária de tensores (formato ISOF) e contêiner de checkpoint.

Tensor ISOF (tudo little-endian):
    magic    4 bytes  b'ISOF'
    version  uint16   FORMAT_VERSION
    dtype    uint8    1 = float32, 2 = float64
    rank     uint8
    extents  rank x int64
    data     prod(extents) valores IEEE-754 na ordem C

Checkpoint:
    magic    8 bytes  b'ISOFCKPT'
    length   uint64   tamanho do manifesto JSON (UTF-8)
    manifest JSON com 'entries': [{name, offset, nbytes}] relativos ao fim do manifesto
    blobs    tensores ISOF concatenados
"""

import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, BinaryIO, Dict, Tuple, Union

import numpy as np

from errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b'ISOF'
CHECKPOINT_MAGIC = b'ISOFCKPT'
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {code: dtype for dtype, code in _DTYPE_CODES.items()}
_HEADER = struct.Struct('<4sHBB')


def write_tensor(stream: BinaryIO, x: np.ndarray) -> int:
    """Grava um tensor no stream e retorna o número de bytes escritos."""
    dtype = np.dtype(x.dtype)
    if dtype not in _DTYPE_CODES:
        raise DataError(f"dtype {dtype} não suportado pelo formato ISOF.")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, _DTYPE_CODES[dtype], x.ndim)
    extents = struct.pack(f'<{x.ndim}q', *x.shape)
    payload = np.ascontiguousarray(x, dtype=dtype.newbyteorder('<')).tobytes(order='C')
    stream.write(header)
    stream.write(extents)
    stream.write(payload)
    return len(header) + len(extents) + len(payload)


def read_tensor(stream: BinaryIO) -> np.ndarray:
    raw = stream.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise DataError("Cabeçalho ISOF truncado.")
    magic, version, code, rank = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DataError(f"Magic inválido: {magic!r}.")
    if version != FORMAT_VERSION:
        raise DataError(f"Versão ISOF {version} não suportada (esperada {FORMAT_VERSION}).")
    if code not in _CODE_DTYPES:
        raise DataError(f"Código de dtype desconhecido: {code}.")
    shape = struct.unpack(f'<{rank}q', stream.read(8 * rank))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = stream.read(count * dtype.itemsize)
    if len(data) != count * dtype.itemsize:
        raise DataError("Dados ISOF truncados.")
    return np.frombuffer(data, dtype=dtype.newbyteorder('<')).astype(dtype).reshape(shape)


def save_tensor(path: Union[str, Path], x: np.ndarray) -> None:
    with open(path, 'wb') as f:
        write_tensor(f, x)


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    try:
        with open(path, 'rb') as f:
            return read_tensor(f)
    except FileNotFoundError:
        raise DataError(f"Arquivo de tensor não encontrado: {path}")


def save_checkpoint(path: Union[str, Path], manifest: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> None:
    """Grava manifesto + tensores nomeados. A ordem dos tensores é a do dicionário."""
    blobs = io.BytesIO()
    entries = []
    for name, value in tensors.items():
        offset = blobs.tell()
        nbytes = write_tensor(blobs, np.asarray(value))
        entries.append({'name': name, 'offset': offset, 'nbytes': nbytes, 'shape': list(np.shape(value))})
    manifest = dict(manifest, entries=entries)
    header = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        f.write(blobs.getvalue())
    logger.debug(f"Checkpoint salvo em {path} ({len(entries)} tensores).")


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        with open(path, 'rb') as f:
            if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
                raise DataError(f"{path} não é um checkpoint ISOF.")
            (length,) = struct.unpack('<Q', f.read(8))
            manifest = json.loads(f.read(length).decode('utf-8'))
            base = f.tell()
            tensors = {}
            for entry in manifest['entries']:
                f.seek(base + entry['offset'])
                tensors[entry['name']] = read_tensor(f)
    except FileNotFoundError:
        raise DataError(f"Checkpoint não encontrado: {path}")
    except (json.JSONDecodeError, KeyError, struct.error) as e:
        raise DataError(f"Checkpoint corrompido: {path}", details=str(e))
    return manifest, tensors
