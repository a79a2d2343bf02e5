# dataset_service.py
"""
Corpus sintético de vídeos com artefatos de manipulação controlados.

Vídeos naturais: fundo suave, blobs gaussianos que derivam ao longo de T
quadros e textura de ruído semeada. Vídeos manipulados: um vídeo natural cuja
região elíptica central é trocada por blur(up(down(quadro))) e misturada com
alfa suave na borda, removendo exatamente as frequências médias e altas.

Layout em disco:
    <dir>/manifest.json        esquema em ``DatasetManifest.to_dict``
    <dir>/videos/<id>.isof     um tensor ISOF (T, C, H, W) float32 por vídeo
"""

import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import DataConfig
from deep_log import LoGSpec, bandpass
from detector_model import FaceSequence
from errors import DataError
from isolation_loss import MANIPULATED, NATURAL
from tensor_io import load_tensor, save_tensor
from tensor_ops import depthwise_gaussian_blur, downsample2, gaussian_kernel2d, upsample_to

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'
MANIFEST_FORMAT = 'isofake-dataset'
SPLITS = ('train', 'valid', 'test')
LABEL_NAMES = {NATURAL: 'natural', MANIPULATED: 'manipulated'}

# Decimações por tipo de manipulação
RESAMPLE_LEVELS = {'resample2': 1, 'resample4': 2}

_ARTIFACT_KERNEL = gaussian_kernel2d(5, 1.0)
_ALPHA_EDGE = 0.25


def video_seed(seed: int, video_id: str) -> int:
    """Semente independente por vídeo: SHA-256 de (semente global, id)."""
    digest = hashlib.sha256(f'{seed}:{video_id}'.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


@dataclass
class SyntheticVideo:
    video_id: str
    frames: np.ndarray
    label: int
    strength: float = 0.0
    manipulation: Optional[str] = None
    region: Optional[Dict[str, float]] = None
    seed: int = 0

    def __post_init__(self):
        if self.frames.ndim != 4:
            raise DataError(f"Vídeo '{self.video_id}' deve ser (T, C, H, W); shape={self.frames.shape}.")
        if self.label == MANIPULATED and not self.strength > 0:
            raise DataError(f"Vídeo manipulado '{self.video_id}' com intensidade {self.strength}.")

    @property
    def length(self) -> int:
        return self.frames.shape[0]


@dataclass
class VideoEntry:
    video_id: str
    label: int
    split: str
    frames: int
    file: str
    offset: int = 0
    nbytes: int = 0
    strength: float = 0.0
    manipulation: Optional[str] = None
    region: Optional[Dict[str, float]] = None
    seed: int = 0


@dataclass
class DatasetManifest:
    seed: int
    height: int
    width: int
    channels: int
    videos: List[VideoEntry] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = [v.video_id for v in self.videos]
        if len(ids) != len(set(ids)):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"video_ids duplicados no manifesto: {dup[:5]}")
        bad = [v.video_id for v in self.videos if v.split not in SPLITS]
        if bad:
            raise DataError(f"Split desconhecido para {bad[:5]}.")

    def entries(self, split: Optional[str] = None) -> List[VideoEntry]:
        return [v for v in self.videos if split is None or v.split == split]

    def counts(self) -> Dict[str, Dict[str, int]]:
        out = {s: {'natural': 0, 'manipulated': 0} for s in SPLITS}
        for v in self.videos:
            out[v.split][LABEL_NAMES[v.label]] += 1
        return out

    def to_dict(self) -> Dict:
        return {
            'format': MANIFEST_FORMAT,
            'version': 1,
            'seed': self.seed,
            'height': self.height,
            'width': self.width,
            'channels': self.channels,
            'videos': [asdict(v) for v in self.videos],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'DatasetManifest':
        if data.get('format') != MANIFEST_FORMAT:
            raise DataError("Manifesto com formato desconhecido.")
        try:
            videos = [VideoEntry(**v) for v in data['videos']]
            return cls(seed=data['seed'], height=data['height'], width=data['width'],
                       channels=data['channels'], videos=videos)
        except (KeyError, TypeError) as e:
            raise DataError(f"Manifesto malformado: {e}")

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'DatasetManifest':
        path = Path(path)
        if not path.is_file():
            raise DataError(f"Manifesto não encontrado: {path}")
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise DataError(f"Manifesto inválido em {path}: {e}")
        return cls.from_dict(data)


# --- Síntese ---

def _grid(H: int, W: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing='ij')


def natural_frames(seed: int, T: int, C: int, H: int, W: int) -> np.ndarray:
    """Vídeo natural (T, C, H, W) em [0, 1], totalmente determinado por ``seed``."""
    rng = np.random.default_rng(seed)
    yy, xx = _grid(H, W)
    base = rng.uniform(0.2, 0.45, (C, 1, 1))
    slope = rng.uniform(-0.1, 0.1, (C, 2, 1, 1))
    background = base + slope[:, 0] * (yy / H - 0.5) + slope[:, 1] * (xx / W - 0.5)

    n_blobs = int(rng.integers(2, 5))
    start = rng.uniform((0.2 * H, 0.2 * W), (0.8 * H, 0.8 * W), (n_blobs, 2))
    velocity = rng.uniform(-0.3, 0.3, (n_blobs, 2))
    sigma = rng.uniform(0.12, 0.25, n_blobs) * min(H, W)
    amplitude = rng.uniform(0.15, 0.35, (n_blobs, C))
    texture = rng.normal(0.0, 0.06, (C, H, W))

    frames = np.empty((T, C, H, W))
    for t in range(T):
        frame = background + texture + rng.normal(0.0, 0.015, (C, H, W))
        for b in range(n_blobs):
            cy, cx = start[b] + velocity[b] * t
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma[b] ** 2))
            frame += amplitude[b][:, None, None] * bump
        frames[t] = frame
    return np.clip(frames, 0.0, 1.0)


def sample_region(rng: np.random.Generator, H: int, W: int) -> Dict[str, float]:
    return {
        'cy': H / 2 + float(rng.uniform(-H / 16, H / 16)),
        'cx': W / 2 + float(rng.uniform(-W / 16, W / 16)),
        'ry': float(rng.uniform(0.25, 0.35)) * H,
        'rx': float(rng.uniform(0.2, 0.3)) * W,
    }


def region_alpha(region: Dict[str, float], H: int, W: int) -> np.ndarray:
    """Máscara alfa da elipse: 1 no interior, rampa linear na borda, 0 fora."""
    yy, xx = _grid(H, W)
    r = np.sqrt(((yy - region['cy']) / region['ry']) ** 2 + ((xx - region['cx']) / region['rx']) ** 2)
    return np.clip((1.0 - r) / _ALPHA_EDGE, 0.0, 1.0)


def resample_artifact(frames: np.ndarray, manipulation: str = 'resample2') -> np.ndarray:
    """down(xN) -> up -> blur gaussiano: a substituição de baixa frequência do decodificador."""
    if manipulation not in RESAMPLE_LEVELS:
        raise DataError(f"Tipo de manipulação desconhecido '{manipulation}'.")
    H, W = frames.shape[-2:]
    low = frames
    for _ in range(RESAMPLE_LEVELS[manipulation]):
        low = downsample2(low)
    return depthwise_gaussian_blur(upsample_to(low, H, W), _ARTIFACT_KERNEL)


def manipulate_frames(frames: np.ndarray, region: Dict[str, float], strength: float,
                      manipulation: str = 'resample2') -> np.ndarray:
    """Mistura a versão reamostrada na região; ``strength=0`` devolve os quadros bit a bit."""
    if not 0.0 <= strength <= 1.0:
        raise DataError(f"Intensidade fora de [0, 1]: {strength}.")
    H, W = frames.shape[-2:]
    alpha = strength * region_alpha(region, H, W)
    out = frames + alpha * (resample_artifact(frames, manipulation) - frames)
    return np.clip(out, 0.0, 1.0)


def synthesize_video(video_id: str, label: int, seed: int, T: int, C: int, H: int, W: int,
                     strength: float = 0.0, manipulation: Optional[str] = None) -> SyntheticVideo:
    frames = natural_frames(seed, T, C, H, W)
    if label == NATURAL:
        return SyntheticVideo(video_id, frames, NATURAL, seed=seed)
    region = sample_region(np.random.default_rng([seed, 1]), H, W)
    frames = manipulate_frames(frames, region, strength, manipulation)
    return SyntheticVideo(video_id, frames, MANIPULATED, strength=strength,
                          manipulation=manipulation, region=region, seed=seed)


def _assign_splits(ids: List[str], fractions: Dict[str, float], rng: np.random.Generator) -> Dict[str, str]:
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = int(round(fractions['train'] * len(ids)))
    n_valid = int(round(fractions['valid'] * len(ids)))
    n_train = min(n_train, len(ids))
    n_valid = min(n_valid, len(ids) - n_train)
    split_of = {}
    for i, vid in enumerate(order):
        split_of[vid] = 'train' if i < n_train else ('valid' if i < n_train + n_valid else 'test')
    return split_of


def plan_corpus(config: DataConfig, seed: int) -> List[VideoEntry]:
    """Ids, rótulos, splits (estratificados por classe) e parâmetros de cada vídeo."""
    rng = np.random.default_rng(seed)
    natural_ids = [f'nat_{i:04d}' for i in range(config.n_natural)]
    manipulated_ids = [f'man_{i:04d}' for i in range(config.n_manipulated)]
    split_of = {**_assign_splits(natural_ids, config.splits, rng),
                **_assign_splits(manipulated_ids, config.splits, rng)}
    entries = [VideoEntry(vid, NATURAL, split_of[vid], config.frames, f'videos/{vid}.isof',
                          seed=video_seed(seed, vid)) for vid in natural_ids]
    for i, vid in enumerate(manipulated_ids):
        strength = float(rng.uniform(config.strength_min, config.strength_max))
        entries.append(VideoEntry(vid, MANIPULATED, split_of[vid], config.frames, f'videos/{vid}.isof',
                                  strength=strength,
                                  manipulation=config.manipulation_types[i % len(config.manipulation_types)],
                                  seed=video_seed(seed, vid)))
    return entries


def generate(config: DataConfig, seed: int, out_dir: Union[str, Path], workers: int = 4) -> DatasetManifest:
    """Gera o corpus em ``out_dir``; mesma (config, seed) produz arquivos idênticos."""
    out_dir = Path(out_dir)
    (out_dir / 'videos').mkdir(parents=True, exist_ok=True)
    entries = plan_corpus(config, seed)
    T, C, H, W = config.frames, config.channels, config.height, config.width

    def build(entry: VideoEntry) -> SyntheticVideo:
        return synthesize_video(entry.video_id, entry.label, entry.seed, T, C, H, W,
                                entry.strength, entry.manipulation)

    logger.info(f"Gerando {len(entries)} vídeos {T}x{C}x{H}x{W} em {out_dir} ({workers} workers)")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        videos = list(executor.map(build, entries))

    for entry, video in zip(entries, videos):
        data = video.frames.astype(np.float32)
        save_tensor(out_dir / entry.file, data)
        entry.nbytes = (out_dir / entry.file).stat().st_size
        entry.region = video.region

    manifest = DatasetManifest(seed=seed, height=H, width=W, channels=C, videos=entries)
    manifest.save(out_dir / MANIFEST_FILE)
    logger.info(f"Manifesto gravado: {manifest.counts()}")
    return manifest


def manifest_hash(dataset_dir: Union[str, Path]) -> str:
    return hashlib.sha256((Path(dataset_dir) / MANIFEST_FILE).read_bytes()).hexdigest()


class VideoStore:
    """Leitura do corpus em disco com cache de vídeos; seguro para leitores concorrentes."""

    def __init__(self, dataset_dir: Union[str, Path]):
        self.root = Path(dataset_dir)
        self.manifest = DatasetManifest.load(self.root / MANIFEST_FILE)
        self._by_id = {v.video_id: v for v in self.manifest.videos}
        self._cache: Dict[str, SyntheticVideo] = {}
        self._lock = threading.Lock()

    def entries(self, split: Optional[str] = None) -> List[VideoEntry]:
        return self.manifest.entries(split)

    def video(self, video_id: str) -> SyntheticVideo:
        with self._lock:
            cached = self._cache.get(video_id)
        if cached is not None:
            return cached
        entry = self._by_id.get(video_id)
        if entry is None:
            raise DataError(f"Vídeo '{video_id}' não existe no manifesto.")
        frames = load_tensor(self.root / entry.file)
        expected = (entry.frames, self.manifest.channels, self.manifest.height, self.manifest.width)
        if frames.shape != expected:
            raise DataError(f"Vídeo '{video_id}' com shape {frames.shape} != {expected} do manifesto.")
        video = SyntheticVideo(entry.video_id, frames, entry.label, entry.strength,
                               entry.manipulation, entry.region, entry.seed)
        with self._lock:
            self._cache[video_id] = video
        return video

    def videos(self, split: Optional[str] = None) -> List[SyntheticVideo]:
        return [self.video(v.video_id) for v in self.entries(split)]


# --- Amostragem ---

def window_span(F: int, stride: int) -> int:
    return (F - 1) * stride + 1


def stratified_epoch(videos: Sequence[SyntheticVideo], F: int, seed: int, epoch: int = 0,
                     stride: int = 1) -> List[FaceSequence]:
    """Uma janela de F quadros por vídeo, início uniforme, ordem embaralhada; determinística em (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    span = window_span(F, stride)
    sequences = []
    for video in videos:
        if video.length < span:
            raise DataError(f"Vídeo '{video.video_id}' tem {video.length} quadros; a janela precisa de {span}.")
        sequences.append(draw_window(video, F, rng, stride))
    return [sequences[i] for i in rng.permutation(len(sequences))]


def draw_window(video: SyntheticVideo, F: int, rng: np.random.Generator, stride: int = 1) -> FaceSequence:
    span = window_span(F, stride)
    start = int(rng.integers(0, video.length - span + 1))
    return FaceSequence(video.frames[start:start + span:stride], video.video_id, video.label, start, stride)


def eval_sequences(video: SyntheticVideo, F: int, stride: int = 7) -> List[FaceSequence]:
    """Janelas deslizantes com um quadro a cada ``stride``; recua para stride 1 se o vídeo for curto."""
    if window_span(F, stride) > video.length:
        if F > video.length:
            raise DataError(f"Vídeo '{video.video_id}' tem {video.length} quadros; F={F} não cabe.")
        logger.warning(f"Vídeo '{video.video_id}' curto demais para stride {stride} "
                       f"({video.length} quadros); usando stride 1.")
        stride = 1
    span = window_span(F, stride)
    return [FaceSequence(video.frames[k:k + span:stride], video.video_id, video.label, k, stride)
            for k in range(video.length - span + 1)]


@dataclass
class RebalancePlan:
    """Pesos de amostragem por vídeo: naturais x2, cada tipo de manipulação x0.5."""
    weights: Dict[str, float]
    labels: Dict[str, int]
    types: Dict[str, Optional[str]]

    def effective_counts(self) -> Dict[str, float]:
        out = {'natural': 0.0, 'manipulated': 0.0}
        for vid, w in self.weights.items():
            out[LABEL_NAMES[self.labels[vid]]] += w
        return out

    def effective_by_type(self) -> Dict[str, float]:
        out: Dict[str, float] = {}
        for vid, w in self.weights.items():
            key = self.types[vid] or 'natural'
            out[key] = out.get(key, 0.0) + w
        return out

    def expand(self, epoch: Sequence[FaceSequence], redraw: Callable[[str], FaceSequence],
               rng: np.random.Generator) -> List[FaceSequence]:
        """
        Converte uma época estratificada no multiconjunto de treino: floor(w) cópias
        (as extras com janela nova via ``redraw``) mais uma com probabilidade frac(w).
        """
        out: List[FaceSequence] = []
        for seq in epoch:
            w = self.weights[seq.video_id]
            whole = int(np.floor(w))
            copies = whole + int(rng.random() < w - whole)
            if copies >= 1:
                out.append(seq)
                out.extend(redraw(seq.video_id) for _ in range(copies - 1))
        if not out:
            return list(epoch)
        return [out[i] for i in rng.permutation(len(out))]

    def sample(self, n: int, rng: np.random.Generator) -> List[str]:
        ids = sorted(self.weights)
        p = np.array([self.weights[i] for i in ids])
        picks = rng.choice(len(ids), size=n, p=p / p.sum())
        return [ids[i] for i in picks]


def rebalance(entries: Sequence[VideoEntry], natural_weight: float = 2.0,
              manipulated_weight: float = 0.5) -> RebalancePlan:
    n_nat = sum(1 for e in entries if e.label == NATURAL)
    n_man = len(entries) - n_nat
    if n_nat == 0 or n_man == 0:
        raise DataError(f"Rebalanceamento exige as duas classes (naturais={n_nat}, manipulados={n_man}).")
    weights = {e.video_id: natural_weight if e.label == NATURAL else manipulated_weight for e in entries}
    plan = RebalancePlan(weights, {e.video_id: e.label for e in entries},
                         {e.video_id: e.manipulation for e in entries})
    logger.debug(f"Plano de rebalanceamento: {n_nat}:{n_man} -> {plan.effective_counts()}")
    return plan


# --- Medidas do corpus ---

def band_energy_gap(videos: Sequence[SyntheticVideo]) -> float:
    """
    Potência média da primeira banda passa-alta dentro da região manipulada:
    fonte natural (ressintetizada pela semente) menos versão manipulada.
    Positivo quando o artefato remove energia de alta frequência.
    """
    gaps = []
    for video in videos:
        if video.label != MANIPULATED:
            continue
        T, C, H, W = video.frames.shape
        source = natural_frames(video.seed, T, C, H, W)
        spec = LoGSpec.build(S=1, K=C, K_out=C)
        inside = region_alpha(video.region, H, W) >= 1.0
        p_nat = (bandpass(source, spec) ** 2)[..., inside].mean()
        p_man = (bandpass(video.frames.astype(np.float64), spec) ** 2)[..., inside].mean()
        gaps.append(p_nat - p_man)
    if not gaps:
        raise DataError("Nenhum vídeo manipulado para medir o gap de energia.")
    return float(np.mean(gaps))
