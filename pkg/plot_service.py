# plot_service.py

import logging
from pathlib import Path
from typing import Dict, Union

import matplotlib
matplotlib.use('Agg')

from matplotlib import rc
import matplotlib.pyplot as plt

from metrics_service import RocCurve, ScoreHistograms

logger = logging.getLogger(__name__)


def initialize_matplotlib():
    """Estilo compacto e SVG reprodutível (ids fixos, sem data)."""
    inches_per_pt = 1.0 / 72.27
    rc('figure', figsize=(240 * inches_per_pt, 200 * inches_per_pt))
    rc('axes', labelsize=8, titlesize=8, grid=True)
    rc('grid', linestyle=':')
    rc('legend', fontsize=7)
    rc('lines', linewidth=1.0)
    rc('xtick', labelsize=7)
    rc('ytick', labelsize=7)
    rc('svg', hashsalt='isofake', fonttype='none')


initialize_matplotlib()


def _save(fig, path: Union[str, Path]):
    fig.tight_layout(pad=0.3)
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
    logger.debug(f"Figura gravada em {path}")


def plot_roc(curves: Dict[str, RocCurve], path: Union[str, Path], far_cutoff: float = None):
    """Curvas ROC (uma por nível de avaliação) com a diagonal de acaso."""
    fig, ax = plt.subplots()
    ax.plot([0, 1], [0, 1], color='0.6', linestyle='--', linewidth=0.7, label='acaso')
    for name, curve in curves.items():
        ax.plot(curve.far, curve.tar, drawstyle='steps-post', label=name)
    if far_cutoff is not None:
        ax.axvline(far_cutoff, color='r', linewidth=0.6, alpha=0.5)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel('FAR')
    ax.set_ylabel('TAR')
    ax.legend(frameon=False, loc='lower right')
    _save(fig, path)


def plot_histograms(hist: ScoreHistograms, path: Union[str, Path], title: str = ''):
    """Distribuições genuíno (natural) x impostor (manipulado) das distâncias ao centro."""
    fig, ax = plt.subplots()
    centers = (hist.edges[:-1] + hist.edges[1:]) / 2.0
    width = hist.edges[1] - hist.edges[0]
    ax.bar(centers, hist.natural, width=width, alpha=0.5, color='b', label='natural', linewidth=0)
    ax.bar(centers, hist.manipulated, width=width, alpha=0.5, color='r', label='manipulado', linewidth=0)
    ax.set_xlabel('||phi(I) - c||')
    ax.set_ylabel('frequência')
    ax.set_title(f'{title} (sobreposição {hist.overlap:.3f})'.strip())
    ax.legend(frameon=False)
    _save(fig, path)
