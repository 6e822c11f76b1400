"""Cross-grained contrast: sentence-level cosine loss plus word/view-level weighted scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class CgcWeights:
    coarse: float = 1.0
    fine: float = 0.33

    def __post_init__(self):
        if self.coarse < 0 or self.fine < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class CorrelationMap:
    S: ad.Tensor
    S_I: ad.Tensor
    S_T: ad.Tensor


def _row_unit(x: ad.Tensor, what: str) -> ad.Tensor:
    n = ad.norm(x, axis=-1, keepdims=True)
    if np.any(n.data < ad.DIV_EPS):
        raise ValueError(f"zero-norm {what} feature")
    return x / n


def coarse_loss(image_global, text_global) -> ad.Tensor:
    """Negative cosine between the averaged image feature and the text feature."""
    fi, ft = ad._as_tensor(image_global), ad._as_tensor(text_global)
    if np.linalg.norm(fi.data) < ad.DIV_EPS or np.linalg.norm(ft.data) < ad.DIV_EPS:
        raise ValueError("zero-norm feature vector")
    return -ad.cosine_similarity(fi, ft)


def correlation_map(image_feats, word_feats) -> CorrelationMap:
    """Pairwise cosine table S (n images x m words) and its row / column means."""
    img = _row_unit(ad._as_tensor(image_feats), "image")
    txt = _row_unit(ad._as_tensor(word_feats), "word")
    S = ad.matmul(img, ad.transpose(txt))
    return CorrelationMap(S, ad.mean(S, axis=1), ad.mean(S, axis=0))


def _weighted_score(v: ad.Tensor) -> ad.Tensor:
    return ad.sum(ad.softmax(v, axis=0) * v)


def fine_scores(cmap: CorrelationMap):
    """(image-centred score, text-centred score)."""
    return _weighted_score(cmap.S_I), _weighted_score(cmap.S_T)


def fine_loss(cmap: CorrelationMap) -> ad.Tensor:
    l_img, l_txt = fine_scores(cmap)
    return -(l_img + l_txt) * 0.5


def cgc_loss(coarse, fine, weights: CgcWeights = CgcWeights()):
    return weights.coarse * coarse + weights.fine * fine
