"""Training objective: weighted cross-entropy, cluster/separation terms on
patch distances, and the within-class prototype diversity penalty.

Sign convention for the combined objective: cluster and diversity are added,
separation is subtracted (it measures the distance to foreign-class
prototypes, which training should grow).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .model import PrototypeBank, patch_squared_distances

WEIGHTING_STRATEGIES = ("uniform", "INS", "ISNS", "median_frequency", "literal_eq3")

LOG_FLOOR = 1e-12  # probability floor inside cross-entropy, keeps log finite


@dataclass
class LossWeights:
    """Coefficients and weighting strategy for the combined objective."""

    lambda_clst: float = 0.8
    lambda_sep: float = 0.08
    lambda_div: float = 0.3
    weighting: str = "median_frequency"
    normalized_diversity: bool = False

    def __post_init__(self):
        if self.weighting not in WEIGHTING_STRATEGIES:
            raise ValueError(
                f"unknown weighting {self.weighting!r}, expected one of {WEIGHTING_STRATEGIES}"
            )


@dataclass
class WeightVector:
    """Per-class cross-entropy weights plus the provenance they came from."""

    values: np.ndarray
    strategy: str
    class_counts: tuple

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.values, dtype=dtype)


@dataclass
class LossBreakdown:
    """All four terms of one objective evaluation; ``total`` is the
    differentiable combination."""

    mwce: torch.Tensor
    clst: torch.Tensor
    sep: torch.Tensor
    div: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("mwce", "clst", "sep", "div", "total")}


def mwce_weights(class_counts, strategy: str = "median_frequency") -> WeightVector:
    """Per-class weights from training counts d_j.

    median_frequency (default): w_j = median(d) / d_j, up-weighting rare
    classes.  literal_eq3: w_j = median(d) / sum of the *other* classes'
    counts, kept selectable for literal reproduction even though it
    down-weights minorities.  INS: w_j proportional to 1/d_j; ISNS:
    proportional to 1/sqrt(d_j); both normalized to mean 1.
    """
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("class_counts must be a vector with >= 2 classes")
    if np.any(counts < 1):
        raise ValueError("every class count must be >= 1")
    if strategy not in WEIGHTING_STRATEGIES:
        raise ValueError(f"unknown weighting {strategy!r}, expected one of {WEIGHTING_STRATEGIES}")

    med = np.median(counts)
    if strategy == "uniform":
        w = np.ones_like(counts)
    elif strategy == "median_frequency":
        w = med / counts
    elif strategy == "literal_eq3":
        w = med / (counts.sum() - counts)
    elif strategy == "INS":
        w = 1.0 / counts
        w *= counts.size / w.sum()
    else:  # ISNS
        w = 1.0 / np.sqrt(counts)
        w *= counts.size / w.sum()
    return WeightVector(values=w, strategy=strategy, class_counts=tuple(int(c) for c in counts))


def mwce_loss(logits: torch.Tensor, labels, weights: WeightVector | None = None) -> torch.Tensor:
    """Weighted cross-entropy -w_y * log(p_y), averaged over the batch.

    Probabilities come from exponential normalization of the logits and are
    floored at 1e-12 before the log.
    """
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    if labels.numel() != logits.shape[0]:
        raise ValueError("labels length must match batch size")
    if torch.any(labels < 0) or torch.any(labels >= logits.shape[-1]):
        raise ValueError("label outside class range")
    if not torch.all(torch.isfinite(logits)):
        raise ValueError("logits must be finite")
    log_probs = torch.log_softmax(logits, dim=-1)
    log_probs = torch.clamp(log_probs, min=float(np.log(LOG_FLOOR)))
    picked = log_probs.gather(1, labels.view(-1, 1)).squeeze(1)
    if weights is not None:
        w = weights.as_tensor(dtype=logits.dtype).to(logits.device)
        if w.numel() != logits.shape[-1]:
            raise ValueError("weight vector length must match class count")
        picked = picked * w[labels]
    return -picked.mean()


def _min_patch_distances(fmaps: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """Per sample and prototype, the minimum squared distance over all
    feature patches: (B, n)."""
    dist = patch_squared_distances(fmaps, bank.vectors)
    return torch.amin(dist, dim=(-2, -1))


def cluster_loss(fmaps: torch.Tensor, labels, bank: PrototypeBank) -> torch.Tensor:
    """Mean over samples of the distance from the feature map to its nearest
    own-class prototype (min over prototypes, min over patches)."""
    if fmaps.shape[0] == 0:
        raise ValueError("empty batch")
    labels = torch.as_tensor(labels, dtype=torch.long, device=fmaps.device).reshape(-1)
    dmin = _min_patch_distances(fmaps, bank)
    own = bank.prototype_classes.view(1, -1) == labels.view(-1, 1)
    if not torch.all(own.any(dim=1)):
        raise ValueError("some sample's class owns no prototypes")
    masked = torch.where(own, dmin, torch.full_like(dmin, float("inf")))
    return torch.amin(masked, dim=1).mean()


def separation_loss(fmaps: torch.Tensor, labels, bank: PrototypeBank) -> torch.Tensor:
    """Mean over samples of the distance to the nearest *foreign*-class
    prototype.  Contributes to the total with a negative sign."""
    if fmaps.shape[0] == 0:
        raise ValueError("empty batch")
    labels = torch.as_tensor(labels, dtype=torch.long, device=fmaps.device).reshape(-1)
    dmin = _min_patch_distances(fmaps, bank)
    foreign = bank.prototype_classes.view(1, -1) != labels.view(-1, 1)
    if not torch.all(foreign.any(dim=1)):
        raise ValueError("no foreign-class prototypes: need at least two classes in the bank")
    masked = torch.where(foreign, dmin, torch.full_like(dmin, float("inf")))
    return torch.amin(masked, dim=1).mean()


def diversity_loss(bank: PrototypeBank, normalized: bool = False) -> torch.Tensor:
    """Within-class repetition penalty.

    Sums the squared dot products over all ordered pairs (k, l), k != l, of
    same-class prototypes and scales by 2 / (c * m * (m - 1)).  Zero exactly
    when every within-class pair is orthogonal.  With ``normalized`` the dot
    products are replaced by cosines.
    """
    m = bank.per_class
    if m < 2:
        raise ValueError("diversity needs >= 2 prototypes per class")
    vectors = bank.vectors
    if normalized:
        norms = torch.linalg.vector_norm(vectors, dim=1, keepdim=True)
        if torch.any(norms == 0):
            raise ValueError("zero-norm prototype cannot be cosine-normalized")
        vectors = vectors / norms
    c = bank.num_classes
    total = vectors.new_zeros(())
    for j in range(c):
        block = vectors[bank.class_slice(j)]
        gram = block @ block.T
        sq = gram * gram
        total = total + sq.sum() - torch.diagonal(sq).sum()
    return total * (2.0 / (c * m * (m - 1)))


def total_loss(
    logits: torch.Tensor,
    fmaps: torch.Tensor,
    labels,
    bank: PrototypeBank,
    loss_weights: LossWeights,
    class_weights: WeightVector | None = None,
) -> LossBreakdown:
    """Combine all four terms:

        total = MWCE + lambda_clst * clst - lambda_sep * sep + lambda_div * div
    """
    mwce = mwce_loss(logits, labels, class_weights)
    clst = cluster_loss(fmaps, labels, bank)
    sep = separation_loss(fmaps, labels, bank)
    div = diversity_loss(bank, normalized=loss_weights.normalized_diversity)
    total = (
        mwce
        + loss_weights.lambda_clst * clst
        - loss_weights.lambda_sep * sep
        + loss_weights.lambda_div * div
    )
    return LossBreakdown(mwce=mwce, clst=clst, sep=sep, div=div, total=total)
