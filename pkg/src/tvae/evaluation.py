"""Evaluation protocols: marginal likelihood, embeddings + KNN, latent
transformation demos and the per-model metrics report."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import torch

from .augmentation import AugConfig, PixelTransform, apply_transforms, make_triplets
from .datasets import ImageSet, subsample
from .latent_algebra import LatentTransform
from .networks import TVAE, VAE, GaussianLatent
from .objective import bernoulli_nll, gaussian_log_prob, tvae_loss, vae_loss


def _dtype(model):
    return next(model.parameters()).dtype


def _images(x, model) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x.unsqueeze(1)
    return x.to(_dtype(model))


# --------------------------------------------------------------------------
# marginal likelihood


@torch.no_grad()
def log_importance_weights(model: VAE, x, K: int, generator: Optional[torch.Generator] = None,
                           chunk: int = 2000) -> torch.Tensor:
    """``log p(x|z_k) + log pi(z_k) - log q(z_k|x)`` for ``z_k ~ q(z|x)``, shape ``[B, K]``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = _images(x, model)
    post = model.encode(x)
    b, d = post.mean.shape
    per = max(1, chunk // b)
    out = []
    for start in range(0, K, per):
        kc = min(per, K - start)
        eps = torch.randn((b, kc, d), generator=generator, dtype=post.mean.dtype)
        z = post.mean[:, None] + post.sigma[:, None] * eps
        logits = model.decode(z.reshape(-1, d))
        xr = x.repeat_interleave(kc, dim=0)
        log_px = -bernoulli_nll(xr, logits).reshape(b, kc)
        g = GaussianLatent(post.mean[:, None], post.log_sigma[:, None])
        out.append(log_px + (gaussian_log_prob(z) - gaussian_log_prob(z, g)))
    return torch.cat(out, dim=1)


def marginal_ll(model: VAE, x, K: int = 1000, generator: Optional[torch.Generator] = None,
                chunk: int = 2000) -> torch.Tensor:
    """Importance-sampled ``log p(x)`` per image, ``[B]``."""
    return log_mean_exp(log_importance_weights(model, x, K, generator, chunk))


def log_mean_exp(log_w: torch.Tensor) -> torch.Tensor:
    """``log(mean(exp(log_w)))`` along the last axis.

    Written as ``m + log(mean(exp(log_w - m)))`` so identical weights return
    ``m`` exactly.
    """
    m = log_w.max(dim=-1, keepdim=True).values
    return (m + torch.log(torch.exp(log_w - m).mean(dim=-1, keepdim=True))).squeeze(-1)


def dataset_marginal_ll(model: VAE, data: ImageSet, K: int = 1000, seed: int = 0, batch: int = 10) -> np.ndarray:
    gen = torch.Generator().manual_seed(seed)
    out = [marginal_ll(model, data.tensor(slice(s, s + batch)), K, gen).numpy()
           for s in range(0, len(data), batch)]
    return np.concatenate(out)


# --------------------------------------------------------------------------
# embeddings and KNN


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # [N, z_dim]
    labels: np.ndarray  # [N]

    def __post_init__(self):
        if len(self.vectors) != len(self.labels):
            raise ValueError("vectors and labels differ in length")
        if not np.isfinite(self.vectors).all():
            raise ValueError("embeddings contain non-finite values")

    def __len__(self):
        return len(self.vectors)

    def take(self, idx) -> "EmbeddingSet":
        return EmbeddingSet(self.vectors[idx], self.labels[idx])


@torch.no_grad()
def embed(model: VAE, images, labels=None, batch: int = 1000, mode: str = "mean",
          generator: Optional[torch.Generator] = None) -> EmbeddingSet:
    """Posterior means of ``images`` (an ImageSet or an image tensor).

    ``mode="sample"`` draws one posterior sample per image instead.
    """
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown embedding mode {mode!r}")
    if isinstance(images, ImageSet):
        labels = images.labels if labels is None else labels
        source = images.images
    else:
        source = torch.as_tensor(images)
    n = len(source)
    labels = np.full(n, -1, dtype=np.int64) if labels is None else np.asarray(labels)
    out = []
    for s in range(0, n, batch):
        post = model.encode(_images(source[s:s + batch], model))
        z = post.mean if mode == "mean" else post.mean + post.sigma * torch.randn(
            post.mean.shape, generator=generator, dtype=post.mean.dtype)
        out.append(z.double().numpy())
    vecs = np.concatenate(out) if out else np.zeros((0, model.z_dim))
    return EmbeddingSet(vecs, labels)


def knn_predict(anchor_vecs, anchor_labels, query_vecs, k: int = 5, chunk: int = 256) -> np.ndarray:
    """Majority vote over the ``k`` nearest anchors (L2).

    Neighbours are ordered by (distance, anchor index). Vote ties go to the
    class with the smallest mean neighbour distance, then the lowest class id.
    """
    n = len(anchor_vecs)
    if n == 0:
        raise ValueError("no anchors")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    anchors = torch.as_tensor(np.asarray(anchor_vecs, dtype=np.float64))
    labels = np.asarray(anchor_labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1
    preds = []
    for s in range(0, len(query_vecs), chunk):
        q = torch.as_tensor(np.asarray(query_vecs[s:s + chunk], dtype=np.float64))
        dist = torch.cdist(q, anchors, compute_mode="donot_use_mm_for_euclid_dist")
        vals, idx = torch.topk(dist, k, dim=1, largest=False, sorted=True)
        vals, idx = vals.numpy(), idx.numpy()
        kth = vals[:, -1:]
        tied = np.flatnonzero((dist.numpy() <= kth).sum(1) > k)
        d_np = dist.numpy()
        for r in tied:
            cand = np.flatnonzero(d_np[r] <= kth[r, 0])
            order = np.lexsort((cand, d_np[r, cand]))[:k]
            idx[r], vals[r] = cand[order], d_np[r, cand[order]]
        preds.append(_vote(labels[idx], vals, n_classes))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _vote(nbr_labels: np.ndarray, nbr_dist: np.ndarray, n_classes: int) -> np.ndarray:
    rows = np.arange(len(nbr_labels))[:, None]
    counts = np.zeros((len(nbr_labels), n_classes))
    dsum = np.zeros_like(counts)
    np.add.at(counts, (rows, nbr_labels), 1.0)
    np.add.at(dsum, (rows, nbr_labels), nbr_dist)
    best = counts == counts.max(1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(best, dsum / counts, np.inf)
    best &= mean == mean.min(1, keepdims=True)
    return best.argmax(1)


def knn_classify(anchors: EmbeddingSet, queries: EmbeddingSet, k: int = 5) -> float:
    preds = knn_predict(anchors.vectors, anchors.labels, queries.vectors, k)
    return float(np.mean(preds == queries.labels)) if len(queries) else float("nan")


def knn_out_of_sample(model: VAE, base_train: ImageSet, base_test: ImageSet, k: int = 5,
                      n_anchors: Optional[int] = 100000, n_queries: Optional[int] = None,
                      seed: int = 0) -> float:
    """Embed anchors/queries from a foreign dataset and score KNN accuracy."""
    rng = np.random.default_rng(seed)
    if n_anchors is not None and n_anchors < len(base_train):
        base_train = subsample(base_train, n_anchors, rng)
    if n_queries is not None and n_queries < len(base_test):
        base_test = subsample(base_test, n_queries, rng)
    return knn_classify(embed(model, base_train), embed(model, base_test), k)


@dataclass
class Curve:
    fractions: list
    mean: list
    std: list
    accuracies: list  # per fraction, one entry per repeat
    seeds: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fraction", "repeat", "seed", "accuracy"])
        for f, accs, seeds in zip(self.fractions, self.accuracies, self.seeds):
            for r, (a, s) in enumerate(zip(accs, seeds)):
                w.writerow([repr(f), r, s, repr(a)])
        return buf.getvalue()


def sample_efficiency_curve(anchors: EmbeddingSet, queries: EmbeddingSet, fractions: Sequence[float],
                            repeats: int = 20, k: int = 5, seed: int = 0) -> Curve:
    """KNN accuracy when only a fraction of the anchors is available."""
    ss = np.random.SeedSequence(seed)
    mean, std, accs, seeds = [], [], [], []
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fraction {f} outside (0, 1]")
        n = max(k, int(round(f * len(anchors))))
        run, run_seeds = [], []
        for child in ss.spawn(repeats):
            s = int(child.generate_state(1)[0])
            idx = np.random.default_rng(s).choice(len(anchors), size=n, replace=False)
            run.append(knn_classify(anchors.take(idx), queries, k))
            run_seeds.append(s)
        accs.append(run)
        seeds.append(run_seeds)
        mean.append(float(np.mean(run)))
        std.append(float(np.std(run)))
    return Curve(list(fractions), mean, std, accs, seeds)


# --------------------------------------------------------------------------
# latent transformation demos


def _probs(model, z) -> torch.Tensor:
    return torch.sigmoid(model.decode(z))[:, 0]


def _mean_latent(model, x) -> torch.Tensor:
    return model.encode(_images(x, model)).mean


def _broadcast(tau: LatentTransform, n: int) -> LatentTransform:
    return LatentTransform(tau.variant, tau.params.expand(n, -1), tau.z_dim, tau.residual, tau.neural_form)


@torch.no_grad()
def infer_pair_tau(model: TVAE, x1, x2) -> LatentTransform:
    return model.infer_tau(_mean_latent(model, x1), _mean_latent(model, x2))


@torch.no_grad()
def transfer_transformation(model: TVAE, source, targets, tau: Optional[LatentTransform] = None,
                            generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Grid ``[3, 1 + T, H, W]``: originals, ``tau`` applied, ``tau^-1`` applied.

    Column 0 holds the source triplet ``(x0, x1, x2)`` that ``tau`` is read from.
    """
    x0, x1, x2 = (_images(v, model) for v in source)
    if tau is None:
        tau = infer_pair_tau(model, x1, x2)
    tgt = _images(targets, model)
    post = model.encode(tgt)
    z = post.mean if generator is None else post.mean + post.sigma * torch.randn(
        post.mean.shape, generator=generator, dtype=post.mean.dtype)
    tau = _broadcast(tau, len(tgt))
    rows = [
        torch.cat([x0[:, 0], tgt[:, 0]]),
        torch.cat([x1[:, 0], _probs(model, model.act(tau, z))]),
        torch.cat([x2[:, 0], _probs(model, model.act_inverse(tau, z))]),
    ]
    return torch.stack(rows)


@dataclass
class RepeatResult:
    grid: torch.Tensor  # [2, steps + 1, H, W]
    forward: torch.Tensor  # [steps + 1, z_dim]
    backward: torch.Tensor


@torch.no_grad()
def repeat_latents(model: TVAE, tau: LatentTransform, z0: torch.Tensor, steps: int):
    fwd, bwd = [z0], [z0]
    for _ in range(steps):
        fwd.append(model.act(tau, fwd[-1]))
        bwd.append(model.act_inverse(tau, bwd[-1]))
    return torch.cat(fwd), torch.cat(bwd)


@torch.no_grad()
def repeat_transformation(model: TVAE, x0, x1, x2, steps: int,
                          tau: Optional[LatentTransform] = None) -> RepeatResult:
    """Apply the transform inferred from ``(x1, x2)`` to ``x0`` ``steps`` times each way."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if tau is None:
        tau = infer_pair_tau(model, x1, x2)
    z0 = _mean_latent(model, x0)[:1]
    fwd, bwd = repeat_latents(model, tau, z0, steps)
    grid = torch.stack([_probs(model, fwd), _probs(model, bwd)])
    return RepeatResult(grid, fwd, bwd)


@torch.no_grad()
def midpoint_latent(model: VAE, z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Shared code of two views: aggregation posterior mean for T-VAE, arithmetic mean otherwise."""
    if isinstance(model, TVAE):
        return model.aggregate(z1, z2).mean
    return 0.5 * (z1 + z2)


@torch.no_grad()
def midpoint_reconstruction(model: VAE, x1, x2) -> torch.Tensor:
    z = midpoint_latent(model, _mean_latent(model, x1), _mean_latent(model, x2))
    return model.decode(z)


@torch.no_grad()
def midpoint_nll(model: VAE, x0, x1, x2) -> torch.Tensor:
    """Bernoulli NLL of ``x0`` under the midpoint reconstruction, per triplet."""
    return bernoulli_nll(_images(x0, model), midpoint_reconstruction(model, x1, x2))


@torch.no_grad()
def interpolate_midpoint(model: TVAE, baseline: VAE, x0, x1, x2) -> torch.Tensor:
    """Rows ``[5, B, H, W]``: x0, x1, x2, T-VAE midpoint, baseline midpoint."""
    x0, x1, x2 = (_images(v, model) for v in (x0, x1, x2))
    return torch.stack([
        x0[:, 0], x1[:, 0], x2[:, 0],
        torch.sigmoid(midpoint_reconstruction(model, x1, x2))[:, 0],
        torch.sigmoid(midpoint_reconstruction(baseline, x1.to(_dtype(baseline)), x2.to(_dtype(baseline))))[:, 0],
    ])


@torch.no_grad()
def latent_distance_profile(model: VAE, image, angles: Sequence[float], n_samples: int = 10,
                            generator: Optional[torch.Generator] = None, use_means: bool = False) -> np.ndarray:
    """Rows ``(angle, sample, distance)`` between embeddings of ``image`` and its rotated view."""
    x = _images(image, model)[:1]
    ts = [PixelTransform("rotate_crop_zoom", abs(float(a)), 1 if a >= 0 else -1) for a in angles]
    views = apply_transforms(x.expand(len(ts), -1, -1, -1).clone(), ts)
    g_ref, g_view = model.encode(x), model.encode(views)
    rows = []
    for i, a in enumerate(angles):
        if use_means:
            d = torch.linalg.vector_norm(g_view.mean[i] - g_ref.mean[0]).repeat(n_samples)
        else:
            shape = (n_samples, model.z_dim)
            e1 = torch.randn(shape, generator=generator, dtype=g_ref.mean.dtype)
            e2 = torch.randn(shape, generator=generator, dtype=g_ref.mean.dtype)
            z_ref = g_ref.mean[0] + g_ref.sigma[0] * e1
            z_view = g_view.mean[i] + g_view.sigma[i] * e2
            d = torch.linalg.vector_norm(z_view - z_ref, dim=-1)
        rows += [(float(a), j, float(v)) for j, v in enumerate(d)]
    return np.array(rows, dtype=np.float64)


# --------------------------------------------------------------------------
# metrics report

REPORT_COLUMNS = ("nllx0", "nllx1", "nllx2", "c1", "c2", "nll", "div", "kl0", "elbo", "mll", "knn_in", "knn_out")


@dataclass
class MetricsReport:
    model: str
    variant: str
    z_dim: int
    dataset: str
    nllx0: float
    kl0: float
    elbo: float
    mll: float
    nllx1: Optional[float] = None
    nllx2: Optional[float] = None
    c1: Optional[float] = None
    c2: Optional[float] = None
    nll: Optional[float] = None
    div: Optional[float] = None
    knn_in: Optional[float] = None
    knn_out: Optional[float] = None

    def cells(self) -> list[str]:
        out = [self.model, self.variant, str(self.z_dim)]
        for c in REPORT_COLUMNS:
            v = getattr(self, c)
            out.append("-" if v is None else f"{v:.2f}")
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "r_chi", "zdim", *REPORT_COLUMNS])
        w.writerow(self.cells())
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["model", "r_chi", "zdim", *REPORT_COLUMNS]
        cells = self.cells()
        widths = [max(len(a), len(b)) for a, b in zip(head, cells)]
        fmt = " | ".join("{:>%d}" % w for w in widths)
        return fmt.format(*head) + "\n" + fmt.format(*cells) + "\n"

    def as_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def metrics_report(model: VAE, kind: str, test_set: ImageSet, aug: AugConfig, K: int = 1000,
                   seed: int = 0, variant: str = "-", in_sample: Optional[tuple] = None,
                   out_of_sample: Optional[tuple] = None, knn_k: int = 5, mll_limit: Optional[int] = None,
                   batch: int = 500) -> MetricsReport:
    """Score ``model`` on ``test_set`` with triplets built from a seeded stream.

    ``in_sample`` / ``out_of_sample`` are optional ``(anchor ImageSet, query ImageSet)``
    pairs for the two KNN columns. ``mll_limit`` caps how many test images
    enter the (expensive) marginal-likelihood average.
    """
    model.eval()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    gen = torch.Generator().manual_seed(seed)
    dt = _dtype(model)
    sums, n = {}, 0
    for s in range(0, len(test_set), batch):
        x = test_set.tensor(slice(s, s + batch)).to(dt)
        tri = make_triplets(x, rng, aug)
        if kind == "tvae":
            vals = tvae_loss(model, tri.x0, tri.x1, tri.x2, gen).values()
        else:
            vals = vae_loss(model, x, gen).values()
            if kind == "vae_plus":
                vals["nllx1"] = vae_loss(model, tri.x1, gen).values()["nllx0"]
                vals["nllx2"] = vae_loss(model, tri.x2, gen).values()["nllx0"]
        for key, v in vals.items():
            sums[key] = sums.get(key, 0.0) + v * len(x)
        n += len(x)
    avg = {key: v / n for key, v in sums.items()}
    mll_set = test_set if mll_limit is None or mll_limit >= len(test_set) else test_set.take(np.arange(mll_limit))
    mll = -float(np.mean(dataset_marginal_ll(model, mll_set, K, seed)))
    report = MetricsReport(
        model=kind, variant=variant if kind == "tvae" else "-", z_dim=model.z_dim, dataset=test_set.name,
        nllx0=avg["nllx0"], kl0=avg["kl0"], elbo=avg["nllx0"] + avg["kl0"], mll=mll,
        nllx1=avg.get("nllx1"), nllx2=avg.get("nllx2"),
        c1=avg.get("c1"), c2=avg.get("c2"), nll=avg.get("nll"), div=avg.get("div"),
    )
    if in_sample is not None:
        report.knn_in = knn_classify(embed(model, in_sample[0]), embed(model, in_sample[1]), knn_k)
    if out_of_sample is not None:
        report.knn_out = knn_classify(embed(model, out_of_sample[0]), embed(model, out_of_sample[1]), knn_k)
    return report


def report_fields() -> list[str]:
    return [f.name for f in fields(MetricsReport)]
