"""Local stand-ins for the image-quality metrics.

A small CNN trained on background-only synthetic images replaces
Inception/CLIP. All metrics look at background pixels only (product zeroed).
"""

import json
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import CorpusArrays, DatasetManifest, load_arrays
from .errors import DegenerateInputError, ExtractorGateError

log = logging.getLogger(__name__)

ACCURACY_GATE = 0.9


class _ExtractorNet(nn.Module):
    def __init__(self, num_classes, dim=64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(64, dim), nn.ReLU(),
        )
        self.head = nn.Linear(dim, num_classes)

    def forward(self, x):
        return self.head(self.features(x))


@dataclass
class FeatureExtractor:
    net: _ExtractorNet
    accuracy: float
    seed: int

    @property
    def dim(self) -> int:
        return self.net.head.in_features

    @torch.no_grad()
    def embed(self, images, masks=None) -> np.ndarray:
        """Penultimate features of background-only images (N x H x W x 3 arrays)."""
        x = background_only(images, masks)
        t = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        self.net.eval()
        return self.net.features(t).double().numpy()

    @torch.no_grad()
    def classify(self, images, masks=None) -> np.ndarray:
        x = background_only(images, masks)
        t = torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))
        return self.net(t).argmax(1).numpy()

    def state_dict(self):
        return self.net.state_dict()

    def save(self, path):
        torch.save({"state": self.net.state_dict(), "num_classes": self.net.head.out_features,
                    "dim": self.dim, "accuracy": self.accuracy, "seed": self.seed}, path)

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        blob = torch.load(path, weights_only=True)
        net = _ExtractorNet(blob["num_classes"], blob["dim"])
        net.load_state_dict(blob["state"])
        for p in net.parameters():
            p.requires_grad_(False)
        return cls(net, float(blob["accuracy"]), int(blob["seed"]))


def background_only(images, masks=None) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if masks is None:
        return x
    m = np.asarray(masks, dtype=np.float32)
    if m.ndim == 2:
        m = m[None]
    return x * (1.0 - m)[..., None]


def train_extractor(manifest: DatasetManifest, seed: int, steps: int = 400, batch_size: int = 32,
                    shuffle_labels: bool = False, train_arrays: CorpusArrays | None = None,
                    heldout_arrays: CorpusArrays | None = None, gate: float = ACCURACY_GATE) -> FeatureExtractor:
    """Fit the category classifier on training backgrounds and gate it on held-out accuracy."""
    train_arrays = train_arrays or load_arrays(manifest, "train")
    heldout_arrays = heldout_arrays or load_arrays(manifest, None, manifest.split("eval_bg1k") + manifest.split("eval_pairs"))
    rng = np.random.default_rng([seed, 0xE7])
    torch.manual_seed(seed)
    labels = train_arrays.category_ids.copy()
    if shuffle_labels:
        labels = rng.permutation(labels)
    x_all = background_only(train_arrays.images, train_arrays.masks).transpose(0, 3, 1, 2)
    net = _ExtractorNet(len(manifest.categories))
    opt = torch.optim.Adam(net.parameters(), lr=2e-3)
    for _ in range(steps):
        idx = rng.choice(len(labels), size=batch_size, replace=False)
        x = torch.from_numpy(np.ascontiguousarray(x_all[idx]))
        # mild noise so generated (slightly grainy) images embed like real ones
        x = x + torch.from_numpy(rng.normal(0, 1, x.shape).astype(np.float32)) * float(rng.uniform(0, 0.08))
        loss = F.cross_entropy(net(x), torch.from_numpy(labels[idx]))
        opt.zero_grad()
        loss.backward()
        opt.step()
    for p in net.parameters():
        p.requires_grad_(False)
    ext = FeatureExtractor(net, 0.0, seed)
    pred = ext.classify(heldout_arrays.images, heldout_arrays.masks)
    ext.accuracy = float((pred == heldout_arrays.category_ids).mean())
    if ext.accuracy < gate:
        raise ExtractorGateError(
            f"feature extractor held-out accuracy {ext.accuracy:.3f} < {gate}; "
            "increase extractor steps or make category styles more distinct"
        )
    return ext


# ---------------------------------------------------------------- FID

def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _tr_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    r1 = _sqrt_psd(s1)
    inner = r1 @ s2 @ r1
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The trace of the product square root is taken from the symmetric matrix
    ``S1^{1/2} S2 S1^{1/2}`` (same spectrum as ``S1 S2``) with eigenvalues clamped at 0.
    Both argument orders are evaluated and averaged so the result is exactly symmetric.
    """
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    s1, s2 = np.asarray(sigma1, np.float64), np.asarray(sigma2, np.float64)
    tr_covmean = 0.5 * (_tr_sqrt_product(s1, s2) + _tr_sqrt_product(s2, s1))
    d = float(((mu1 - mu2) ** 2).sum() + (np.trace(s1) + np.trace(s2)) - 2 * tr_covmean)
    return max(d, 0.0)


def feature_stats(feats: np.ndarray, eps: float = 1e-6):
    feats = np.asarray(feats, np.float64)
    return feats.mean(0), np.cov(feats, rowvar=False) + eps * np.eye(feats.shape[1])


def fid_from_features(feats_a, feats_b, eps: float = 1e-6) -> float:
    dim = np.shape(feats_a)[1]
    for name, f in (("set_a", feats_a), ("set_b", feats_b)):
        if len(f) < dim + 1:
            raise ValueError(f"{name} has {len(f)} samples; need at least {dim + 1}")
    if np.array_equal(np.asarray(feats_a), np.asarray(feats_b)):
        return 0.0
    return frechet_distance(*feature_stats(feats_a, eps), *feature_stats(feats_b, eps))


def fid_score(set_a, set_b, extractor: FeatureExtractor, masks_a=None, masks_b=None) -> float:
    """Fréchet distance between extractor features of two image sets."""
    if len(set_a) < extractor.dim + 1 or len(set_b) < extractor.dim + 1:
        raise ValueError(f"each set needs at least {extractor.dim + 1} images")
    return fid_from_features(extractor.embed(set_a, masks_a), extractor.embed(set_b, masks_b))


# ---------------------------------------------------------------- similarity

def cosine_similarity_100(ea, eb) -> np.ndarray:
    ea, eb = np.atleast_2d(ea), np.atleast_2d(eb)
    na, nb = np.linalg.norm(ea, axis=1), np.linalg.norm(eb, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("zero-norm embedding")
    return 100.0 * (ea * eb).sum(1) / (na * nb)


def embed_similarity(image_a, image_b, extractor: FeatureExtractor, mask_a=None, mask_b=None) -> float:
    """100 x cosine similarity of background embeddings."""
    ea = extractor.embed(image_a, mask_a)
    eb = extractor.embed(image_b, mask_b)
    return float(np.clip(cosine_similarity_100(ea, eb)[0], -100.0, 100.0))


# ---------------------------------------------------------------- clustering

def cluster_metrics(embeddings, labels) -> dict:
    """Mean distance to own centroid, mean pairwise centroid distance, and their ratio.

    Labels with fewer than two points are dropped (listed under ``excluded``).
    """
    x = np.asarray(embeddings, np.float64)
    labels = np.asarray(labels)
    keep, excluded = [], []
    for lab in np.unique(labels):
        (keep if (labels == lab).sum() >= 2 else excluded).append(lab)
    if excluded:
        log.warning("cluster_metrics: excluded singleton labels %s", excluded)
    if len(keep) < 2:
        raise ValueError("need at least two labels with two or more points")
    cents, intra = [], []
    for lab in keep:
        pts = x[labels == lab]
        c = pts.mean(0)
        cents.append(c)
        intra.append(np.linalg.norm(pts - c, axis=1))
    intra_mean = float(np.concatenate(intra).mean())
    cents = np.stack(cents)
    iu = np.triu_indices(len(keep), 1)
    inter_mean = float(np.linalg.norm(cents[:, None] - cents[None], axis=-1)[iu].mean())
    ratio = intra_mean / inter_mean if inter_mean > 0 else float("inf")
    return {"intra_mean": intra_mean, "inter_mean": inter_mean, "ratio": ratio,
            "excluded": [int(e) if isinstance(e, (np.integer, int)) else str(e) for e in excluded]}


# ---------------------------------------------------------------- copy-and-paste

def copy_paste_score(generated_bg, reference_bg, mask, tol: float = 1.0 / 255) -> dict:
    """Pixel MSE and fraction of near-identical pixels, measured where ``mask`` is 0."""
    g = np.asarray(generated_bg, np.float64)
    r = np.asarray(reference_bg, np.float64)
    if g.shape != r.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {r.shape}")
    region = np.asarray(mask) < 0.5
    if not region.any():
        raise DegenerateInputError("no background pixels to compare")
    diff = np.abs(g - r)[region]
    return {"pixel_mse": float((diff**2).mean()),
            "identical_fraction": float((diff.max(axis=-1) <= tol + 1e-12).mean())}


# ---------------------------------------------------------------- ablation table

# "cg" False means the category branch runs with plain (unmasked) cross attention
ABLATION_ROWS = {
    "a": {"cg": False, "cg_attention": "standard", "pg": True, "init": True},
    "b": {"cg": True, "cg_attention": "masked", "pg": False, "init": True},
    "c": {"cg": True, "cg_attention": "masked", "pg": True, "init": False},
    "d": {"cg": True, "cg_attention": "masked", "pg": True, "init": True},
}


def score_generations(generated, gen_masks, references, ref_masks, originals, orig_masks, extractor) -> dict:
    """Mean reference similarity and FID-proxy against the originals for one variant."""
    eg = extractor.embed(generated, gen_masks)
    er = extractor.embed(references, ref_masks)
    sims = cosine_similarity_100(eg, er)
    eo = extractor.embed(originals, orig_masks)
    return {"similarity": float(sims.mean()), "fid": fid_from_features(eg, eo), "n": len(generated)}


def run_ablation_suite(variants: dict, extractor: FeatureExtractor, pairs_data: dict) -> dict:
    """Score Table-IV style variants.

    ``variants`` maps row name (a-d) to a list of generated images aligned
    with ``pairs_data`` (keys: ``product_masks``, ``references``,
    ``reference_masks``, ``originals``). Missing rows are reported, not fatal.
    """
    rows, missing = {}, []
    for name, spec in ABLATION_ROWS.items():
        gen = variants.get(name)
        if gen is None:
            missing.append(name)
            continue
        rows[name] = {**spec, **score_generations(
            np.stack(gen), pairs_data["product_masks"], pairs_data["references"], pairs_data["reference_masks"],
            pairs_data["originals"], pairs_data["product_masks"], extractor)}
    checks = {}
    if "d" in rows and "b" in rows:
        checks["sim_d_gt_b"] = rows["d"]["similarity"] > rows["b"]["similarity"]
    if "d" in rows and "c" in rows:
        checks["sim_d_gt_c"] = rows["d"]["similarity"] > rows["c"]["similarity"]
    if "d" in rows and "a" in rows:
        checks["fid_d_lt_a"] = rows["d"]["fid"] < rows["a"]["fid"]
    return {"rows": rows, "checks": checks, "missing": missing, "partial": bool(missing)}


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, default=float) + "\n"
