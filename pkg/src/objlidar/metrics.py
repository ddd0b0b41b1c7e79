"""Generation-quality metrics: Chamfer, BEV JSD / MMD, Frechet distance, cosine similarity."""
import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import kurtosis, skew

from . import _kernels
from .errors import UndefinedInputError, ValidationError
from .geometry import as_cloud, bev_histogram

FEATURE_DIM = 32
RADIAL_BINS = 16
PAPER_SCALE = {"jsd": 10.0, "mmd": 1e4}


def chamfer_distance(p, q, backend=None):
    """Sum of the two mean squared nearest-neighbour distances (xyz only)."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise UndefinedInputError("Chamfer distance needs two non-empty clouds")
    return float(_kernels.nn_sqdist(p, q, backend).mean() + _kernels.nn_sqdist(q, p, backend).mean())


def _check_distribution(h, name):
    h = np.asarray(h, dtype=np.float64).ravel()
    if np.any(h < 0) or abs(h.sum() - 1.0) > 1e-6:
        raise ValidationError(f"{name} is not a normalized histogram (sum={h.sum():.6g})")
    return h


def _kl_terms(p, m):
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz] / m[nz])
    return out.sum()


def jsd(p, q):
    """Jensen-Shannon divergence in nats, with 0 log 0 = 0."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    m = 0.5 * (p + q)
    return float(max(0.5 * _kl_terms(p, m) + 0.5 * _kl_terms(q, m), 0.0))


def median_bandwidth(a, b):
    """Median pairwise Euclidean distance over the pooled sample, floored at 1e-12."""
    pooled = np.concatenate([a, b])
    return max(float(np.median(pdist(pooled))), 1e-12)


def mmd(a, b, sigma=None):
    """Unbiased squared MMD with a Gaussian kernel over flattened histograms.

    The bandwidth defaults to the median heuristic on ``a`` and ``b`` pooled.
    """
    a = np.asarray([np.ravel(x) for x in a], dtype=np.float64)
    b = np.asarray([np.ravel(x) for x in b], dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("MMD needs at least two histograms per set")
    sigma = median_bandwidth(a, b) if sigma is None else sigma
    gamma = 1.0 / (2.0 * sigma ** 2)
    kaa = np.exp(-gamma * cdist(a, a, "sqeuclidean"))
    kbb = np.exp(-gamma * cdist(b, b, "sqeuclidean"))
    kab = np.exp(-gamma * cdist(a, b, "sqeuclidean"))
    m, n = len(a), len(b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def _sqrtm_psd(mat):
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_params(mu1, sigma1, mu2, sigma2):
    """Frechet distance between two Gaussians given their moments."""
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    sigma1, sigma2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    # Tr((S1^1/2 S2 S1^1/2)^1/2) is the nuclear norm of S2^1/2 S1^1/2; taking
    # singular values avoids squaring the conditioning of near-jitter eigenvalues
    cross = _sqrtm_psd(sigma2) @ _sqrtm_psd(sigma1)
    tr_sqrt = np.linalg.svd(cross, compute_uv=False).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_sqrt)


def fit_gaussian(features, jitter=1e-6):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ValidationError("need at least two feature vectors to fit a Gaussian")
    cov = np.atleast_2d(np.cov(f, rowvar=False, ddof=1))
    return f.mean(axis=0), cov + jitter * np.eye(cov.shape[0])


def frechet_distance(f_real, f_gen, jitter=1e-6):
    """Frechet distance between Gaussians fitted to two feature sets."""
    mu1, s1 = fit_gaussian(f_real, jitter)
    mu2, s2 = fit_gaussian(f_gen, jitter)
    if mu1.shape != mu2.shape:
        raise ValidationError("feature sets have different dimensions")
    return frechet_from_params(mu1, s1, mu2, s2)


def semantic_similarity(a, b):
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def extract_features(cloud, radial_max=80.0):
    """32-d descriptor: mean, std, skew, excess kurtosis of each of x, y, z, i,
    then a 16-bin radial-distance histogram normalized to sum 1.

    Constant columns get zero skew and kurtosis.
    """
    cloud = as_cloud(cloud)
    if cloud.shape[0] == 0:
        raise UndefinedInputError("cannot describe an empty cloud")
    moments = []
    for col in cloud.T:
        std = col.std()
        # relative test: a column whose spread is rounding noise counts as constant
        flat = std <= 1e-12 * max(1.0, np.abs(col).max())
        moments += [
            col.mean(),
            0.0 if flat else std,
            0.0 if flat else float(skew(col)),
            0.0 if flat else float(kurtosis(col)),
        ]
    r = np.linalg.norm(cloud[:, :3], axis=1)
    bins = np.minimum((r / radial_max * RADIAL_BINS).astype(np.int64), RADIAL_BINS - 1)
    hist = np.bincount(bins, minlength=RADIAL_BINS) / cloud.shape[0]
    return np.concatenate([moments, hist])


def evaluate_sets(real, gen, metrics=("cd", "jsd", "mmd", "fpd", "ss"), grid=100, extent=50.0):
    """Compare two lists of clouds.

    CD and SS average over clouds paired by position; JSD compares the
    pooled BEV histograms; MMD compares the per-cloud BEV histograms; FPD
    compares descriptor Gaussians.
    """
    if not real or not gen:
        raise UndefinedInputError("both cloud sets must be non-empty")
    out = {}
    pairs = list(zip(real, gen))
    if "cd" in metrics:
        out["cd"] = float(np.mean([chamfer_distance(a, b) for a, b in pairs]))
    hr = hg = None
    if "jsd" in metrics or "mmd" in metrics:
        hr = [bev_histogram(c, grid, extent) for c in real]
        hg = [bev_histogram(c, grid, extent) for c in gen]
    if "jsd" in metrics:
        pr = bev_histogram(np.concatenate(real), grid, extent)
        pg = bev_histogram(np.concatenate(gen), grid, extent)
        out["jsd"] = jsd(pr, pg)
    if "mmd" in metrics:
        out["mmd"] = mmd(hr, hg)
    if "fpd" in metrics or "ss" in metrics:
        fr = np.array([extract_features(c) for c in real])
        fg = np.array([extract_features(c) for c in gen])
        if "fpd" in metrics:
            out["fpd"] = frechet_distance(fr, fg)
        if "ss" in metrics:
            out["ss"] = float(np.mean([semantic_similarity(a, b) for a, b in zip(fr, fg)]))
    return out


def format_report(values, paper_scale=False):
    """Plain-text table and ``key=value`` lines for a metric dictionary."""
    scaled = {k: v * (PAPER_SCALE.get(k, 1.0) if paper_scale else 1.0) for k, v in values.items()}
    rows = [f"{'metric':<8}{'value':>16}", "-" * 24]
    rows += [f"{k:<8}{v:>16.6g}" for k, v in scaled.items()]
    table = "\n".join(rows) + "\n"
    kv = "".join(f"{k}={v!r}\n" for k, v in scaled.items())
    return table, kv
