"""Embedding post-processing and trial scoring.

Pipeline: center + LDA-project (Preprocessor), length-normalize, then
score with either cosine similarity or a two-covariance PLDA model
(speaker means drawn from N(m, B), observations from N(y, W)). PLDA is
fit by EM; scoring is the closed-form log-likelihood ratio of the
same-speaker against the different-speaker hypothesis.

LDA solves the generalized between/within eigenproblem by whitening the
within-class scatter and running a cyclic Jacobi symmetric
eigendecomposition; rows of the projection are sign-normalized so the
largest-magnitude entry is positive.

Backends persist in the same binary framing as model checkpoints under
the magic "XVBK"; embedding archives under "XVEB". Trial files are text
lines "enroll_id test_id target|nontarget"; score files are
"enroll_id test_id score" with six decimal places.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .errors import (
    BadMagicError,
    ConfigurationError,
    DataError,
    DimMismatchError,
    ParseError,
)

__all__ = [
    "Preprocessor",
    "fit_preprocessor",
    "length_normalize",
    "PldaModel",
    "fit_plda",
    "plda_posterior",
    "Trial",
    "ScoreSet",
    "score_trials",
    "all_pairs_trials",
    "read_trials",
    "write_trials",
    "read_scores",
    "write_scores",
    "save_backend",
    "load_backend",
    "write_embeddings",
    "read_embeddings",
]

log = logging.getLogger(__name__)

BACKEND_MAGIC = b"XVBK"
BACKEND_VERSION = 1
EMBEDDINGS_MAGIC = b"XVEB"
EMBEDDINGS_VERSION = 1


def _jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors-as-columns), unsorted. Sweeps
    until the off-diagonal Frobenius mass falls below tol times the
    total, which is quadratic convergence territory for any symmetric
    input.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ConfigurationError(f"jacobi needs a square matrix, got shape {a.shape}")
    v = np.eye(n)
    if n == 1:
        return np.diag(a).copy(), v
    norm = np.linalg.norm(a)
    if norm == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(max(0.0, np.sum(a * a) - np.sum(np.diag(a) ** 2)))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(2.0 * apq) * 1e153 < abs(diff):
                    t = apq / diff  # limit of the stable formula; theta would overflow
                else:
                    theta = diff / (2.0 * apq)
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    return np.diag(a).copy(), v


def _inv(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError:
        raise DataError(f"{what} is singular; not enough independent data") from None


@dataclass
class Preprocessor:
    """Centering followed by an LDA projection to lda_dim rows."""

    mean: np.ndarray
    projection: np.ndarray  # [lda_dim, emb_dim]

    @property
    def lda_dim(self) -> int:
        return self.projection.shape[0]

    def apply(self, embeddings: np.ndarray) -> np.ndarray:
        x = np.asarray(embeddings, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.mean.shape[0]:
            raise ConfigurationError(
                f"embeddings have dim {x.shape[1]}, preprocessor expects {self.mean.shape[0]}")
        y = (x - self.mean) @ self.projection.T
        return y[0] if single else y


def _class_slices(labels) -> dict[str, np.ndarray]:
    labels = [str(l) for l in labels]
    by: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by.setdefault(lab, []).append(i)
    return {lab: np.array(idx) for lab, idx in by.items()}


def fit_preprocessor(embeddings: np.ndarray, labels, lda_dim: int) -> Preprocessor:
    """Fit centering and LDA on labeled embeddings.

    Speakers with fewer than two embeddings are dropped from the
    scatter estimates with a warning. Scatters are population-normalized
    over the retained rows. The within-class scatter is probed with a
    Cholesky factorization; if that fails, a ridge of
    1e-4 * trace/dim is added once and the fit retried.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError(f"embeddings must be [N, D], got shape {x.shape}")
    if len(labels) != x.shape[0]:
        raise ConfigurationError(f"{x.shape[0]} embeddings but {len(labels)} labels")
    d = x.shape[1]
    classes = _class_slices(labels)
    retained = {lab: idx for lab, idx in classes.items() if idx.size >= 2}
    dropped = sorted(set(classes) - set(retained))
    if dropped:
        log.warning("LDA: dropping %d speaker(s) with a single embedding: %s",
                    len(dropped), ", ".join(dropped[:5]) + ("..." if len(dropped) > 5 else ""))
    if len(retained) < 2:
        raise DataError(f"LDA needs >= 2 speakers with >= 2 embeddings, have {len(retained)}")
    max_dim = min(d, len(retained) - 1)
    if not 1 <= lda_dim <= max_dim:
        raise ConfigurationError(
            f"lda_dim must lie in [1, {max_dim}] for {len(retained)} speakers of dim {d}, got {lda_dim}")

    mean = x.mean(axis=0)
    rows = np.concatenate([idx for idx in retained.values()])
    global_mean = x[rows].mean(axis=0)
    n_retained = rows.size
    s_within = np.zeros((d, d))
    s_between = np.zeros((d, d))
    for idx in retained.values():
        cls = x[idx]
        cls_mean = cls.mean(axis=0)
        dev = cls - cls_mean
        s_within += dev.T @ dev
        offset = cls_mean - global_mean
        s_between += idx.size * np.outer(offset, offset)
    s_within /= n_retained
    s_between /= n_retained

    try:
        np.linalg.cholesky(s_within)
    except np.linalg.LinAlgError:
        ridge = 1e-4 * np.trace(s_within) / d
        log.warning("LDA: within-class scatter not positive definite, adding ridge %.3e", ridge)
        s_within = s_within + ridge * np.eye(d)
        try:
            np.linalg.cholesky(s_within)
        except np.linalg.LinAlgError:
            raise DataError("within-class scatter is singular even after regularization") from None

    w_evals, w_evecs = _jacobi_eigh(s_within)
    if w_evals.min() <= 0:
        raise DataError("within-class scatter has a non-positive eigenvalue")
    w_inv_half = (w_evecs * (1.0 / np.sqrt(w_evals))) @ w_evecs.T
    m = w_inv_half @ s_between @ w_inv_half
    m = 0.5 * (m + m.T)
    m_evals, m_evecs = _jacobi_eigh(m)
    order = np.argsort(m_evals)[::-1][:lda_dim]
    projection = (w_inv_half @ m_evecs[:, order]).T
    # one deterministic sign per row: largest-magnitude entry positive
    for row in projection:
        peak = np.argmax(np.abs(row))
        if row[peak] < 0:
            row *= -1.0
    return Preprocessor(mean=mean, projection=projection)


def length_normalize(embeddings: np.ndarray) -> np.ndarray:
    """Scale vectors (or rows) to unit Euclidean norm."""
    x = np.asarray(embeddings, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise DataError("cannot length-normalize a zero embedding")
    y = x / norms[:, None]
    return y[0] if single else y


@dataclass
class PldaModel:
    """Two-covariance model: y ~ N(mean, between), x | y ~ N(y, within)."""

    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def plda_posterior(model: PldaModel, embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior (mean, covariance) of a speaker's latent mean given its
    embeddings."""
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = x.shape[0]
    b_inv = _inv(model.between, "between-speaker covariance")
    w_inv = _inv(model.within, "within-speaker covariance")
    cov = _inv(b_inv + n * w_inv, "posterior precision")
    mean = cov @ (b_inv @ model.mean + w_inv @ x.sum(axis=0))
    return mean, cov


def _marginal_log_likelihood(m: np.ndarray, between: np.ndarray, within: np.ndarray,
                             counts: np.ndarray, class_means: np.ndarray,
                             s_within_total: np.ndarray, n_total: int) -> float:
    d = m.shape[0]
    n_classes = counts.shape[0]
    w_inv = _inv(within, "within-speaker covariance")
    sign, logdet_w = np.linalg.slogdet(within)
    if sign <= 0:
        raise DataError("within-speaker covariance is not positive definite")
    ll = -0.5 * (n_total * d * np.log(2.0 * np.pi)
                 + (n_total - n_classes) * logdet_w
                 + np.trace(w_inv @ s_within_total))
    for n in np.unique(counts):
        sel = counts == n
        cov_n = within + n * between
        sign, logdet_n = np.linalg.slogdet(cov_n)
        if sign <= 0:
            raise DataError("speaker-mean covariance is not positive definite")
        dev = class_means[sel] - m
        quad = np.einsum("id,de,ie->i", dev, _inv(cov_n, "speaker-mean covariance"), dev)
        ll += -0.5 * (sel.sum() * logdet_n + n * quad.sum())
    return float(ll)


def fit_plda(embeddings: np.ndarray, labels, num_iterations: int = 20,
             init: PldaModel | None = None) -> PldaModel:
    """Fit the two-covariance model by EM.

    Speakers with a single embedding are excluded with a warning. By
    default the model is initialized from the data scatters (which makes
    the whole fit equivariant under invertible affine maps of the
    input); pass init to start elsewhere. The marginal log-likelihood is
    recorded before training and after every iteration in
    model.log_likelihoods; EM guarantees the sequence is non-decreasing.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigurationError(f"embeddings must be [N, D], got shape {x.shape}")
    if len(labels) != x.shape[0]:
        raise ConfigurationError(f"{x.shape[0]} embeddings but {len(labels)} labels")
    if num_iterations < 1:
        raise ConfigurationError(f"num_iterations must be >= 1, got {num_iterations}")
    classes = _class_slices(labels)
    retained = {lab: idx for lab, idx in classes.items() if idx.size >= 2}
    dropped = sorted(set(classes) - set(retained))
    if dropped:
        log.warning("PLDA: excluding %d speaker(s) with a single embedding", len(dropped))
    if len(retained) < 2:
        raise DataError(f"PLDA needs >= 2 speakers with >= 2 embeddings, have {len(retained)}")

    d = x.shape[1]
    n_classes = len(retained)
    counts = np.array([idx.size for idx in retained.values()])
    n_total = int(counts.sum())
    class_means = np.stack([x[idx].mean(axis=0) for idx in retained.values()])
    s_within_total = np.zeros((d, d))
    for idx in retained.values():
        dev = x[idx] - x[idx].mean(axis=0)
        s_within_total += dev.T @ dev

    if init is not None:
        m = np.array(init.mean, dtype=np.float64)
        between = np.array(init.between, dtype=np.float64)
        within = np.array(init.within, dtype=np.float64)
    else:
        rows = np.concatenate([idx for idx in retained.values()])
        m = x[rows].mean(axis=0)
        dev = class_means - m
        between = dev.T @ dev / n_classes
        within = s_within_total / n_total

    lls = [_marginal_log_likelihood(m, between, within, counts, class_means,
                                    s_within_total, n_total)]
    for _ in range(num_iterations):
        b_inv = _inv(between, "between-speaker covariance")
        w_inv = _inv(within, "within-speaker covariance")
        post_means = np.empty_like(class_means)
        post_covs: dict[int, np.ndarray] = {}
        for n in np.unique(counts):
            post_covs[int(n)] = _inv(b_inv + n * w_inv, "posterior precision")
        base = b_inv @ m
        for i, n in enumerate(counts):
            post_means[i] = post_covs[int(n)] @ (base + w_inv @ (n * class_means[i]))

        m = post_means.mean(axis=0)
        dev = post_means - m
        between = dev.T @ dev
        for n, cov in post_covs.items():
            between += (counts == n).sum() * cov
        between /= n_classes
        between = 0.5 * (between + between.T)

        within = s_within_total.copy()
        resid = class_means - post_means
        within += (resid * counts[:, None]).T @ resid
        for n, cov in post_covs.items():
            within += counts[counts == n].sum() * cov
        within /= n_total
        within = 0.5 * (within + within.T)
        lls.append(_marginal_log_likelihood(m, between, within, counts, class_means,
                                            s_within_total, n_total))
    return PldaModel(mean=m, between=between, within=within, log_likelihoods=lls)


@dataclass
class Trial:
    enroll_id: str
    test_id: str
    target: bool


@dataclass
class ScoreSet:
    trials: list[Trial]
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.trials)

    def target_scores(self) -> np.ndarray:
        mask = np.array([t.target for t in self.trials], dtype=bool)
        return self.scores[mask]

    def nontarget_scores(self) -> np.ndarray:
        mask = np.array([not t.target for t in self.trials], dtype=bool)
        return self.scores[mask]


class _PldaScorer:
    """Closed-form same/different log-likelihood ratio, vectorized."""

    def __init__(self, model: PldaModel):
        d = model.dim
        total = model.between + model.within
        lam = _inv(total, "total covariance")
        joint = np.block([[total, model.between], [model.between, total]])
        j_inv = _inv(joint, "joint covariance")
        sign_t, logdet_t = np.linalg.slogdet(total)
        sign_j, logdet_j = np.linalg.slogdet(joint)
        if sign_t <= 0 or sign_j <= 0:
            raise DataError("PLDA covariances are not positive definite")
        self.mean = model.mean
        self.quad = j_inv[:d, :d] - lam
        self.cross = j_inv[:d, d:]
        self.const = -0.5 * (logdet_j - 2.0 * logdet_t)

    def score(self, enroll: np.ndarray, test: np.ndarray) -> np.ndarray:
        e = enroll - self.mean
        t = test - self.mean
        return (self.const
                - 0.5 * np.sum((e @ self.quad) * e, axis=1)
                - 0.5 * np.sum((t @ self.quad) * t, axis=1)
                - np.sum((e @ self.cross) * t, axis=1))


def score_trials(trials: list[Trial], embeddings: dict[str, np.ndarray],
                 preprocessor: Preprocessor | None = None,
                 scorer: "str | PldaModel" = "cosine",
                 length_norm: bool = True) -> ScoreSet:
    """Score trials against an id -> vector table.

    The chain is preprocessor (if given), then length normalization,
    then the scorer. Cosine scoring always normalizes, so its scores
    are inner products of unit vectors; for PLDA the length_norm flag
    controls the normalization stage. Unknown trial ids raise DataError
    naming the trial.
    """
    if not trials:
        raise DataError("empty trial list")
    if not (scorer == "cosine" or isinstance(scorer, PldaModel)):
        raise ConfigurationError(f"scorer must be 'cosine' or a PldaModel, got {scorer!r}")
    for i, trial in enumerate(trials, start=1):
        for utt in (trial.enroll_id, trial.test_id):
            if utt not in embeddings:
                raise DataError(f"trial {i}: no embedding for utterance '{utt}'")

    ids = sorted({t.enroll_id for t in trials} | {t.test_id for t in trials})
    x = np.stack([np.asarray(embeddings[u], dtype=np.float64) for u in ids])
    if preprocessor is not None:
        x = preprocessor.apply(x)
    if scorer == "cosine" or length_norm:
        x = length_normalize(x)
    row = {u: i for i, u in enumerate(ids)}
    enroll = x[[row[t.enroll_id] for t in trials]]
    test = x[[row[t.test_id] for t in trials]]
    if scorer == "cosine":
        scores = np.sum(enroll * test, axis=1)
    else:
        scores = _PldaScorer(scorer).score(enroll, test)
    return ScoreSet(trials=list(trials), scores=scores)


def all_pairs_trials(speaker_of: dict[str, str]) -> list[Trial]:
    """Every unordered pair of distinct utterances, labeled by speaker match."""
    ids = sorted(speaker_of)
    if len(ids) < 2:
        raise DataError("need at least 2 utterances to form trials")
    return [Trial(a, b, speaker_of[a] == speaker_of[b])
            for i, a in enumerate(ids) for b in ids[i + 1:]]


def read_trials(path: Path | str) -> list[Trial]:
    path = Path(path)
    trials = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'enroll test label', got {line!r}")
            if parts[2] not in ("target", "nontarget"):
                raise DataError(f"{path}:{lineno}: label must be target|nontarget, got {parts[2]!r}")
            trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    if not trials:
        raise DataError(f"{path}: no trials")
    return trials


def write_trials(path: Path | str, trials: list[Trial]) -> None:
    with Path(path).open("w") as fh:
        for t in trials:
            fh.write(f"{t.enroll_id} {t.test_id} {'target' if t.target else 'nontarget'}\n")


def write_scores(path: Path | str, score_set: ScoreSet) -> None:
    with Path(path).open("w") as fh:
        for trial, score in zip(score_set.trials, score_set.scores):
            fh.write(f"{trial.enroll_id} {trial.test_id} {score:.6f}\n")


def read_scores(path: Path | str) -> dict[tuple[str, str], float]:
    path = Path(path)
    scores: dict[tuple[str, str], float] = {}
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'enroll test score', got {line!r}")
            try:
                value = float(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad score {parts[2]!r}") from None
            scores[(parts[0], parts[1])] = value
    if not scores:
        raise DataError(f"{path}: no scores")
    return scores


def save_backend(path: Path | str, preprocessor: Preprocessor,
                 plda: PldaModel | None = None, length_norm: bool = True) -> None:
    blob = "\n".join([
        f"emb_dim={preprocessor.mean.shape[0]}",
        f"lda_dim={preprocessor.lda_dim}",
        f"length_norm={int(length_norm)}",
        f"has_plda={int(plda is not None)}",
    ]).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(BACKEND_MAGIC)
        binio.write_u32(fh, BACKEND_VERSION)
        binio.write_blob(fh, blob)
        arrays = [preprocessor.mean, preprocessor.projection]
        if plda is not None:
            arrays += [plda.mean, plda.between, plda.within]
        binio.write_u32(fh, len(arrays))
        for arr in arrays:
            binio.write_array(fh, arr)


def load_backend(path: Path | str) -> tuple[Preprocessor, PldaModel | None, bool]:
    path = Path(path)
    reader = binio.Reader(path.read_bytes(), str(path))
    if reader.take(4) != BACKEND_MAGIC:
        raise BadMagicError(f"{path}: not a backend file (bad magic)")
    version = reader.u32()
    if version != BACKEND_VERSION:
        raise ParseError(f"{path}: unsupported backend version {version}")
    meta = {}
    for line in reader.take(reader.u32()).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    try:
        emb_dim = int(meta["emb_dim"])
        lda_dim = int(meta["lda_dim"])
        length_norm = bool(int(meta["length_norm"]))
        has_plda = bool(int(meta["has_plda"]))
    except (KeyError, ValueError) as err:
        raise ParseError(f"{path}: bad backend metadata ({err})") from None
    count = reader.u32()
    expected = 5 if has_plda else 2
    if count != expected:
        raise DimMismatchError(f"{path}: expected {expected} tensors, file has {count}")
    arrays = [np.asarray(binio.read_array(reader), dtype=np.float64) for _ in range(count)]
    reader.expect_exhausted()
    mean, projection = arrays[0], arrays[1]
    if mean.shape != (emb_dim,) or projection.shape != (lda_dim, emb_dim):
        raise DimMismatchError(f"{path}: tensor shapes disagree with metadata")
    pre = Preprocessor(mean=mean, projection=projection)
    plda = None
    if has_plda:
        p_mean, between, within = arrays[2], arrays[3], arrays[4]
        if p_mean.shape != (lda_dim,) or between.shape != (lda_dim, lda_dim) \
                or within.shape != (lda_dim, lda_dim):
            raise DimMismatchError(f"{path}: PLDA tensor shapes disagree with metadata")
        plda = PldaModel(mean=p_mean, between=between, within=within)
    return pre, plda, length_norm


def write_embeddings(path: Path | str, vectors: dict[str, np.ndarray],
                     speakers: dict[str, str]) -> None:
    """Archive utterance embeddings plus their speaker labels."""
    if not vectors:
        raise DataError("no embeddings to write")
    dims = {np.asarray(v).shape for v in vectors.values()}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ConfigurationError(f"embeddings must share one 1-d shape, got {sorted(dims)}")
    dim = next(iter(dims))[0]
    with Path(path).open("wb") as fh:
        fh.write(EMBEDDINGS_MAGIC)
        binio.write_u32(fh, EMBEDDINGS_VERSION)
        binio.write_u32(fh, len(vectors))
        binio.write_u32(fh, dim)
        for utt, vec in vectors.items():
            binio.write_blob(fh, utt.encode("utf-8"))
            binio.write_blob(fh, speakers.get(utt, "").encode("utf-8"))
            fh.write(np.ascontiguousarray(vec, dtype="<f4").tobytes())


def read_embeddings(path: Path | str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    reader = binio.Reader(path.read_bytes(), str(path))
    if reader.take(4) != EMBEDDINGS_MAGIC:
        raise BadMagicError(f"{path}: not an embedding archive (bad magic)")
    version = reader.u32()
    if version != EMBEDDINGS_VERSION:
        raise ParseError(f"{path}: unsupported embedding archive version {version}")
    count = reader.u32()
    dim = reader.u32()
    vectors: dict[str, np.ndarray] = {}
    speakers: dict[str, str] = {}
    for _ in range(count):
        utt = reader.take(reader.u32()).decode("utf-8")
        spk = reader.take(reader.u32()).decode("utf-8")
        vec = np.frombuffer(reader.take(4 * dim), dtype="<f4").astype(np.float64)
        if utt in vectors:
            raise DataError(f"{path}: duplicate utterance id '{utt}'")
        vectors[utt] = vec
        speakers[utt] = spk
    reader.expect_exhausted()
    return vectors, speakers
