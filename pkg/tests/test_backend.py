"""LDA preprocessing, PLDA, trial scoring, and the backend file formats."""

import numpy as np
import pytest

from xveckit.backend import (
    PldaModel,
    Preprocessor,
    ScoreSet,
    Trial,
    _jacobi_eigh,
    all_pairs_trials,
    fit_plda,
    fit_preprocessor,
    length_normalize,
    load_backend,
    plda_posterior,
    read_embeddings,
    read_scores,
    read_trials,
    save_backend,
    score_trials,
    write_embeddings,
    write_scores,
    write_trials,
)
from xveckit.errors import (
    BadMagicError,
    ConfigurationError,
    DataError,
    TruncatedFileError,
)


def gaussian_logpdf(x, mu, cov):
    dev = x - mu
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * (x.size * np.log(2 * np.pi) + logdet + dev @ np.linalg.solve(cov, dev))


def sample_classes(rng, m, between, within, num_classes, per_class):
    chol_b = np.linalg.cholesky(between)
    chol_w = np.linalg.cholesky(within)
    d = m.shape[0]
    xs, labs = [], []
    for s in range(num_classes):
        y = m + chol_b @ rng.normal(size=d)
        for _ in range(per_class):
            xs.append(y + chol_w @ rng.normal(size=d))
            labs.append(f"spk{s:03d}")
    return np.array(xs), labs


# ---------------------------------------------------------------------------
# eigensolver
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("d", [1, 2, 5, 12])
def test_jacobi_matches_reference(d):
    rng = np.random.default_rng(d)
    a = rng.normal(size=(d, d))
    sym = a + a.T
    vals, vecs = _jacobi_eigh(sym)
    np.testing.assert_allclose(np.sort(vals), np.linalg.eigvalsh(sym), atol=1e-10)
    np.testing.assert_allclose(vecs @ vecs.T, np.eye(d), atol=1e-12)
    np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, sym, atol=1e-10)


def test_jacobi_already_diagonal():
    vals, vecs = _jacobi_eigh(np.diag([3.0, -1.0, 2.0]))
    np.testing.assert_allclose(np.sort(vals), [-1.0, 2.0, 3.0], atol=1e-15)
    np.testing.assert_allclose(np.abs(vecs), np.eye(3), atol=1e-15)


def test_jacobi_repeated_eigenvalues():
    # identity plus rank one: eigenvalues {1, 1, 1 + ||u||^2}
    u = np.array([1.0, 2.0, 2.0])
    sym = np.eye(3) + np.outer(u, u)
    vals, vecs = _jacobi_eigh(sym)
    np.testing.assert_allclose(np.sort(vals), [1.0, 1.0, 10.0], atol=1e-10)
    np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, sym, atol=1e-10)


def test_jacobi_huge_dynamic_range():
    sym = np.diag([1e-12, 1.0, 1e12])
    sym[0, 1] = sym[1, 0] = 1e-140  # rotation angle formula must not overflow
    vals, _ = _jacobi_eigh(sym)
    np.testing.assert_allclose(np.sort(vals), np.linalg.eigvalsh(sym), rtol=1e-12)


# ---------------------------------------------------------------------------
# preprocessor
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lda_data():
    rng = np.random.default_rng(31)
    d = 8
    between = 4.0 * np.eye(d)
    within = 0.25 * np.eye(d)
    x, labs = sample_classes(rng, np.zeros(d), between, within, 12, 10)
    return x, labs


def test_lda_whitens_within_class_scatter(lda_data):
    x, labs = lda_data
    pre = fit_preprocessor(x, labs, lda_dim=5)
    z = pre.apply(x)
    classes = sorted(set(labs))
    scatter = np.zeros((5, 5))
    for c in classes:
        rows = z[np.array(labs) == c]
        dev = rows - rows.mean(axis=0)
        scatter += dev.T @ dev
    scatter /= len(labs)
    np.testing.assert_allclose(scatter, np.eye(5), atol=1e-6)


def test_lda_centers_training_data(lda_data):
    x, labs = lda_data
    pre = fit_preprocessor(x, labs, lda_dim=4)
    assert np.all(np.abs(pre.apply(x).mean(axis=0)) < 1e-8)


def test_lda_separates_far_classes():
    rng = np.random.default_rng(8)
    d = 6
    x0 = rng.normal(size=(40, d))
    x1 = rng.normal(size=(40, d)) + 10.0  # ten sigma apart
    x = np.vstack([x0, x1])
    labs = ["a"] * 40 + ["b"] * 40
    pre = fit_preprocessor(x, labs, lda_dim=1)
    z = pre.apply(x).ravel()
    za, zb = z[:40], z[40:]
    pooled = np.sqrt(0.5 * (za.var() + zb.var()))
    assert abs(za.mean() - zb.mean()) > 5.0 * pooled


def test_lda_geometry_is_rotation_invariant(lda_data):
    x, labs = lda_data
    rng = np.random.default_rng(9)
    q, _ = np.linalg.qr(rng.normal(size=(x.shape[1], x.shape[1])))

    def mean_distances(z):
        classes = sorted(set(labs))
        mus = np.stack([z[np.array(labs) == c].mean(axis=0) for c in classes])
        return np.linalg.norm(mus[:, None] - mus[None, :], axis=2)

    plain = mean_distances(fit_preprocessor(x, labs, 4).apply(x))
    rotated = mean_distances(fit_preprocessor(x @ q.T, labs, 4).apply(x @ q.T))
    np.testing.assert_allclose(rotated, plain, atol=1e-8)


def test_lda_drops_singleton_speakers(lda_data, caplog):
    x, labs = lda_data
    x2 = np.vstack([x, np.full((1, x.shape[1]), 40.0)])
    labs2 = list(labs) + ["loner"]
    with caplog.at_level("WARNING"):
        pre = fit_preprocessor(x2, labs2, lda_dim=4)
    assert any("1 speaker" in r.message for r in caplog.records)
    # the singleton still shifts the centering mean, by 40/N per coordinate
    pre_without = fit_preprocessor(x, labs, lda_dim=4)
    assert not np.allclose(pre.mean, pre_without.mean)


def test_lda_dim_bounds(lda_data):
    x, labs = lda_data  # 12 classes, 8 dims: cap is min(8, 11)
    fit_preprocessor(x, labs, lda_dim=8)
    for bad in (0, 9, -3):
        with pytest.raises(ConfigurationError):
            fit_preprocessor(x, labs, lda_dim=bad)


def test_preprocessor_checks_input_dim(lda_data):
    x, labs = lda_data
    pre = fit_preprocessor(x, labs, lda_dim=3)
    with pytest.raises(ConfigurationError):
        pre.apply(np.zeros(5))


# ---------------------------------------------------------------------------
# length normalization
# ---------------------------------------------------------------------------

def test_length_normalize_properties():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 6)) * rng.uniform(0.1, 50.0, size=(20, 1))
    y = length_normalize(x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)
    cos = np.sum(y * x, axis=1) / np.linalg.norm(x, axis=1)
    np.testing.assert_allclose(cos, 1.0, atol=1e-12)  # direction preserved


def test_length_normalize_single_vector():
    y = length_normalize(np.array([3.0, 4.0]))
    np.testing.assert_allclose(y, [0.6, 0.8], atol=1e-15)


def test_length_normalize_rejects_zero():
    with pytest.raises(DataError):
        length_normalize(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# PLDA
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def plda_truth():
    rng = np.random.default_rng(17)
    d = 3
    a = rng.normal(size=(d, d))
    between = a @ a.T / d + 0.5 * np.eye(d)
    c = rng.normal(size=(d, d))
    within = 0.05 * (c @ c.T / d) + 0.05 * np.eye(d)
    mean = rng.normal(size=d)
    x, labs = sample_classes(rng, mean, between, within, 80, 15)
    return mean, between, within, x, labs


def test_plda_posterior_closed_form():
    # with B = W = I the posterior is literally (m + n * xbar) / (n + 1)
    d = 4
    rng = np.random.default_rng(0)
    m = rng.normal(size=d)
    model = PldaModel(mean=m, between=np.eye(d), within=np.eye(d))
    x = rng.normal(size=(5, d))
    post_mean, post_cov = plda_posterior(model, x)
    np.testing.assert_allclose(post_cov, np.eye(d) / 6.0, atol=1e-12)
    np.testing.assert_allclose(post_mean, (m + x.sum(axis=0)) / 6.0, atol=1e-12)


def test_plda_posterior_shrinks_toward_prior():
    d = 2
    model = PldaModel(mean=np.zeros(d), between=np.eye(d), within=4.0 * np.eye(d))
    obs = np.array([[8.0, 0.0]])
    post_mean, _ = plda_posterior(model, obs)
    assert 0.0 < post_mean[0] < 8.0  # noisy single observation is discounted
    np.testing.assert_allclose(post_mean, obs[0] / 5.0, atol=1e-12)


def test_plda_initial_likelihood_matches_brute_force(plda_truth):
    mean, between, within, x, labs = plda_truth
    sub, sublabs = x[: 5 * 15], labs[: 5 * 15]
    init = PldaModel(mean=mean, between=between, within=within)
    model = fit_plda(sub, sublabs, num_iterations=1, init=init)

    ll_brute = 0.0
    for s in sorted(set(sublabs)):
        rows = sub[np.array(sublabs) == s]
        n = rows.shape[0]
        cov = np.kron(np.eye(n), within) + np.kron(np.ones((n, n)), between)
        ll_brute += gaussian_logpdf(rows.reshape(-1), np.tile(mean, n), cov)
    assert model.log_likelihoods[0] == pytest.approx(ll_brute, abs=1e-6)


def test_plda_likelihood_never_decreases(plda_truth):
    _, _, _, x, labs = plda_truth
    model = fit_plda(x, labs, num_iterations=25)
    lls = np.array(model.log_likelihoods)
    assert lls.shape == (26,)
    assert np.all(np.diff(lls) >= -1e-8)


def test_plda_recovers_generating_covariances(plda_truth):
    mean, between, within, x, labs = plda_truth
    model = fit_plda(x, labs, num_iterations=40)
    b_err = np.linalg.norm(model.between - between) / np.linalg.norm(between)
    w_err = np.linalg.norm(model.within - within) / np.linalg.norm(within)
    assert b_err < 0.30  # 80 speakers bound the between-class estimate
    assert w_err < 0.15
    np.testing.assert_allclose(model.mean, mean, atol=0.5)


def test_plda_llr_matches_brute_force(plda_truth):
    mean, between, within, _, _ = plda_truth
    model = PldaModel(mean=mean, between=between, within=within)
    total = between + within
    joint = np.block([[total, between], [between, total]])
    rng = np.random.default_rng(3)
    for _ in range(20):
        e, t = rng.normal(size=3) * 2.0, rng.normal(size=3) * 2.0
        ll_same = gaussian_logpdf(np.concatenate([e, t]), np.tile(mean, 2), joint)
        ll_diff = gaussian_logpdf(e, mean, total) + gaussian_logpdf(t, mean, total)
        got = score_trials([Trial("e", "t", True)], {"e": e, "t": t},
                           scorer=model, length_norm=False).scores[0]
        assert got == pytest.approx(ll_same - ll_diff, abs=1e-10)


def test_plda_llr_is_symmetric(plda_truth):
    mean, between, within, x, labs = plda_truth
    model = fit_plda(x, labs, num_iterations=5)
    rng = np.random.default_rng(4)
    e, t = rng.normal(size=3), rng.normal(size=3)
    ab = score_trials([Trial("a", "b", False)], {"a": e, "b": t},
                      scorer=model, length_norm=False).scores[0]
    ba = score_trials([Trial("b", "a", False)], {"a": e, "b": t},
                      scorer=model, length_norm=False).scores[0]
    assert ab == pytest.approx(ba, abs=1e-10)


def test_plda_fit_is_affine_equivariant(plda_truth):
    # scatter-based init makes scores invariant under invertible affine
    # maps of the embedding space (length norm off, of course)
    _, _, _, x, labs = plda_truth
    sub, sublabs = x[: 20 * 15], labs[: 20 * 15]
    rng = np.random.default_rng(5)
    amat = rng.normal(size=(3, 3)) + 2.0 * np.eye(3)
    shift = rng.normal(size=3) * 3.0
    mapped = sub @ amat.T + shift

    trials = [Trial("u0", "u1", True), Trial("u0", "u2", False), Trial("u1", "u2", False)]
    plain = score_trials(trials, {f"u{i}": sub[i] for i in range(3)},
                         scorer=fit_plda(sub, sublabs, 10), length_norm=False).scores
    moved = score_trials(trials, {f"u{i}": mapped[i] for i in range(3)},
                         scorer=fit_plda(mapped, sublabs, 10), length_norm=False).scores
    np.testing.assert_allclose(moved, plain, atol=1e-6)


def test_plda_separates_speakers(plda_truth):
    mean, between, within, x, labs = plda_truth
    model = fit_plda(x, labs, num_iterations=20)
    rng = np.random.default_rng(6)
    fresh, fresh_labs = sample_classes(rng, mean, between, within, 30, 2)
    table = {f"u{i}": fresh[i] for i in range(len(fresh))}
    speaker_of = {f"u{i}": fresh_labs[i] for i in range(len(fresh))}
    scored = score_trials(all_pairs_trials(speaker_of), table,
                          scorer=model, length_norm=False)
    tg, nt = scored.target_scores(), scored.nontarget_scores()
    auc = (np.mean(tg[:, None] > nt[None, :])
           + 0.5 * np.mean(tg[:, None] == nt[None, :]))
    assert auc > 0.95


def test_plda_excludes_singletons(plda_truth, caplog):
    _, _, _, x, labs = plda_truth
    x2 = np.vstack([x[: 4 * 15], x[-1]])
    labs2 = labs[: 4 * 15] + ["loner"]
    with caplog.at_level("WARNING"):
        fit_plda(x2, labs2, num_iterations=2)
    assert any("excluding 1 speaker" in r.message for r in caplog.records)


def test_plda_needs_two_speakers():
    x = np.random.default_rng(0).normal(size=(6, 2))
    with pytest.raises(DataError):
        fit_plda(x, ["a"] * 5 + ["b"], num_iterations=1)


# ---------------------------------------------------------------------------
# trial scoring
# ---------------------------------------------------------------------------

def test_cosine_scores_are_inner_products_of_unit_vectors():
    table = {"a": np.array([2.0, 0.0]), "b": np.array([5.0, 0.0]),
             "c": np.array([0.0, 0.1])}
    trials = [Trial("a", "b", True), Trial("a", "c", False)]
    scored = score_trials(trials, table, scorer="cosine")
    np.testing.assert_allclose(scored.scores, [1.0, 0.0], atol=1e-12)


def test_score_trials_applies_preprocessor():
    pre = Preprocessor(mean=np.array([1.0, 1.0]),
                       projection=np.array([[1.0, 0.0]]))  # keep coordinate 0
    table = {"a": np.array([3.0, 9.0]), "b": np.array([2.0, -4.0]),
             "c": np.array([0.0, 7.0])}
    scored = score_trials([Trial("a", "b", True), Trial("a", "c", False)],
                          table, preprocessor=pre, scorer="cosine")
    np.testing.assert_allclose(scored.scores, [1.0, -1.0], atol=1e-12)  # signs of coord 0


def test_score_trials_unknown_id():
    with pytest.raises(DataError, match="trial 2.*ghost"):
        score_trials([Trial("a", "b", True), Trial("a", "ghost", False)],
                     {"a": np.ones(2), "b": np.ones(2)})


def test_score_trials_rejects_bad_scorer():
    with pytest.raises(ConfigurationError):
        score_trials([Trial("a", "b", True)], {"a": np.ones(2), "b": np.ones(2)},
                     scorer="euclid")


def test_all_pairs_trials():
    trials = all_pairs_trials({"u2": "s1", "u1": "s1", "u3": "s2"})
    assert [(t.enroll_id, t.test_id, t.target) for t in trials] == [
        ("u1", "u2", True), ("u1", "u3", False), ("u2", "u3", False)]


def test_score_set_partitions():
    ss = ScoreSet([Trial("a", "b", True), Trial("a", "c", False)],
                  np.array([0.9, 0.1]))
    np.testing.assert_array_equal(ss.target_scores(), [0.9])
    np.testing.assert_array_equal(ss.nontarget_scores(), [0.1])


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def test_trials_roundtrip(tmp_path):
    trials = [Trial("u1", "u2", True), Trial("u1", "u3", False)]
    write_trials(tmp_path / "t.txt", trials)
    assert read_trials(tmp_path / "t.txt") == trials


def test_trials_reject_malformed(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("u1 u2 target\nu1 u3\n")
    with pytest.raises(DataError, match="2"):
        read_trials(p)
    p.write_text("u1 u2 maybe\n")
    with pytest.raises(DataError):
        read_trials(p)


def test_scores_roundtrip(tmp_path):
    ss = ScoreSet([Trial("a", "b", True), Trial("c", "d", False)],
                  np.array([0.123456789, -2.5]))
    write_scores(tmp_path / "s.txt", ss)
    back = read_scores(tmp_path / "s.txt")
    assert back[("a", "b")] == pytest.approx(0.123457, abs=1e-9)  # six decimals kept
    assert back[("c", "d")] == -2.5


def test_backend_roundtrip_with_plda(tmp_path, plda_truth):
    mean, between, within, x, labs = plda_truth
    pre = Preprocessor(mean=np.arange(3.0), projection=np.eye(3)[:2])
    plda = PldaModel(mean=mean[:2] * 0, between=np.eye(2), within=0.5 * np.eye(2))
    save_backend(tmp_path / "b.xvbk", pre, plda, length_norm=False)
    pre2, plda2, ln = load_backend(tmp_path / "b.xvbk")
    assert not ln
    np.testing.assert_array_equal(pre2.mean, pre.mean)
    np.testing.assert_array_equal(pre2.projection, pre.projection)
    np.testing.assert_array_equal(plda2.between, plda.between)
    np.testing.assert_array_equal(plda2.within, plda.within)


def test_backend_roundtrip_cosine_only(tmp_path):
    pre = Preprocessor(mean=np.zeros(4), projection=np.eye(4)[:3])
    save_backend(tmp_path / "b.xvbk", pre, None, length_norm=True)
    pre2, plda2, ln = load_backend(tmp_path / "b.xvbk")
    assert plda2 is None and ln
    assert pre2.projection.shape == (3, 4)


def test_backend_bad_magic(tmp_path):
    (tmp_path / "b.xvbk").write_bytes(b"NOTABACKEND!")
    with pytest.raises(BadMagicError):
        load_backend(tmp_path / "b.xvbk")


def test_backend_truncated(tmp_path):
    pre = Preprocessor(mean=np.zeros(4), projection=np.eye(4)[:3])
    save_backend(tmp_path / "b.xvbk", pre)
    raw = (tmp_path / "b.xvbk").read_bytes()
    (tmp_path / "b.xvbk").write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        load_backend(tmp_path / "b.xvbk")


def test_embeddings_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    vecs = {f"u{i}": rng.normal(size=6).astype(np.float32).astype(np.float64)
            for i in range(5)}
    spk = {f"u{i}": f"s{i % 2}" for i in range(5)}
    write_embeddings(tmp_path / "e.xveb", vecs, spk)
    back_vecs, back_spk = read_embeddings(tmp_path / "e.xveb")
    assert back_spk == spk
    assert list(back_vecs) == list(vecs)
    for u in vecs:
        np.testing.assert_array_equal(back_vecs[u], vecs[u].astype(np.float32))


def test_embeddings_bad_magic(tmp_path):
    (tmp_path / "e.xveb").write_bytes(b"XXXX" + b"\x00" * 10)
    with pytest.raises(BadMagicError):
        read_embeddings(tmp_path / "e.xveb")
