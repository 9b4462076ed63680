"""Acceptance gates for the whole pipeline, one test per gate.

Each test prints a single [PASS]/[FAIL] line naming the property it
checks, so a verbose run doubles as a checklist. Expected values come
only from the independent oracles (exhaustive enumeration, full-sort
ranking, central finite differences) or from closed-form identities,
never from the code under test.
"""

import filecmp
import json
import math
import time

import numpy as np

from mevtr.cli import run
from mevtr.corpus import (
    Corpus,
    EmbeddingMatrix,
    SyntheticConfig,
    TextItem,
    VideoItem,
    generate_synthetic,
    load_embeddings,
    save_embeddings,
)
from mevtr.evaluation import evaluate_t2v, evaluate_v2t, partition_subsets
from mevtr.keyevents import ClusterConfig, gather_key_embeddings, select_key_events
from mevtr.loss import (
    Batch,
    LossConfig,
    Weighting,
    baseline_loss,
    loss_t2v,
    loss_v2t,
    loss_v2t_plain,
    mevtr_loss,
)
from mevtr.similarity import SimilarityMatrix, SimilarityMode, score_matrix, score_pair
from mevtr.trainer import ProjectionHead, TrainConfig, head_gradient, project_corpus, train

from .oracles import (
    assignment_objective,
    central_difference_grad,
    cosine_distances,
    exhaustive_best_medoids,
    is_swap_local,
    relative_error,
    symmetric_infonce,
    t2v_metrics,
    v2t_metrics,
)
from .test_evaluation import _build_corpus
from .test_trainer import _oracle_loss, _random_head_batch

MODES = (SimilarityMode.KEY_EVENT_AVG, SimilarityMode.KEY_EVENT_MAX, SimilarityMode.MEAN_POOL)


def _report(capsys, number: int, label: str, ok: bool) -> None:
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {label}")


def _random_batch(rng, max_videos=4, max_texts=6):
    """Random score grid plus a positives partition over its columns."""
    n_videos = int(rng.integers(2, max_videos + 1))
    counts = [1] * n_videos
    while sum(counts) < max_texts and rng.random() < 0.6:
        counts[int(rng.integers(0, n_videos))] += 1
    n_texts = sum(counts)
    cols = rng.permutation(n_texts)
    positives, at = [], 0
    for c in counts:
        positives.append(tuple(int(j) for j in cols[at : at + c]))
        at += c
    scores = rng.standard_normal((n_videos, n_texts))
    return scores, Batch(positives=tuple(positives), n_texts=n_texts)


# ---------------------------------------------------------------------------
# 1. key-event selection against exhaustive search
# ---------------------------------------------------------------------------


def test_criterion_1_key_event_selection_optimality(capsys):
    ok = False
    try:
        rng = np.random.default_rng(2024)
        t0 = time.perf_counter()
        for trial in range(200):
            n = int(rng.integers(3, 9))
            d = int(rng.integers(2, 7))
            k = int(rng.integers(1, 4))
            frames = rng.standard_normal((n, d))
            config = ClusterConfig(
                k=k, init="even" if trial % 2 == 0 else "kpp", seed=trial
            )
            result = select_key_events(EmbeddingMatrix(frames), config)

            dist = cosine_distances(frames.astype(np.float32).astype(np.float64))
            best_obj, _ = exhaustive_best_medoids(dist, k)
            at_optimum = result.objective <= best_obj + 1e-9
            swap_local = is_swap_local(dist, result.medoid_indices)
            assert at_optimum or swap_local, (
                f"trial {trial}: objective {result.objective} vs optimum "
                f"{best_obj}, not swap-local either"
            )
            assert abs(
                assignment_objective(dist, result.medoid_indices) - result.objective
            ) <= 1e-9
            hist = result.objective_history
            assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:])), (
                f"trial {trial}: objective increased during {hist}"
            )
            assert result.iterations_used <= 60
        elapsed = time.perf_counter() - t0
        assert elapsed < 5.0, f"200 instances took {elapsed:.2f}s"
        ok = True
    finally:
        _report(capsys, 1, "key-event selection reaches the exhaustive or a swap-local optimum", ok)


# ---------------------------------------------------------------------------
# 2. similarity aggregation identities
# ---------------------------------------------------------------------------


def test_criterion_2_similarity_identities(capsys):
    ok = False
    try:
        rng = np.random.default_rng(31)
        pairs = []
        for _ in range(10_000):
            k = int(rng.integers(1, 9))
            d = int(rng.integers(2, 17))
            pairs.append((rng.standard_normal((k, d)), rng.standard_normal(d)))

        t0 = time.perf_counter()
        for keys, text in pairs:
            s_avg = score_pair(keys, text, SimilarityMode.KEY_EVENT_AVG)
            s_max = score_pair(keys, text, SimilarityMode.KEY_EVENT_MAX)
            assert s_max >= s_avg - 1e-12

        for keys, text in pairs[:2000]:
            one = keys[:1]
            vals = {mode: score_pair(one, text, mode) for mode in MODES}
            assert len(set(vals.values())) == 1, f"modes disagree at K=1: {vals}"

        for i, (keys, text) in enumerate(pairs[:1000]):
            ck = 0.1 + 9.9 * ((i * 37) % 100) / 99.0
            ct = 0.1 + 9.9 * ((i * 61) % 100) / 99.0
            for mode in MODES:
                base = score_pair(keys, text, mode)
                scaled = score_pair(ck * keys, ct * text, mode)
                assert abs(scaled - base) <= 1e-6
        elapsed = time.perf_counter() - t0
        assert elapsed < 1.0, f"similarity sweep took {elapsed:.2f}s"
        ok = True
    finally:
        _report(capsys, 2, "max dominates avg, modes coincide at K=1, scale invariance", ok)


# ---------------------------------------------------------------------------
# 3. loss gradients against finite differences
# ---------------------------------------------------------------------------


def test_criterion_3_loss_gradients_and_degeneracies(capsys):
    ok = False
    try:
        rng = np.random.default_rng(77)
        t0 = time.perf_counter()
        taus = (0.2, 0.5, 1.0)
        weightings = (Weighting.DYNAMIC, Weighting.FIXED)
        for i in range(100):
            scores, batch = _random_batch(rng)
            tau = taus[i % len(taus)]
            for fn in (loss_v2t, loss_v2t_plain, loss_t2v):
                _, grad = fn(scores, batch, tau)
                fd = central_difference_grad(lambda z: fn(z, batch, tau)[0], scores)
                assert relative_error(grad, fd) < 1e-4, f"batch {i}, {fn.__name__}"

            head_batch = _random_head_batch(rng, dim=4)
            config = TrainConfig(
                mode=MODES[i % 3],
                loss=LossConfig(temperature=0.4, weighting=weightings[i % 2], alpha=0.7),
                use_mevtr_loss=(i % 4) < 2,
            )
            head = ProjectionHead.seeded(4, 3 + i % 2, seed=i)
            grad_w = head_gradient(head_batch, head, config)
            fd_w = central_difference_grad(
                _oracle_loss(head_batch, head.weights, config), head.weights
            )
            assert relative_error(grad_w, fd_w) < 1e-4, f"head batch {i}"

        for i in range(20):
            n = int(rng.integers(2, 6))
            scores = rng.standard_normal((n, n))
            batch = Batch(positives=tuple((j,) for j in range(n)), n_texts=n)
            tau = taus[i % len(taus)]
            out = mevtr_loss(
                scores, batch, LossConfig(temperature=tau, weighting=Weighting.FIXED, alpha=1.0)
            )
            assert abs(out.total - symmetric_infonce(scores.tolist(), tau)) <= 1e-12

        for n in (2, 3, 5, 8):
            for const in (0.0, 0.7, -1.3):
                scores = np.full((n, n), const)
                batch = Batch(positives=tuple((j,) for j in range(n)), n_texts=n)
                out = mevtr_loss(scores, batch, LossConfig(temperature=0.5))
                assert abs(out.l_v2t - math.log(n)) <= 1e-9
                assert abs(out.l_t2v - math.log(n)) <= 1e-9
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0, f"gradient sweep took {elapsed:.2f}s"
        ok = True
    finally:
        _report(capsys, 3, "analytic gradients match finite differences; degenerate cases exact", ok)


# ---------------------------------------------------------------------------
# 4. dynamic weighting identity
# ---------------------------------------------------------------------------


def test_criterion_4_dynamic_weighting_identity(capsys):
    ok = False
    try:
        rng = np.random.default_rng(101)
        for i in range(200):
            scores, batch = _random_batch(rng)
            config = LossConfig(temperature=(0.2, 1.0)[i % 2], weighting=Weighting.DYNAMIC)
            for fn in (mevtr_loss, baseline_loss):
                out = fn(scores, batch, config)
                assert not out.alpha_fallback
                assert abs(out.total - 2.0 * out.l_v2t) <= 1e-9, (
                    f"batch {i}, {fn.__name__}: total {out.total} vs 2*l_v2t {2 * out.l_v2t}"
                )
        ok = True
    finally:
        _report(capsys, 4, "dynamic weighting makes total equal twice the video-to-text loss", ok)


# ---------------------------------------------------------------------------
# 5. retrieval metrics against a full-sort oracle
# ---------------------------------------------------------------------------


def test_criterion_5_metrics_match_full_sort_oracle(capsys):
    ok = False
    try:
        rng = np.random.default_rng(55)
        t0 = time.perf_counter()
        for trial in range(500):
            n_videos = int(rng.integers(2, 9))
            n_texts = int(rng.integers(n_videos, 21))
            counts = [1] * n_videos
            for _ in range(n_texts - n_videos):
                counts[int(rng.integers(0, n_videos))] += 1
            corpus = _build_corpus(counts)
            raw = rng.uniform(-1.0, 1.0, size=(n_videos, n_texts)).astype(np.float32)
            if trial % 5 == 0:
                raw[rng.integers(0, n_videos)] = raw[0, 0]  # force rank ties
            grid = SimilarityMatrix(corpus.video_ids, corpus.text_ids, raw)
            ks = tuple(sorted({1, int(rng.integers(1, n_texts + 1)), n_texts}))

            positives, at = [], 0
            for c in counts:
                positives.append(list(range(at, at + c)))
                at += c
            owner = [i for i, c in enumerate(counts) for _ in range(c)]

            rep_v = evaluate_v2t(grid, corpus, ks=ks)
            orc_v = v2t_metrics(raw.tolist(), positives, ks)
            for j, k in enumerate(ks):
                assert rep_v.recall_average[j] == orc_v["average"][k]
                assert rep_v.recall_one_hit[j] == orc_v["one_hit"][k]
                assert rep_v.recall_all_hit[j] == orc_v["all_hit"][k]
                assert rep_v.recall_all_hit[j] <= rep_v.recall_average[j] <= rep_v.recall_one_hit[j]
            assert rep_v.median_rank == orc_v["median_rank"]

            ks_t = tuple(sorted({1, int(rng.integers(1, n_videos + 1)), n_videos}))
            rep_t = evaluate_t2v(grid, corpus, ks=ks_t)
            orc_t = t2v_metrics(raw.T.tolist(), owner, ks_t)
            for j, k in enumerate(ks_t):
                assert rep_t.recall_average[j] == orc_t["recall"][k]
            assert rep_t.median_rank == orc_t["median_rank"]

            for rep in (rep_v, rep_t):
                for series in (rep.recall_average, rep.recall_one_hit, rep.recall_all_hit):
                    assert all(a <= b for a, b in zip(series, series[1:]))
        elapsed = time.perf_counter() - t0
        assert elapsed < 5.0, f"500 instances took {elapsed:.2f}s"
        ok = True
    finally:
        _report(capsys, 5, "recall bands and median rank equal the brute-force oracle", ok)


# ---------------------------------------------------------------------------
# 6. collapse mitigation, trained head vs baseline loss
# ---------------------------------------------------------------------------


def test_criterion_6_multi_positive_loss_reduces_text_collapse(capsys):
    ok = False
    try:
        t0 = time.perf_counter()
        wins = 0
        for seed in range(5):
            corpus, _ = generate_synthetic(
                SyntheticConfig(
                    n_videos=20,
                    events_per_video=(3, 6),
                    dim=16,
                    noise_scale=0.05,
                    seed=seed,
                )
            )
            finals = {}
            for use_mevtr in (True, False):
                report = train(
                    corpus,
                    TrainConfig(
                        epochs=20,
                        batch_videos=20,
                        learning_rate=0.2,
                        seed=seed,
                        mode=SimilarityMode.KEY_EVENT_MAX,
                        use_mevtr_loss=use_mevtr,
                    ),
                )
                finals[use_mevtr] = report.collapse_mean[-1]
            if finals[True] < finals[False]:
                wins += 1
        elapsed = time.perf_counter() - t0
        assert wins >= 4, f"collapse lower in only {wins}/5 seeds"
        assert elapsed < 60.0, f"training sweep took {elapsed:.2f}s"
        ok = True
    finally:
        _report(capsys, 6, "multi-positive loss ends with lower text collapse in >= 4/5 seeds", ok)


# ---------------------------------------------------------------------------
# 7. training sanity on a separable corpus
# ---------------------------------------------------------------------------


def test_criterion_7_training_descends_and_retrieves(capsys):
    ok = False
    try:
        t0 = time.perf_counter()
        corpus, _ = generate_synthetic(
            SyntheticConfig(
                n_videos=12, events_per_video=(3, 5), dim=16, noise_scale=0.0, seed=0
            )
        )
        report = train(
            corpus,
            TrainConfig(
                epochs=5,
                batch_videos=12,
                learning_rate=0.05,
                seed=0,
                mode=SimilarityMode.KEY_EVENT_MAX,
            ),
        )
        totals = report.mean_total
        assert all(b < a for a, b in zip(totals, totals[1:])), (
            f"mean total loss not strictly decreasing: {totals}"
        )

        projected = project_corpus(corpus, report.head)
        keys = {}
        for video in projected.videos:
            selected = select_key_events(video.frames, ClusterConfig(k=16))
            keys[video.video_id] = gather_key_embeddings(video.frames, selected)
        grid = score_matrix(projected, keys, SimilarityMode.KEY_EVENT_MAX)
        rep = evaluate_t2v(grid, projected, ks=(1,))
        assert rep.recall_average[0] == 1.0, f"recall@1 is {rep.recall_average[0]}"
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0, f"training sanity run took {elapsed:.2f}s"
        ok = True
    finally:
        _report(capsys, 7, "loss strictly decreases and trained recall@1 reaches 1.0", ok)


# ---------------------------------------------------------------------------
# 8. determinism, binary round trips, subset partitions
# ---------------------------------------------------------------------------


def _run_pipeline(root, capsys) -> None:
    manifest = str(root / "corpus" / "manifest.jsonl")
    events = str(root / "events.jsonl")
    scores = str(root / "scores.bin")
    metrics = str(root / "metrics.json")
    assert run([
        "generate", "--out", str(root / "corpus"), "--n-videos", "6",
        "--events", "2..4", "--frames", "3..5", "--dim", "8", "--seed", "9",
    ]) == 0
    assert run(["select-events", "--manifest", manifest, "--k", "3", "--out", events]) == 0
    assert run([
        "score", "--manifest", manifest, "--keyevents", events,
        "--mode", "max", "--out", scores,
    ]) == 0
    assert run([
        "evaluate", "--manifest", manifest, "--scores", scores,
        "--task", "v2t", "--ks", "1,5", "--out", metrics,
    ]) == 0
    capsys.readouterr()


def test_criterion_8_determinism_formats_and_partitions(capsys, tmp_path):
    ok = False
    try:
        for name in ("a", "b"):
            d = tmp_path / name
            d.mkdir()
            _run_pipeline(d, capsys)
        rel_a = sorted(
            p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()
        )
        rel_b = sorted(
            p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file()
        )
        assert rel_a == rel_b
        for rel in rel_a:
            assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False), (
                f"{rel} differs between identical runs"
            )

        rng = np.random.default_rng(88)
        for i in range(25):
            mat = EmbeddingMatrix(
                rng.standard_normal((int(rng.integers(1, 40)), int(rng.integers(1, 9))))
            )
            path = tmp_path / f"round-{i}.emb"
            save_embeddings(mat, path)
            back = load_embeddings(path)
            assert back.data.dtype == np.float32
            assert np.array_equal(back.data, mat.data)

        frames = EmbeddingMatrix(np.eye(2, dtype=np.float32))
        boundary = (59.9, 60.0, 119.9, 120.0, 179.9, 180.0)
        for i in range(1000):
            videos, texts = [], []
            for v in range(int(rng.integers(1, 9))):
                if rng.random() < 0.2:
                    duration = float(boundary[int(rng.integers(0, len(boundary)))])
                else:
                    duration = float(rng.uniform(0.0, 300.0))
                n_events = int(rng.integers(1, 21))
                tids = tuple(f"c{i}-v{v}-t{j}" for j in range(n_events))
                videos.append(VideoItem(f"c{i}-v{v}", frames, duration, tids))
                texts.extend(
                    TextItem(tid, EmbeddingMatrix(np.array([1.0, 0.0])), f"c{i}-v{v}")
                    for tid in tids
                )
            corpus = Corpus(videos=tuple(videos), texts=tuple(texts))
            for family in ("duration", "events"):
                parts = partition_subsets(corpus, family)
                members = [vid for ids in parts.values() for vid in ids]
                assert len(members) == len(corpus.videos)
                assert set(members) == set(corpus.video_ids)
        ok = True
    finally:
        _report(capsys, 8, "pipeline runs are byte-identical; files round-trip; subsets partition", ok)
