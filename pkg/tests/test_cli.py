"""End-to-end command-line behavior: flows, exit codes, config handling."""

import json
import logging
import struct

import numpy as np
import pytest

from mevtr.cli import run
from mevtr.corpus import MAGIC, load_corpus
from mevtr.evaluation import evaluate_v2t
from mevtr.similarity import SimilarityMatrix, load_similarity, save_similarity
from mevtr.trainer import load_head

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _out_json(capsys):
    lines = capsys.readouterr().out.strip().splitlines()
    return json.loads(lines[-1])


def _generate(tmp_path, capsys, **overrides):
    args = {
        "--out": str(tmp_path / "corpus"),
        "--n-videos": "4",
        "--events": "2..3",
        "--frames": "3..4",
        "--dim": "8",
        "--seed": "0",
    }
    args.update({k: str(v) for k, v in overrides.items()})
    argv = ["generate"] + [x for kv in args.items() for x in kv]
    assert run(argv) == 0
    return _out_json(capsys)["manifest"]


def _pipeline(tmp_path, capsys, mode="avg"):
    manifest = _generate(tmp_path, capsys)
    events = str(tmp_path / "events.jsonl")
    scores = str(tmp_path / "scores.bin")
    assert run(["select-events", "--manifest", manifest, "--k", "2", "--out", events]) == 0
    assert run(["score", "--manifest", manifest, "--keyevents", events, "--mode", mode, "--out", scores]) == 0
    capsys.readouterr()
    return manifest, events, scores


# ---------------------------------------------------------------------------
# happy paths
# ---------------------------------------------------------------------------


def test_generate_reports_counts(tmp_path, capsys):
    manifest = _generate(tmp_path, capsys)
    corpus = load_corpus(manifest)
    assert len(corpus.videos) == 4
    assert all(2 <= v.event_count <= 3 for v in corpus.videos)


def test_score_then_evaluate_round_trip(tmp_path, capsys):
    manifest, _, scores = _pipeline(tmp_path, capsys)
    out = tmp_path / "metrics.json"
    csv = tmp_path / "metrics.csv"
    code = run([
        "evaluate", "--scores", scores, "--manifest", manifest,
        "--task", "v2t", "--ks", "1,2,5", "--out", str(out), "--csv", str(csv),
    ])
    assert code == 0
    emitted = _out_json(capsys)
    payload = json.loads(out.read_text())
    assert payload["task"] == "v2t"
    assert set(payload["recall"]) == {"1", "2", "5"}
    assert emitted["median_rank"] == payload["median_rank"]
    assert csv.read_text().startswith("k,recall_average")


def test_evaluate_matches_library_call(tmp_path, capsys):
    manifest, _, scores = _pipeline(tmp_path, capsys)
    out = tmp_path / "metrics.json"
    assert run([
        "evaluate", "--scores", scores, "--manifest", manifest,
        "--task", "v2t", "--ks", "1,5", "--out", str(out),
    ]) == 0
    want = evaluate_v2t(load_similarity(scores), load_corpus(manifest), ks=(1, 5))
    assert json.loads(out.read_text()) == want.to_dict()


def test_evaluate_subset_payload(tmp_path, capsys):
    manifest, _, scores = _pipeline(tmp_path, capsys)
    out = tmp_path / "metrics.json"
    assert run([
        "evaluate", "--scores", scores, "--manifest", manifest,
        "--task", "t2v", "--ks", "1,5", "--subset-by", "events", "--out", str(out),
    ]) == 0
    payload = json.loads(out.read_text())
    assert set(payload) == {"overall", "subsets"}
    # 2..3 events per video: only the low bin is populated
    assert payload["subsets"]["test-E1"]["n_queries"] >= 1
    assert payload["subsets"]["test-E2"] is None
    assert payload["subsets"]["test-E3"] is None


def test_t2v_report_uses_single_recall(tmp_path, capsys):
    manifest, _, scores = _pipeline(tmp_path, capsys)
    out = tmp_path / "t2v.json"
    assert run([
        "evaluate", "--scores", scores, "--manifest", manifest,
        "--task", "t2v", "--ks", "1", "--out", str(out),
    ]) == 0
    payload = json.loads(out.read_text())
    assert list(payload["recall"]["1"]) == ["recall"]


def test_diagnose_collapse_flow(tmp_path, capsys):
    manifest = _generate(tmp_path, capsys)
    out = tmp_path / "collapse.json"
    csv = tmp_path / "collapse.csv"
    figs = tmp_path / "figs"
    code = run([
        "diagnose-collapse", "--manifest", manifest, "--no-self-pairs",
        "--out", str(out), "--csv", str(csv), "--figures", str(figs),
    ])
    assert code == 0
    payload = json.loads(out.read_text())
    assert payload["include_self_pairs"] is False
    assert csv.read_text().startswith("event_count,")
    assert (figs / "collapse.png").read_bytes()[:8] == PNG_MAGIC
    emitted = _out_json(capsys)
    assert emitted["mean"] == payload["mean"]


def test_train_flow_with_head_and_figures(tmp_path, capsys):
    manifest = _generate(tmp_path, capsys, **{"--n-videos": "3"})
    report = tmp_path / "report.json"
    head = tmp_path / "head.emb"
    figs = tmp_path / "figs"
    code = run([
        "train", "--manifest", manifest, "--epochs", "2", "--batch-videos", "3",
        "--lr", "0.05", "--k", "2", "--report", str(report),
        "--head-out", str(head), "--figures", str(figs),
    ])
    assert code == 0
    payload = json.loads(report.read_text())
    assert payload["epochs"] == 2
    assert len(payload["per_epoch"]["total"]) == 2
    assert load_head(head).dim_in == 8
    assert (figs / "training.png").read_bytes()[:8] == PNG_MAGIC
    emitted = _out_json(capsys)
    assert emitted["final_total"] == payload["per_epoch"]["total"][-1]


def test_loss_eval_matches_golden(tmp_path, capsys, request):
    grid = SimilarityMatrix(
        ("v0", "v1"),
        ("a", "b", "c"),
        np.array([[0.5, 0.25, -0.25], [0.125, -0.5, 0.375]], dtype=np.float32),
    )
    scores = tmp_path / "scores.bin"
    save_similarity(grid, scores)
    batch = tmp_path / "batch.json"
    batch.write_text(json.dumps({"positives": [[0, 1], [2]]}), encoding="utf-8")
    assert run([
        "loss-eval", "--scores", str(scores), "--batch", str(batch), "--tau", "0.5",
    ]) == 0
    got = _out_json(capsys)
    golden = json.loads(
        (request.path.parent / "golden" / "loss_eval.json").read_text()
    )
    assert set(got) == set(golden)
    assert got["alpha_fallback"] is False
    for key in ("alpha_used", "l_t2v", "l_v2t", "total"):
        assert got[key] == pytest.approx(golden[key], abs=1e-9)
    assert np.allclose(got["grad_scores"], golden["grad_scores"], atol=1e-6)


def test_score_threads_flag_is_deterministic(tmp_path, capsys):
    manifest, events, scores = _pipeline(tmp_path, capsys)
    two = str(tmp_path / "scores2.bin")
    assert run([
        "--threads", "2", "score", "--manifest", manifest,
        "--keyevents", events, "--out", two,
    ]) == 0
    assert (tmp_path / "scores.bin").read_bytes() == (tmp_path / "scores2.bin").read_bytes()


def test_reruns_are_byte_identical(tmp_path, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for root in (a, b):
        root.mkdir()
        _pipeline(root, capsys)
        out = root / "metrics.json"
        assert run([
            "evaluate", "--scores", str(root / "scores.bin"),
            "--manifest", str(root / "corpus" / "manifest.jsonl"),
            "--task", "v2t", "--out", str(out),
        ]) == 0
        capsys.readouterr()
    rel_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    rel_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert rel_a == rel_b
    for rel in rel_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


# ---------------------------------------------------------------------------
# config file
# ---------------------------------------------------------------------------


def test_config_flag_precedence(tmp_path, capsys):
    conf = tmp_path / "mevtr.conf"
    conf.write_text(
        "# corpus defaults\nn-videos = 3\nseed = 7\ndim = 6\n", encoding="utf-8"
    )
    out = tmp_path / "corpus"
    assert run([
        "--config", str(conf), "generate", "--out", str(out), "--n-videos", "5",
    ]) == 0
    emitted = _out_json(capsys)
    assert emitted["videos"] == 5  # flag beats config
    corpus = load_corpus(out / "manifest.jsonl")
    assert corpus.dim == 6  # config beats default


def test_config_keys_for_other_subcommands_are_ignored(tmp_path, capsys):
    conf = tmp_path / "mevtr.conf"
    conf.write_text("epochs = 9\nn-videos = 2\nnot-a-real-key = 1\n", encoding="utf-8")
    out = tmp_path / "corpus"
    assert run([
        "--config", str(conf), "generate", "--out", str(out), "--dim", "4",
    ]) == 0
    assert _out_json(capsys)["videos"] == 2


def test_config_syntax_and_value_errors(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("n-videos 3\n", encoding="utf-8")
    assert run(["--config", str(conf), "generate", "--out", str(tmp_path / "c")]) == 1
    conf.write_text("n-videos = lots\n", encoding="utf-8")
    assert run(["--config", str(conf), "generate", "--out", str(tmp_path / "c")]) == 1
    err = capsys.readouterr().err
    assert "n-videos" in err


def test_missing_config_file_is_io_error(tmp_path, capsys):
    assert run([
        "--config", str(tmp_path / "absent.conf"),
        "generate", "--out", str(tmp_path / "c"),
    ]) == 2


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_version_and_help_exit_zero(capsys):
    assert run(["--version"]) == 0
    assert "mevtr" in capsys.readouterr().out
    assert run(["--help"]) == 0
    assert run(["generate", "--help"]) == 0


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run([]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["generate"]) == 1  # --out missing
    assert run(["generate", "--out", str(tmp_path / "c"), "--dim", "abc"]) == 1
    assert run(["evaluate", "--scores", "s", "--manifest", "m", "--task", "both",
                "--out", "o"]) == 1
    assert run(["--threads", "0", "score", "--manifest", "m", "--keyevents", "k",
                "--out", "s"]) == 1
    capsys.readouterr()


def test_validation_errors_exit_one(tmp_path, capsys):
    manifest = _generate(tmp_path, capsys)
    assert run([
        "select-events", "--manifest", manifest, "--k", "0",
        "--out", str(tmp_path / "e.jsonl"),
    ]) == 1
    assert run(["generate", "--out", str(tmp_path / "c2"), "--dim", "1"]) == 1
    err = capsys.readouterr().err
    assert "dim must be" in err


def test_training_divergence_exits_one(tmp_path, capsys):
    manifest = _generate(tmp_path, capsys, **{"--n-videos": "4"})
    with np.errstate(over="ignore", invalid="ignore"):
        code = run([
            "train", "--manifest", manifest, "--epochs", "1", "--batch-videos", "2",
            "--lr", "1e308", "--k", "2", "--report", str(tmp_path / "r.json"),
        ])
    assert code == 1
    assert "epoch 0 batch" in capsys.readouterr().err


def test_io_errors_exit_two(tmp_path, capsys):
    assert run([
        "select-events", "--manifest", str(tmp_path / "absent.jsonl"),
        "--out", str(tmp_path / "e.jsonl"),
    ]) == 2
    bad = tmp_path / "scores.bin"
    bad.write_bytes(struct.pack("<5sIQ", MAGIC, 2, 2) + b"\x00" * 4)
    assert run([
        "loss-eval", "--scores", str(bad), "--batch", str(tmp_path / "b.json"),
    ]) == 2
    capsys.readouterr()


def test_malformed_batch_json_exits_two(tmp_path, capsys):
    manifest, _, scores = _pipeline(tmp_path, capsys)
    batch = tmp_path / "batch.json"
    batch.write_text("{broken", encoding="utf-8")
    assert run(["loss-eval", "--scores", scores, "--batch", str(batch)]) == 2
    batch.write_text(json.dumps({"wrong": []}), encoding="utf-8")
    assert run(["loss-eval", "--scores", scores, "--batch", str(batch)]) == 2
    capsys.readouterr()


def test_score_rejects_unknown_keyevent_video(tmp_path, capsys):
    manifest, events, _ = _pipeline(tmp_path, capsys)
    extra = json.dumps({
        "video": "ghost", "medoids": [0], "assignments": [0],
        "objective": 0.0, "iterations": 0,
    })
    with open(events, "a", encoding="utf-8") as fh:
        fh.write(extra + "\n")
    assert run([
        "score", "--manifest", manifest, "--keyevents", events,
        "--out", str(tmp_path / "s2.bin"),
    ]) == 1
    assert "ghost" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------


def test_log_level_env_var(tmp_path, capsys, monkeypatch):
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    monkeypatch.setenv("MEVTR_LOG", "INFO")
    _generate(tmp_path, capsys, **{"--n-videos": "2"})
    run(["generate", "--out", str(tmp_path / "c2"), "--n-videos", "2", "--dim", "4"])
    err = capsys.readouterr().err
    assert "mevtr: INFO: wrote" in err
    for h in list(root.handlers):
        root.removeHandler(h)
