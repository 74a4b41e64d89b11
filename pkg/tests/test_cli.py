import re

import numpy as np
import pytest

from acanet.checkpoint import load_checkpoint
from acanet.cli import main
from acanet.config import RunConfig, load_config
from acanet.container import read_container, write_container
from acanet.data import Trial, load_manifest, write_trials
from acanet.model import ModelConfig, count_params

from oracles import brute_force_eer, brute_force_min_dcf

TOY_SET = [
    "--set", "model.channels=64", "--set", "model.embedding_size=64", "--set", "model.n_latent_blocks=2",
    "--set", "model.ffn_size=128", "--set", "model.n_filters=40",
    "--set", "train.epochs=1", "--set", "train.batch_size=8",
]  # fmt: skip


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["gen-data", "--speakers", "4", "--utts", "3", "--duration", "0.5", "--out", str(out), "--test-speakers", "1"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", *TOY_SET, "--train-manifest", str(corpus / "train.jsonl"), "--out", str(out), "--seed", "1"])
    assert code == 0
    return out


def test_gen_data_rows(tmp_path, capsys):
    assert main(["gen-data", "--speakers", "12", "--utts", "20", "--duration", "0.25", "--out", str(tmp_path)]) == 0
    assert len(load_manifest(tmp_path / "manifest.jsonl")) == 240
    assert "manifest" in capsys.readouterr().out


def test_gen_data_rerun_is_identical(tmp_path):
    args = ["gen-data", "--speakers", "3", "--utts", "2", "--duration", "0.3", "--seed", "7"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    for p in (tmp_path / "a").rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_usage_errors_exit_2(capsys):
    assert main(["gen-data", "--speakers", "3"]) == 2
    assert "--out" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["no-such-command"]) == 2


def test_train_without_manifest_is_usage_error(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_params_breakdown_sums_to_total(capsys):
    assert main(["params"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    counts = [int(line.split()[-1]) for line in lines]
    assert lines[-1].startswith("total")
    assert sum(counts[:-1]) == counts[-1] == count_params(ModelConfig())
    assert abs(counts[-1] - 3.6e6) <= 0.15 * 3.6e6


def test_params_no_mla_is_smaller(capsys):
    main(["params"])
    full = int(capsys.readouterr().out.splitlines()[-1].split()[-1])
    main(["params", "--variant", "no_mla"])
    assert int(capsys.readouterr().out.splitlines()[-1].split()[-1]) < full


def test_params_bad_config(tmp_path):
    assert main(["params", "--config", str(tmp_path / "missing.ini")]) == 1
    assert main(["params", "--set", "model.nonsense=1"]) == 1
    assert main(["params", "--set", "model.channels=10"]) == 1


def test_config_dir_env(tmp_path, monkeypatch, capsys):
    (tmp_path / "small.ini").write_text("[model]\nchannels = 128\n")
    monkeypatch.setenv("ACANET_CONFIG_DIR", str(tmp_path))
    assert main(["params", "--config", "small.ini"]) == 0
    assert int(capsys.readouterr().out.splitlines()[-1].split()[-1]) == count_params(ModelConfig(channels=128))


def test_config_round_trip(tmp_path):
    cfg = load_config(None, ["model.channels=64", "train.speed_perturb=0.9, 1.1", "eval.p_target=0.05"])
    cfg.save(tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg
    assert cfg.train.speed_perturb == (0.9, 1.1)
    assert load_config() == RunConfig()


def test_train_writes_loadable_checkpoint(trained):
    net = load_checkpoint(trained / "model.ckpt")
    assert net.cfg.channels == 64 and net.cfg.embedding_size == 64 and net.cfg.n_latent_blocks == 2
    assert (trained / "metrics.jsonl").read_text().strip()
    assert load_config(trained / "config.ini").model == net.cfg


def test_train_weight_sharing_reports_ratio(corpus, tmp_path, capsys):
    args = ["train", *TOY_SET, "--set", "model.channels=256", "--set", "model.embedding_size=512", "--set", "model.ffn_size=1024"]
    args += ["--set", "model.n_latent_blocks=3", "--set", "model.n_filters=80", "--set", "train.batch_size=32"]
    code = main([*args, "--variant", "weight_sharing", "--train-manifest", str(corpus / "train.jsonl"), "--out", str(tmp_path)])
    assert code == 0
    pct = float(re.search(r"params \d+ \(([\d.]+)% of unshared\)", capsys.readouterr().out).group(1))
    assert 50.0 <= pct <= 62.0


def test_train_single_speaker_fails(corpus, tmp_path):
    rows = (corpus / "train.jsonl").read_text().splitlines()
    one = [r for r in rows if '"spk000"' in r]
    (corpus / "one.jsonl").write_text("\n".join(one) + "\n")
    assert main(["train", *TOY_SET, "--train-manifest", str(corpus / "one.jsonl"), "--out", str(tmp_path)]) == 1


def test_embed_then_score(corpus, trained, tmp_path, capsys):
    test_manifest = corpus / "test.jsonl"
    a, b = tmp_path / "a.emb", tmp_path / "b.emb"
    assert main(["embed", "--checkpoint", str(trained / "model.ckpt"), "--manifest", str(test_manifest), "--out", str(a)]) == 0
    assert main(["embed", "--checkpoint", str(trained / "model.ckpt"), "--manifest", str(test_manifest), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    emb, meta = read_container(a, kind="embeddings")
    assert set(emb) == {e.utt_id for e in load_manifest(test_manifest)}
    assert all(v.shape == (64,) for v in emb.values()) and meta["embedding_size"] == 64


def test_embed_corrupt_checkpoint(corpus, trained, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    raw = (trained / "model.ckpt").read_bytes()
    bad.write_bytes(raw[: len(raw) // 2])
    code = main(["embed", "--checkpoint", str(bad), "--manifest", str(corpus / "test.jsonl"), "--out", str(tmp_path / "e")])
    assert code == 1
    assert "truncated" in capsys.readouterr().err
    code = main(["embed", "--checkpoint", str(tmp_path / "nope"), "--manifest", str(corpus / "test.jsonl"), "--out", str(tmp_path / "e")])
    assert code == 1


def _orthogonal_set(tmp_path):
    eye = np.eye(4, dtype=np.float32)
    emb = {f"s{k}_u{u}": eye[k] for k in range(4) for u in range(3)}
    ids = sorted(emb)
    trials = [Trial(a, b, a[:2] == b[:2]) for i, a in enumerate(ids) for b in ids[i + 1 :]]
    write_container(tmp_path / "o.emb", "embeddings", emb)
    write_trials(tmp_path / "o.trials", trials)
    return emb, trials


def test_score_orthogonal(tmp_path, capsys):
    _orthogonal_set(tmp_path)
    assert main(["score", "--embeddings", str(tmp_path / "o.emb"), "--trials", str(tmp_path / "o.trials")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "EER 0.00% minDCF 0.000"
    assert (tmp_path / "o.report.json").exists()


def test_score_matches_oracle(tmp_path, capsys):
    rng = np.random.default_rng(3)
    emb = {f"s{k}_u{u}": (rng.normal(size=6) + k).astype(np.float32) for k in range(4) for u in range(5)}
    ids = sorted(emb)
    trials = [Trial(a, b, a[:2] == b[:2]) for i, a in enumerate(ids) for b in ids[i + 1 :]]
    write_container(tmp_path / "r.emb", "embeddings", emb)
    write_trials(tmp_path / "r.trials", trials)
    assert main(["score", "--embeddings", str(tmp_path / "r.emb"), "--trials", str(tmp_path / "r.trials"), "--report", str(tmp_path / "rep.json")]) == 0
    scores = [float(emb[t.enrol_id].astype(np.float64) @ emb[t.test_id] / np.linalg.norm(emb[t.enrol_id].astype(np.float64)) / np.linalg.norm(emb[t.test_id].astype(np.float64))) for t in trials]
    labels = [t.target for t in trials]
    m = re.match(r"EER ([\d.]+)% minDCF ([\d.]+)", capsys.readouterr().out)
    assert float(m.group(1)) == pytest.approx(100 * brute_force_eer(scores, labels), abs=0.005)
    assert float(m.group(2)) == pytest.approx(brute_force_min_dcf(scores, labels), abs=0.0005)


def test_score_unresolved_ids(tmp_path, capsys):
    emb, trials = _orthogonal_set(tmp_path)
    write_trials(tmp_path / "x.trials", trials + [Trial("ghost1", "s0_u0", True), Trial("ghost2", "s0_u0", False)])
    assert main(["score", "--embeddings", str(tmp_path / "o.emb"), "--trials", str(tmp_path / "x.trials")]) == 1
    err = capsys.readouterr().err
    assert "ghost1" in err and "ghost2" in err


def test_train_no_posenc_variant_is_permutation_invariant(corpus, tmp_path):
    code = main(["train", *TOY_SET, "--variant", "no_posenc", "--train-manifest", str(corpus / "train.jsonl"), "--out", str(tmp_path)])
    assert code == 0
    net = load_checkpoint(tmp_path / "model.ckpt").astype(np.float64)
    assert net.cfg.use_posenc is False
    x = np.random.default_rng(0).normal(size=(40, 50))
    perm = np.random.default_rng(1).permutation(50)
    np.testing.assert_allclose(net.embed(x), net.embed(x[:, perm]), atol=1e-8)


def test_presets(capsys):
    assert main(["params", "--preset", "desk"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert int(out[-1].split()[-1]) == count_params(ModelConfig(channels=64, embedding_size=64, ffn_size=256, n_latent_blocks=2))
    cfg = load_config(preset="desk")
    assert cfg.train.batch_size == 8 and len(cfg.train.speed_perturb) == 12
    assert load_config(preset="paper").train.epochs == 25
    assert load_config(None, ["train.epochs=3"], preset="desk").train.epochs == 3
    assert main(["params", "--preset", "huge"]) == 2
