"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
from conftest import SR, click_track

from tempofuse import dsp
from tempofuse import features as F
from tempofuse.audio_io import AudioClip
from tempofuse.data import SyntheticSpec, split_dataset, synth_click_dataset
from tempofuse.evaluation import confusion_matrix, evaluate, vote_song_predictions
from tempofuse.gradsuite import LAYER_CASES, reduced_model_config, run_suite, summarize
from tempofuse.models import (MODEL_KINDS, BackboneConfig, ModelConfig, build_model, load_checkpoint,
                              save_checkpoint)
from tempofuse.nn import tensor as T
from tempofuse.pipeline import ChunkDataset, FeatureCache, extract_dataset, load_partition, model_inputs
from tempofuse.training import TrainConfig, fit, train

BIN_WIDTH = 60 * SR / 512 / 384


@pytest.fixture
def report(capsys):
    def emit(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
        assert ok, detail
    return emit


def test_criterion_1_chunking(report):
    t0 = time.perf_counter()
    clip = AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, 120 * SR), SR)
    mel = dsp.mel_spectrogram(clip).values
    chunks = F.chunk_time_axis(mel)
    discarded = mel.shape[1] - 200 * len(chunks)
    secs = time.perf_counter() - t0
    ok = (len(chunks) == 25 and all(c.shape == (128, 200) for c in chunks) and discarded == 168
          and secs < 5)
    report(1, "chunking arithmetic", ok,
           f"{mel.shape[1]} frames -> {len(chunks)} chunks, {discarded} discarded, {secs:.2f}s")


def test_criterion_2_tempogram_shapes(report):
    t0 = time.perf_counter()
    clip = click_track(128, 60, seed=1)
    rec = F.extract_record(clip, "s", 0, F.FeatureConfig())
    secs = time.perf_counter() - t0
    fshape, ashape = rec.fourier.shape, rec.autocorrelation.shape
    ok = (fshape[0] == 193 and abs(fshape[1] - 1293) <= 1 and ashape[0] == 384
          and abs(ashape[1] - 1292) <= 1 and secs < 10)
    report(2, "tempogram shapes", ok, f"fourier {fshape}, autocorrelation {ashape}, {secs:.2f}s")


def test_criterion_3_tempo_oracle(report):
    t0 = time.perf_counter()
    bpms = (90, 110, 120, 128, 140, 170)
    timbres = ("click", "noise-burst", "tone-burst")
    hits, misses = 0, []
    for bpm in bpms:
        for seed in range(10):
            clip = click_track(bpm, 30, seed=[bpm, seed], jitter=0.02, timbre=timbres[seed % 3])
            est = dsp.estimate_global_tempo(dsp.compute_features(clip).fourier)
            if abs(est - bpm) <= BIN_WIDTH:
                hits += 1
            else:
                misses.append(f"{bpm}->{est:.1f}")
    secs = time.perf_counter() - t0
    rate = hits / 60
    ok = rate >= 0.95 and secs < 120
    report(3, "tempo oracle", ok, f"{hits}/60 within {BIN_WIDTH:.2f} BPM, misses {misses or 'none'}, "
                                  f"{secs:.1f}s")


def test_criterion_4_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite(range(50), tolerance=1e-4)
    secs = time.perf_counter() - t0
    worst = summarize(results)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    kinds = {r.name for r in results}
    ok = (all(r.report.ok for r in results) and err < 1e-4 and secs < 300
          and {f"model:{k}" for k in MODEL_KINDS} | {f"layer:{n}" for n in LAYER_CASES} <= kinds)
    report(4, "gradient suite", ok,
           f"{len(results)} checks over 50 seeds, worst {name} {err:.2e}, {secs:.0f}s")


@pytest.fixture(scope="module")
def synthetic_corpus(tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("synthetic")
    manifest = synth_click_dataset(SyntheticSpec(), root / "audio")
    split = split_dataset(manifest, (8, 1, 1), seed=0)
    # 30 s songs cannot hold the 15-45 s window, so features span the whole clip.
    cache = FeatureCache(root / "cache", F.FeatureConfig(segment=None))
    extract_dataset(manifest, cache)
    return manifest, split, cache, time.perf_counter() - t0


def test_criterion_5_synthetic_classification(report, synthetic_corpus):
    manifest, split, cache, setup_secs = synthetic_corpus
    t0 = time.perf_counter()
    targets = {"ftg_only": 0.90, "late_fusion": 0.90, "early_fusion": 0.85}
    lines, ok = [], True
    for kind, target in targets.items():
        cfg = TrainConfig(kind=kind, batch_size=32, epochs=30, patience=3, target_accuracy=1.0, seed=0)
        model_cfg = ModelConfig(kind, backbone=BackboneConfig(n_blocks=2, channels=8))
        res = train(manifest, split, cache, cfg, model_cfg)
        ckpt = res.checkpoint
        test = load_partition(manifest, split, "test", cache, ckpt.stats, model_inputs(kind))
        acc = evaluate(ckpt.model, test).song_accuracy
        ok &= acc >= target and len(res.reports) <= 30
        lines.append(f"{kind} {acc:.3f} (>= {target}) in {len(res.reports)} epochs")
    secs = setup_secs + time.perf_counter() - t0
    ok &= secs < 1800
    report(5, "synthetic classification", ok,
           f"{len(split.songs('test'))} test songs; {'; '.join(lines)}; {secs:.0f}s")


def test_criterion_6_mechanisms(report):
    votes = (vote_song_predictions([4, 4, 2]) == 4 and vote_song_predictions([5]) == 5
             and vote_song_predictions([3, 1]) == 1)
    rng = np.random.default_rng(0)
    true = np.repeat(np.arange(30), rng.integers(1, 9, 30))
    pred = rng.integers(0, 30, true.size)
    cm = confusion_matrix(true, pred, 30)
    rows = np.array_equal(cm.counts.sum(axis=1), np.bincount(true, minlength=30))
    loss = T.cross_entropy(T.Tensor(np.full((7, 30), 0.37)), rng.integers(0, 30, 7)).item()
    ok = votes and rows and abs(loss - math.log(30)) < 1e-6
    report(6, "mechanism checks", ok, f"voting {votes}, row sums {rows}, uniform loss {loss:.9f}")


def toy_dataset(seed, offset=0):
    rng = np.random.default_rng(seed)
    song_labels = np.repeat(np.arange(3), 4)
    chunk_song = np.repeat(np.arange(12), 3)
    labels = song_labels[chunk_song]
    x = rng.standard_normal((36, 7, 16))
    x[np.arange(36), labels, :] += 1.5
    return ChunkDataset([f"s{offset + i}" for i in range(12)], song_labels, chunk_song, labels,
                        {"fourier": x})


def test_criterion_7_reproducibility(report, tmp_path):
    train_ds, valid_ds = toy_dataset(1), toy_dataset(2, 100)
    cfg = TrainConfig(kind="ftg_only", epochs=4, batch_size=6, lr=0.01, seed=11, patience=None)
    curves, blobs = [], []
    for i in range(2):
        res = fit(reduced_model_config("ftg_only", dtype="float32"), train_ds, valid_ds, cfg,
                  ["a", "b", "c"])
        curves.append(np.array([r.train_loss for r in res.reports]))
        save_checkpoint(res.checkpoint, tmp_path / f"{i}.tfck")
        blobs.append((tmp_path / f"{i}.tfck").read_bytes())
        model = res.checkpoint.model
    same_curve = np.all(np.abs(curves[0] - curves[1]) <= 1e-6 * np.abs(curves[0]))
    same_bytes = blobs[0] == blobs[1]
    back = load_checkpoint(tmp_path / "0.tfck")
    before = evaluate(model, valid_ds).scores
    after = evaluate(back.model, valid_ds).scores
    exact = before.tobytes() == after.tobytes()
    ok = bool(same_curve and same_bytes and exact)
    report(7, "reproducibility", ok,
           f"loss curve match {bool(same_curve)}, checkpoint bytes identical {same_bytes}, "
           f"round-trip eval bit-exact {exact}")


def test_criterion_8_gradient_flow(report):
    rng = np.random.default_rng(8)
    dead = {}
    for kind in ("early_fusion", "late_fusion"):
        model = build_model(ModelConfig(kind)).train()
        logits = model(rng.standard_normal((2, 128, 200)), rng.standard_normal((2, 193, 200)),
                       rng.standard_normal((2, 384, 200)))
        T.cross_entropy(logits, rng.integers(0, 30, 2)).backward()
        dead[kind] = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    ok = not any(dead.values())
    report(8, "gradient flow", ok, ", ".join(f"{k}: {len(v)} dead blocks" for k, v in dead.items()))
