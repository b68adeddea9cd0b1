"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run standalone with ``python3 tests/test_acceptance.py`` for just the
summary lines, or through pytest. Criteria 7 and 8 train the default
model six times on the default corpus and take most of an hour on one
CPU core; the runs are shared through a module-level cache.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass

import numpy as np
import pytest
from pystoi import stoi as reference_stoi

from avcrn import datagen, dsp, gradcheck, metrics, train
from avcrn import tensor as T
from avcrn.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from avcrn.model import ModelConfig
from avcrn.sta import StaUnit
from avcrn.tensor import Tensor

# Tolerances and budgets
SOFT_PAIRS = 100_000
SOFT_SECONDS = 5.0
N_MAPS = 1000
ZERO_INIT_TOL = 1e-12
GRAD_SECONDS = 120.0
N_GEOMETRIES = 100
ADJOINT_TOL = 1e-10
ROUND_TRIP_SNR_DB = 40.0
MIX_TOL_DB = 1e-6
STOI_TOL = 1e-6
STOI_NOISE_MAX = 0.25
CPU_MINUTES = 30.0
MIN_SISDR_GAIN_DB = 5.0
MIN_STOI_GAIN = 0.05
STOI_SLACK = 0.01
ABLATION_SEEDS = (0, 1, 2)
TRAIN_STEPS = 1000  # equal step budget for every arm and seed


@dataclass
class Outcome:
    ok: bool
    detail: str


def announce(number: int, title: str, outcome: Outcome) -> None:
    status = "PASS" if outcome.ok else "FAIL"
    print(f"\n[criterion {number}] {status}  {title}: {outcome.detail}", flush=True)


# -- 1: soft-threshold law ---------------------------------------------------------

def soft_threshold_law() -> Outcome:
    rng = np.random.default_rng(1)
    x = rng.standard_normal(SOFT_PAIRS) * rng.choice([1e-3, 1.0, 1e3], SOFT_PAIRS)
    tau = np.abs(rng.standard_normal(SOFT_PAIRS)) * rng.choice([0.0, 1e-3, 1.0, 1e3], SOFT_PAIRS)
    tau[:100] = np.abs(x[:100])  # exercise the |x| == tau boundary
    start = time.perf_counter()
    # tau varies per element, so each pair is its own 1-element map
    y = T.soft_threshold(Tensor(x.reshape(-1, 1, 1, 1)), Tensor(tau.reshape(-1, 1))).data.ravel()
    elapsed = time.perf_counter() - start
    piecewise = np.where(x > tau, x - tau, np.where(x < -tau, x + tau, 0.0))
    mismatched = int(np.count_nonzero(y != piecewise))  # exact float64 comparison
    shrink = int(np.count_nonzero(np.abs(y) > np.abs(x)))
    sign = int(np.count_nonzero(y * x < 0))
    dead = int(np.count_nonzero((y == 0) != (np.abs(x) <= tau)))
    ok = mismatched == shrink == sign == dead == 0 and elapsed < SOFT_SECONDS
    return Outcome(ok, f"{SOFT_PAIRS} pairs, mismatches {mismatched}, shrink {shrink}, sign {sign}, "
                       f"dead-zone {dead}, {elapsed:.3f} s")


# -- 2: threshold boundedness --------------------------------------------------------

def threshold_bounds() -> Outcome:
    rng = np.random.default_rng(2)
    violations, worst_zero = 0, 0.0
    for i in range(N_MAPS):
        c = int(rng.integers(1, 17))
        shape = (int(rng.integers(1, 4)), c, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        x = rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)
        unit = StaUnit(c, np.random.default_rng(i))
        for p in unit.parameters():
            p.data = rng.standard_normal(p.shape) * rng.uniform(0.1, 5.0)
        mean_abs = np.abs(x).mean(axis=(2, 3))
        _, tau = unit.threshold(Tensor(x))
        violations += int(np.count_nonzero((tau.data < 0) | (tau.data > mean_abs)))
        _, tau0 = unit.zero_().threshold(Tensor(x))
        rel = np.abs(tau0.data - 0.5 * mean_abs) / np.maximum(mean_abs, np.finfo(float).tiny)
        worst_zero = max(worst_zero, float(rel.max()))
    ok = violations == 0 and worst_zero <= ZERO_INIT_TOL
    return Outcome(ok, f"{N_MAPS} maps, bound violations {violations}, "
                       f"zero-init max rel deviation {worst_zero:.1e}")


# -- 3: gradient suite ---------------------------------------------------------------

def gradient_suite() -> Outcome:
    start = time.perf_counter()
    results = gradcheck.run_suite(0)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in results if not r.ok]
    op_max = max(r.rel_err for r in results if r.tol == gradcheck.OP_TOL)
    model_max = max(r.rel_err for r in results if r.tol == gradcheck.MODEL_TOL)
    ok = not failed and elapsed < GRAD_SECONDS
    return Outcome(ok, f"{len(results)} cases, op max {op_max:.1e} (< {gradcheck.OP_TOL:.0e}), "
                       f"model max {model_max:.1e} (< {gradcheck.MODEL_TOL:.0e}), failed {failed}, "
                       f"{elapsed:.1f} s")


# -- 4: adjointness ------------------------------------------------------------------

def adjointness() -> Outcome:
    rng = np.random.default_rng(4)
    worst, done = 0.0, 0
    while done < N_GEOMETRIES:
        b, ci, co = (int(v) for v in rng.integers(1, 5, 3))
        kf, kt = (int(v) for v in rng.integers(1, 6, 2))
        sf, st = (int(v) for v in rng.integers(1, 4, 2))
        pf, pt = int(rng.integers(0, kf)), int(rng.integers(0, kt))
        f, t = (int(v) for v in rng.integers(1, 13, 2))
        fo, to = (f + 2 * pf - kf) // sf + 1, (t + 2 * pt - kt) // st + 1
        if fo < 1 or to < 1:
            continue
        # rows/cols the stride never reaches come back through output padding
        opad = (f - ((fo - 1) * sf - 2 * pf + kf), t - ((to - 1) * st - 2 * pt + kt))
        x = rng.standard_normal((b, ci, f, t))
        k = rng.standard_normal((co, ci, kf, kt))
        y = rng.standard_normal((b, co, fo, to))
        lhs = np.sum(T.conv2d(Tensor(x), Tensor(k), None, (sf, st), (pf, pt)).data * y)
        rhs = np.sum(x * T.conv2d_transpose(Tensor(y), Tensor(k), None, (sf, st), (pf, pt), opad).data)
        worst = max(worst, abs(lhs - rhs))
        done += 1
    return Outcome(worst <= ADJOINT_TOL, f"{N_GEOMETRIES} geometries, max |<Ax,y> - <x,A'y>| = {worst:.2e}")


# -- 5: DSP contract -----------------------------------------------------------------

def dsp_contract() -> Outcome:
    rng = np.random.default_rng(5)
    x = datagen.synth_speech(5)[:3200]  # 200 ms
    spec = dsp.stft(x)
    mel = dsp.log_mel(spec)
    noise = rng.standard_normal(16000)
    y = dsp.istft(dsp.stft(noise), len(noise))
    inner = slice(640, -640)  # edges lack full window overlap
    snr = 10 * np.log10(np.sum(noise[inner] ** 2) / np.sum((noise - y)[inner] ** 2))
    clean = datagen.synth_speech(6)
    worst_mix = 0.0
    for target in (-10.0, -5.0, 0.0, 5.0, 10.0):
        mix = dsp.mix_at_snr(clean, datagen.synth_noise("pink", 1.0, 7, 24000), target, 8)
        worst_mix = max(worst_mix, abs(dsp.snr_db(clean, mix - clean) - target))
    ok = (len(x) == 3200 and spec.shape[1] == 20 and mel.shape == (80, 20)
          and snr > ROUND_TRIP_SNR_DB and worst_mix <= MIX_TOL_DB)
    return Outcome(ok, f"200 ms -> {spec.shape[1]} frames, log-Mel {mel.shape}, round trip "
                       f"{snr:.1f} dB, worst mix error {worst_mix:.1e} dB")


# -- 6: STOI sanity ------------------------------------------------------------------

def stoi_sanity() -> Outcome:
    rng = np.random.default_rng(6)
    x = datagen.synth_speech(9)
    y = x + 0.5 * np.std(x) * rng.standard_normal(len(x))
    identity = metrics.stoi(x, x)
    scale_dev = abs(metrics.stoi(x, 0.3 * y) - metrics.stoi(x, y))
    noise = rng.standard_normal(len(x))
    ours = metrics.stoi(x, noise)
    oracle = reference_stoi(x, noise, dsp.SAMPLE_RATE, extended=False)
    ok = abs(identity - 1.0) <= STOI_TOL and scale_dev <= STOI_TOL and ours < STOI_NOISE_MAX and oracle < STOI_NOISE_MAX
    return Outcome(ok, f"stoi(x,x)={identity:.7f}, scale deviation {scale_dev:.1e}, "
                       f"white noise {ours:.3f} (oracle {oracle:.3f})")


# -- shared training runs for 7 and 8 --------------------------------------------------

_CACHE: dict = {}


def default_corpus():
    if "corpus" not in _CACHE:
        corpus = datagen.build_corpus(datagen.SynthSpec())
        _CACHE["corpus"] = corpus
        _CACHE["chunks"] = (train.make_chunks(corpus["train"]), train.make_chunks(corpus["val"]))
    return _CACHE["corpus"], _CACHE["chunks"]


def training_run(sta: bool, seed: int) -> dict:
    key = ("run", sta, seed)
    if key not in _CACHE:
        corpus, (tr, va) = default_corpus()
        cfg = train.TrainConfig(model=ModelConfig(sta_enabled=sta, seed=seed), seed=seed,
                                max_steps=TRAIN_STEPS, max_epochs=10_000)
        cpu = time.process_time()
        result = train.train(cfg, tr, va)
        cpu = time.process_time() - cpu
        report = metrics.evaluate_corpus(result.checkpoint.model, corpus["test"])
        _CACHE[key] = {"result": result, "report": report, "cpu_s": cpu}
        arm = "+STA" if sta else "-STA"
        print(f"\n  run {arm} seed {seed}: best val {result.best_val:.4f}, cpu {cpu / 60:.1f} min",
              flush=True)
    return _CACHE[key]


def mean_stoi(report: metrics.Report) -> float:
    rows = [r for r in report.rows if r.condition.endswith("/all")]
    return float(np.average([r.stoi_enh for r in rows], weights=[r.n for r in rows]))


def toy_enhancement() -> Outcome:
    corpus, _ = default_corpus()
    run = training_run(True, 0)
    row = run["report"].row(f"{metrics.snr_label(0.0)}/all")
    sisdr_gain = row.sisdr_enh - row.sisdr_noisy
    stoi_gain = row.stoi_enh - row.stoi_noisy
    minutes = run["cpu_s"] / 60
    ok = (len(corpus["train"]) >= 500 and minutes <= CPU_MINUTES
          and sisdr_gain >= MIN_SISDR_GAIN_DB and stoi_gain >= MIN_STOI_GAIN)
    return Outcome(ok, f"{len(corpus['train'])} train utterances, {TRAIN_STEPS} steps in {minutes:.1f} "
                       f"CPU-min; 0 dB test (n={row.n}): SI-SDR {row.sisdr_noisy:.2f} -> {row.sisdr_enh:.2f} dB "
                       f"(+{sisdr_gain:.2f}), STOI {row.stoi_noisy:.3f} -> {row.stoi_enh:.3f} (+{stoi_gain:.3f})")


def ablation_ordering() -> Outcome:
    val = {sta: [training_run(sta, s)["result"].best_val for s in ABLATION_SEEDS] for sta in (True, False)}
    stoi = {sta: [mean_stoi(training_run(sta, s)["report"]) for s in ABLATION_SEEDS] for sta in (True, False)}
    v_sta, v_base = float(np.median(val[True])), float(np.median(val[False]))
    s_sta, s_base = float(np.median(stoi[True])), float(np.median(stoi[False]))
    ok = v_sta <= v_base and s_sta >= s_base - STOI_SLACK
    fmt = lambda xs: "/".join(f"{v:.4f}" for v in xs)  # noqa: E731
    return Outcome(ok, f"median val loss +STA {v_sta:.4f} vs -STA {v_base:.4f} "
                       f"(per seed {fmt(val[True])} vs {fmt(val[False])}); median test STOI "
                       f"+STA {s_sta:.4f} vs -STA {s_base:.4f}")


# -- 9: determinism and persistence ------------------------------------------------------

def determinism_and_persistence(tmp_dir) -> Outcome:
    spec = datagen.SynthSpec(n_train=16, n_val=4, n_test=1, video_dim=8, seed=9)
    corpus = datagen.build_corpus(spec)
    tr, va = train.make_chunks(corpus["train"]), train.make_chunks(corpus["val"])
    small = dict(enc_channels=[8, 16], lstm_hidden=32, video_dim=8)

    def run(max_steps, out=None, max_epochs=10_000):
        cfg = train.TrainConfig(model=ModelConfig(**small), batch_size=8, max_steps=max_steps,
                                max_epochs=max_epochs, seed=3)
        return train.train(cfg, tr, va, out_dir=out)

    a, b = run(10), run(10)
    trace_equal = [v for _, v in a.trace] == [v for _, v in b.trace] and len(a.trace) == 10

    back = load_checkpoint(save_checkpoint(a.checkpoint))
    noisy, video = tr.noisy[:8], tr.video[:8]
    forward_equal = back.model.forward(noisy, video).tobytes() == a.checkpoint.model.forward(noisy, video).tobytes()

    # interrupt a run during its second validation; the first best checkpoint must survive
    real, calls = train.evaluate_loss, {"n": 0}

    def interrupting(model, data):
        calls["n"] += 1
        if calls["n"] == 2:
            raise KeyboardInterrupt
        return real(model, data)
    train.evaluate_loss = interrupting
    try:
        run(None, tmp_dir, max_epochs=3)
        interrupted = False
    except KeyboardInterrupt:
        interrupted = True
    finally:
        train.evaluate_loss = real
    try:
        readable = read_checkpoint(tmp_dir / "best.ckpt").extra.get("epoch") == 0
    except (OSError, ValueError):
        readable = False
    ok = trace_equal and forward_equal and interrupted and readable
    return Outcome(ok, f"10-step trace identical {trace_equal}, checkpoint forward bitwise {forward_equal}, "
                       f"checkpoint after interruption readable {readable}")


CRITERIA = {
    1: ("soft-threshold law", soft_threshold_law),
    2: ("threshold boundedness", threshold_bounds),
    3: ("gradient suite", gradient_suite),
    4: ("conv adjointness", adjointness),
    5: ("DSP contract", dsp_contract),
    6: ("STOI sanity", stoi_sanity),
    7: ("toy enhancement", toy_enhancement),
    8: ("ablation ordering", ablation_ordering),
}


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, capsys):
    title, fn = CRITERIA[number]
    outcome = fn()
    with capsys.disabled():
        announce(number, title, outcome)
    assert outcome.ok, outcome.detail


def test_criterion_9(tmp_path, capsys):
    outcome = determinism_and_persistence(tmp_path)
    with capsys.disabled():
        announce(9, "determinism and persistence", outcome)
    assert outcome.ok, outcome.detail


if __name__ == "__main__":
    import tempfile
    from pathlib import Path

    failures = 0
    for number, (title, fn) in sorted(CRITERIA.items()):
        outcome = fn()
        announce(number, title, outcome)
        failures += not outcome.ok
    with tempfile.TemporaryDirectory() as d:
        outcome = determinism_and_persistence(Path(d))
    announce(9, "determinism and persistence", outcome)
    failures += not outcome.ok
    sys.exit(1 if failures else 0)
