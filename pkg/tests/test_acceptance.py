"""Acceptance criteria, one printed PASS/FAIL line each.

The toy training runs (criteria 6 to 8) take a few minutes each; they are
shared through a module fixture and run once per session.
"""

import time

import numpy as np
import pytest

from gunet import gradcheck
from gunet.arch import ModelConfig, build_gunet, fold_network, forward_dehaze
from gunet.cost import count_macs, count_params
from gunet.haze import HazeParams, depth_map, generate_dataset, invert_haze, psnr, synthesize_haze
from gunet.tensor import no_grad
from gunet.train import TrainConfig, evaluate, train_loop, write_metrics

REFERENCE = {  # params (M), MACs at 256x256 (G)
    "T": (0.805, 2.595),
    "S": (1.408, 4.579),
    "B": (2.614, 8.548),
    "D": (5.025, 16.48),
}
NINE_STAGE_PARAMS = 3.150

MICRO = ModelConfig(base_blocks=1, base_width=8, n_stages=5)
# 50 epochs x 40 steps = 2000 steps; crops of the 64x64 pairs keep each run to a few minutes
TOY = dict(epochs=50, samples_per_epoch=320, batch_size=8, crop=32, warmup_epochs=3,
           frozen_bn_epochs=10, seed=0)


def rel(a, b):
    return a / b - 1


# --------------------------------------------------------------------------
# 1. absolute costs
# --------------------------------------------------------------------------

@pytest.mark.parametrize("preset", list(REFERENCE))
def test_c1_cost_absolute(preset, accept):
    t0 = time.perf_counter()
    cfg = ModelConfig.preset(preset)
    p, m = count_params(cfg) / 1e6, count_macs(cfg, (256, 256)) / 1e9
    dt = time.perf_counter() - t0
    rp, rm = REFERENCE[preset]
    ok = abs(rel(p, rp)) <= 0.10 and abs(rel(m, rm)) <= 0.10 and dt < 1.0
    assert accept(f"C1 cost {preset}", ok,
                  f"params {p:.3f}M vs {rp} ({rel(p, rp):+.1%}), MACs {m:.3f}G vs {rm} "
                  f"({rel(m, rm):+.1%}), {dt * 1e3:.0f} ms")


# --------------------------------------------------------------------------
# 2. cost ratios and orderings
# --------------------------------------------------------------------------

def test_c2_cost_ratios(accept):
    T = ModelConfig.preset("T")
    v = lambda **kw: ModelConfig.preset("T", **kw)  # noqa: E731
    s_t = count_params(ModelConfig.preset("S")) / count_params(T)
    k7_k5 = count_params(v(dw_kernel=7)) / count_params(T)
    macs_k = [count_macs(v(dw_kernel=k)) for k in (3, 5, 7)]
    params_st = [count_params(v(n_stages=n)) for n in (5, 7, 9)]
    macs_fu = [count_macs(v(fusion_kind=f)) for f in ("sum", "sk", "concat")]
    checks = {
        "S/T": abs(rel(s_t, 1.749)) <= 0.05,
        "k7/k5": abs(rel(k7_k5, 1.041)) <= 0.03,
        "MACs k3<k5<k7": macs_k[0] < macs_k[1] < macs_k[2],
        "params 5<7<9 stages": params_st[0] < params_st[1] < params_st[2],
        "MACs sum<sk<concat": macs_fu[0] < macs_fu[1] < macs_fu[2],
    }
    nine = params_st[2] / 1e6
    ok = all(checks.values())
    accept("C2 cost ratios", ok,
           f"S/T {s_t:.3f} (1.749), k7/k5 {k7_k5:.4f} (1.041), "
           + ", ".join(f"{k} {'ok' if c else 'NO'}" for k, c in list(checks.items())[2:])
           + f"; 9-stage {nine:.3f}M vs {NINE_STAGE_PARAMS} ({rel(nine, NINE_STAGE_PARAMS):+.1%})")
    assert ok, checks


# --------------------------------------------------------------------------
# 3. gradients
# --------------------------------------------------------------------------

def test_c3_gradients(accept):
    t0 = time.perf_counter()
    ops = gradcheck.run_ops(tol=1e-4)
    model = gradcheck.run_model(tol=1e-3, size=16)
    dt = time.perf_counter() - t0
    bad = [r for r in ops + model if not r.ok]
    ok = not bad and dt < 300
    accept("C3 gradients", ok,
           f"{len(ops)} op checks max rel {max(r.rel_err for r in ops):.1e} (<1e-4), "
           f"{len(model)} model params max rel {max(r.rel_err for r in model):.1e} (<1e-3), {dt:.0f} s")
    assert ok, "\n".join(r.line() for r in bad)


# --------------------------------------------------------------------------
# 4. batch-norm folding
# --------------------------------------------------------------------------

def test_c4_bn_fold(accept):
    net, store = build_gunet(ModelConfig.preset("T"), seed=0, dtype="single", head_init="random")
    rng = np.random.default_rng(0)
    for st in store.norms.values():
        C = st.channels
        st.running_mean[:] = rng.normal(0, 0.5, C)
        st.running_var[:] = rng.uniform(0.25, 4, C)
        st.gamma.data[:] = rng.normal(1, 0.2, C)
        st.beta.data[:] = rng.normal(0, 0.2, C)
    net.set_norm_mode("eval")
    folded = fold_network(net)
    worst = 0.0
    with no_grad():
        for i in range(20):
            x = rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)
            a = forward_dehaze(net, x).data
            b = forward_dehaze(folded, x).data
            worst = max(worst, float(np.max(np.abs(a - b))))
    ok = worst < 1e-4
    assert accept("C4 BN fold", ok, f"max |folded - unfolded| {worst:.2e} over 20 inputs (<1e-4, single)")


# --------------------------------------------------------------------------
# 5. haze round trip
# --------------------------------------------------------------------------

def haze_roundtrip(seed=0, n=100, size=32, t_floor=0.05):
    rng = np.random.default_rng(seed)
    worst, beta0_exact, digest = 0.0, True, []
    for i in range(n):
        J = rng.uniform(0, 1, (3, size, size))
        p = HazeParams(rng.uniform(0.7, 1.0, 3), float(rng.uniform(0.5, 2.0)),
                       depth_map(rng, size, ("ramp", "radial", "perlin")[i % 3]))
        raw = synthesize_haze(J, p, clamp=False)
        hazy = synthesize_haze(J, p)
        back = invert_haze(hazy, p, t_floor)
        t = p.transmission()[None]
        # clamping binds when the hazy value left [0, 1], t fell below the floor,
        # or the recovered value hit the output clamp
        free = (raw == hazy) & (t >= t_floor) & (J > 0) & (J < 1)
        worst = max(worst, float(np.max(np.abs(back - J)[free])))
        p0 = HazeParams(p.A, 0.0, p.depth)
        h0 = synthesize_haze(J, p0)
        beta0_exact &= h0.tobytes() == J.tobytes() and invert_haze(h0, p0).tobytes() == J.tobytes()
        digest.append(hazy.tobytes())
    return worst, beta0_exact, digest


def test_c5_haze_roundtrip(accept):
    worst, exact, _ = haze_roundtrip()
    ok = worst < 1e-5 and exact
    assert accept("C5 haze round trip", ok,
                  f"max error {worst:.1e} on 100 images (<1e-5), beta=0 bit-exact: {exact}")


# --------------------------------------------------------------------------
# 6-8. toy training
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    train = generate_dataset(200, 64, seed=0)
    val = generate_dataset(32, 64, seed=1)
    out = tmp_path_factory.mktemp("toy")
    runs = {}
    for ghost in (8, 1):
        for rep in (0, 1):
            net, store = build_gunet(MICRO, seed=0)
            t0 = time.perf_counter()
            _, rows = train_loop(net, store, train, TrainConfig(**TOY, ghost_norm_size=ghost), val=val)
            runs[ghost, rep] = {
                "rows": rows,
                "seconds": time.perf_counter() - t0,
                "log": write_metrics(rows, out / f"g{ghost}_r{rep}.csv").read_bytes(),
                "params": b"".join(a.tobytes() for a in store.arrays().values()),
            }
    return {"train": train, "val": val, "runs": runs}


def test_c6_toy_training(toy, accept):
    val = toy["val"]
    hazy_psnr = float(np.mean([psnr(p.hazy, p.clean) for p in val]))
    net, _ = build_gunet(MICRO, seed=0)
    net.set_norm_mode("eval")
    untrained, _ = evaluate(net, [(p.clean, p.hazy) for p in val], np.float64)
    run = toy["runs"][8, 0]
    final = run["rows"][-1]["val_psnr"]
    gain = final - hazy_psnr
    ok = gain >= 5.0 and untrained == hazy_psnr and run["seconds"] < 1800
    assert accept("C6 toy training", ok,
                  f"hazy {hazy_psnr:.3f} dB, untrained {untrained:.3f} dB (equal: {untrained == hazy_psnr}), "
                  f"trained {final:.3f} dB, gain {gain:+.2f} dB (>=5), "
                  f"{run['rows'][-1]['step']} steps in {run['seconds']:.0f} s")


def test_c7_norm_batch_trend(toy, accept):
    r8, r1 = toy["runs"][8, 0]["rows"], toy["runs"][1, 0]["rows"]
    p8, p1 = r8[-1]["val_psnr"], r1[-1]["val_psnr"]
    # last epoch before the frozen-statistics phase, for context
    pre = TOY["epochs"] - TOY["frozen_bn_epochs"] - 1
    ok = p1 <= p8 - 0.5
    assert accept("C7 norm batch size", ok,
                  f"final val PSNR ghost1 {p1:.3f} vs ghost8 {p8:.3f} dB (need ghost1 <= ghost8 - 0.5); "
                  f"before FrozenBN: {r1[pre]['val_psnr']:.3f} vs {r8[pre]['val_psnr']:.3f} dB")


def test_c8_determinism(toy, accept):
    runs = toy["runs"]
    same_logs = all(runs[g, 0]["log"] == runs[g, 1]["log"] for g in (8, 1))
    same_params = all(runs[g, 0]["params"] == runs[g, 1]["params"] for g in (8, 1))
    same_haze = haze_roundtrip()[2] == haze_roundtrip()[2]
    regen = generate_dataset(200, 64, seed=0)
    same_data = all(a.hazy.tobytes() == b.hazy.tobytes() for a, b in zip(regen, toy["train"]))
    ok = same_logs and same_params and same_haze and same_data
    assert accept("C8 determinism", ok,
                  f"metrics logs identical {same_logs}, final params identical {same_params}, "
                  f"haze round trip identical {same_haze}, dataset identical {same_data}")
