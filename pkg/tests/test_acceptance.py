"""Acceptance gate: one PASS/FAIL line per criterion, also echoed in the terminal summary."""

import numpy as np
import pytest
import torch
from scipy import stats

import oracles
from test_cli import TINY_YAML
from windtunnel.cli import main
from windtunnel.denoiser import ModelConfig, batch_loss, gradients, init
from windtunnel.diffusion import AnalyticGaussianDenoiser, draw_sample, make_schedule, sample
from windtunnel.evaluation import annualized_return, market_ranking, max_drawdown, run_ablation, sharpe
from windtunnel.experiments import enhancement_experiment, transfer_experiment, whatif_experiment
from windtunnel.market_data import block_labels, synth_factor_panel, to_returns
from windtunnel.retrieval import RetrievalQuery, build_observation, dtw, pearson, similar_stocks

N_RANDOM = 1000


# 1. metric oracles --------------------------------------------------------------


def test_c1_metric_oracles(gate):
    rng = np.random.default_rng(2024)
    worst = {k: 0.0 for k in ("pearson", "dtw", "market_ranking", "annualized_return", "max_drawdown", "sharpe")}
    for _ in range(N_RANDOM):
        n = int(rng.integers(3, 12))
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        worst["pearson"] = max(worst["pearson"], abs(pearson(a, b) - oracles.pearson(a.tolist(), b.tolist())))

        u, v = rng.standard_normal(int(rng.integers(1, 10))), rng.standard_normal(int(rng.integers(1, 10)))
        worst["dtw"] = max(worst["dtw"], abs(dtw(u, v) - oracles.dtw(u.tolist(), v.tolist())))

        real, gen = rng.standard_normal(n), rng.standard_normal(n)
        uni = [rng.standard_normal(n) for _ in range(int(rng.integers(1, 15)))]
        got = market_ranking(real, gen, {f"u{i}": x for i, x in enumerate(uni)})
        want = oracles.market_ranking(real.tolist(), gen.tolist(), [x.tolist() for x in uni])
        worst["market_ranking"] = max(worst["market_ranking"], abs(got - want))

        nav = np.cumprod(1 + rng.uniform(-0.1, 0.1, n))
        ppy = int(rng.choice([12, 52, 252, 1764]))
        worst["annualized_return"] = max(
            worst["annualized_return"],
            abs(annualized_return(nav, ppy) - oracles.annualized_return(nav.tolist(), ppy)),
        )
        worst["max_drawdown"] = max(worst["max_drawdown"], abs(max_drawdown(nav) - oracles.max_drawdown(nav.tolist())))
        r = rng.normal(0.001, 0.02, n)
        worst["sharpe"] = max(worst["sharpe"], abs(sharpe(r, ppy) - oracles.sharpe(r.tolist(), ppy)))
    ok = all(v <= 1e-9 for v in worst.values())
    gate("C1 metric oracles", ok, ", ".join(f"{k} max err {v:.1e}" for k, v in worst.items()) + f" over {N_RANDOM} inputs")


# 2. gradient fidelity -------------------------------------------------------------


def test_c2_gradient_fidelity(gate):
    rng = np.random.default_rng(7)
    conds = [
        build_observation(rng.standard_normal(16), [(rng.standard_normal(16), rng.standard_normal(4)) for _ in range(2)],
                          4, target_future=rng.standard_normal(4))
        for _ in range(4)
    ]
    batch = draw_sample(conds, make_schedule(20, 1e-3, 0.2), np.random.default_rng(0), 4)
    net = init(ModelConfig(layers=2, heads=2, d_model=8, step_embed_dim=8, K=2, history_len=16, T=4, seed=0),
               torch.float64)
    _, grads = gradients(net, batch)
    params = dict(net.named_parameters())
    names = sorted(params)
    eps = 1e-4
    rel = []
    for _ in range(500):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = batch_loss(net, batch).item()
            p[idx] = orig - eps
            dn = batch_loss(net, batch).item()
            p[idx] = orig
        fd = (up - dn) / (2 * eps)
        an = grads[name][idx].item()
        # key biases have an exactly zero gradient (softmax ignores a shared shift) and central
        # differences resolve nothing below about ulp(loss) / 2h, so the denominator is floored
        rel.append(abs(an - fd) / max(abs(an), abs(fd), 1e-7))
    share = float(np.mean(np.array(rel) < 1e-4))
    gate("C2 gradient fidelity", share >= 0.99, f"{share:.1%} of 500 coordinates within 1e-4 relative error")


# 3. diffusion sanity --------------------------------------------------------------


def test_c3_diffusion_sanity(gate):
    sched = make_schedule(100)
    cond = build_observation(np.array([0.0, 1.0, -1.0, 0.0]), [], 1)
    z = cond.normalize_target(sample(cond, AnalyticGaussianDenoiser(sched), sched, 0, 10_000)[:, 0])
    m, v, ks = abs(z.mean()), abs(z.var() - 1), stats.kstest(z, "norm").statistic
    gate("C3 diffusion sanity", m < 0.05 and v < 0.1 and ks < 0.05, f"|mean| {m:.4f}, |var-1| {v:.4f}, KS {ks:.4f}")


# 4. retrieval correctness ---------------------------------------------------------


def test_c4_retrieval_precision(gate):
    factor_vol = 0.02
    rp = to_returns(synth_factor_panel(60, 300, 6, 11, 0.1 * factor_vol, factor_vol))
    labels = block_labels(60, 6)
    rng = np.random.default_rng(0)
    precisions = []
    for _ in range(100):
        s = int(rng.integers(60))
        t = int(rng.integers(60, rp.n_timestamps - 5))
        got = similar_stocks(RetrievalQuery(rp.symbols[s], t, history_len=60, T=5, K=8), rp)
        precisions.append(np.mean([labels[rp.index_of(g)] == labels[s] for g in got]))
    p = float(np.mean(precisions))
    gate("C4 retrieval precision", p >= 0.9, f"mean precision {p:.3f} over 100 queries (K=8)")


# 5. ablation ordering -------------------------------------------------------------


@pytest.mark.slow
def test_c5_ablation_ordering(gate):
    lines, ok = [], True
    for seed in range(3):
        rp = to_returns(synth_factor_panel(60, 400, 6, seed, 0.002, 0.02))
        cells = run_ablation(rp, ["excess_return_correlation", "random", "none"], ["fwt"], seed=seed)
        mr = {c.method: c.market_ranking for c in cells}
        corr, rand, none = mr["excess_return_correlation"], mr["random"], mr["none"]
        good = corr > rand > none and corr - none >= 0.15
        ok &= good
        lines.append(f"seed {seed}: corr {corr:.3f} random {rand:.3f} none {none:.3f}")
    gate("C5 ablation ordering", ok, "; ".join(lines))


# 6. what-if directionality --------------------------------------------------------


@pytest.mark.slow
def test_c6_whatif_volatility(gate):
    ratios = [whatif_experiment(seed)["ratio"] for seed in range(3)]
    gate("C6 what-if directionality", all(r >= 1.2 for r in ratios), "vol ratios " + ", ".join(f"{r:.2f}" for r in ratios))


# 7. transfer direction ------------------------------------------------------------


@pytest.mark.slow
def test_c7_transfer_direction(gate):
    wins, lines = 0, []
    for seed in range(3):
        r = transfer_experiment(seed)
        wins += r["fine_tuned"] >= r["zero_shot"] and r["fine_tuned"] >= r["from_scratch"]
        lines.append(f"seed {seed}: fine {r['fine_tuned']:.3f} zero {r['zero_shot']:.3f} scratch {r['from_scratch']:.3f}")
    gate("C7 transfer direction", wins >= 2, f"{wins}/3 seeds; " + "; ".join(lines))


# 8. enhancement direction ---------------------------------------------------------


@pytest.mark.slow
def test_c8_enhancement_direction(gate):
    wins, lines = 0, []
    for seed in range(10):
        sh = enhancement_experiment(seed)["sharpe"]
        wins += sh["10x"] >= sh["0x"]
        lines.append(f"{sh['0x']:.2f}->{sh['10x']:.2f}")
    gate("C8 enhancement direction", wins >= 7, f"{wins}/10 seeds; sharpe 0x->10x " + " ".join(lines))


# 9. determinism -------------------------------------------------------------------


def _snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


def test_c9_cli_determinism(gate, tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(TINY_YAML)
    rows = ["timestamp,symbol,close"] + [
        f"2024-01-{d:02d},{s},{100 + d * (i + 1) % 7}" for d in range(1, 29) for i, s in enumerate(("AAA", "BBB", "CCC"))
    ]
    (tmp_path / "in.csv").write_text("\n".join(rows) + "\n")
    panel, model = tmp_path / "data" / "panel.fwtp", tmp_path / "train" / "model.fwtc"
    c = ["--config", cfg]
    runs = {
        "ingest": ["ingest", *c, "--csv", tmp_path / "in.csv"],
        "data": ["synth-data", *c],
        "other": ["synth-data", *c, "--market", "OTHER", "--seed", "4"],
        "train": ["train", *c, "--panel", panel],
        "gen": ["generate", *c, "--panel", panel, "--checkpoint", model],
        "eval": ["evaluate", *c, "--panel", panel, "--checkpoint", model],
        "whatif": ["whatif", *c, "--panel", panel, "--checkpoint", model],
        "cross": ["cross-market", *c, "--panel", panel, "--source-panel", tmp_path / "other" / "panel.fwtp",
                  "--checkpoint", model],
        "ablate": ["ablate", *c, "--panel", panel],
        "sens": ["sensitivity", *c, "--panel", panel],
        "opt": ["optimize", *c, "--panel", panel, "--checkpoint", model],
    }
    first = {}
    for key, argv in runs.items():
        out = tmp_path / key
        assert main([str(a) for a in argv] + ["--out", str(out)]) == 0, key
        first[key] = _snapshot(out)
    diffs = []
    for key, argv in runs.items():
        out = tmp_path / key
        # a rerun needs nothing but the resolved config written by the first run
        assert main([argv[0], "--config", str(out / "config.yaml")]) == 0, key
        again = _snapshot(out)
        diffs += [f"{key}/{name}" for name in first[key] if again.get(name) != first[key][name]]
        diffs += [f"{key}/{name} (new)" for name in again if name not in first[key]]
    n_files = sum(len(v) for v in first.values())
    gate("C9 CLI determinism", not diffs, f"{n_files} files over {len(runs)} runs" + (f"; differing: {diffs}" if diffs else " byte-identical"))
