"""Acceptance criteria 1-10, each reported as one PASS/FAIL line."""

import time

import numpy as np
import pytest
import torch

import oracles
from test_training import loss_terms, tiny_setup
from stepstone.cli import ingress_examples
from stepstone.features import interval_features
from stepstone.metrics import (auc_score, chain_report, chainlen_accuracy, majority_baseline,
                               max_tpr_at_fpr, pauc, roc_curve)
from stepstone.model.chainlen import ChainLenConfig, chainlen_forward, train_chainlen
from stepstone.model.fen import FEN, FenConfig
from stepstone.model.losses import mine_batch_all, mine_batch_hard
from stepstone.model.training import TrainConfig, fit_bundle, untrained_bundle
from stepstone.obfuscation import DELAY_PROFILES, apply_delays, obfuscate, plan_padding
from stepstone.simulator import PROTOCOLS, SimConfig, generate_chains
from stepstone.traffic import DOWN, UP, Trace

pytestmark = pytest.mark.slow


# --- 1 ---------------------------------------------------------------------------------

def test_c1_shapes(acceptance):
    t0 = time.perf_counter()
    cfg = FenConfig()
    fen = FEN(cfg).eval()
    with torch.no_grad():
        emb, _ = fen(torch.rand(1, 9, 1200) * 10)
    span = cfg.window_span(0.030)
    elapsed = time.perf_counter() - t0
    ok = tuple(emb.shape[1:]) == (117, 64) and abs(span - 4.5) < 1e-12 and elapsed < 5
    assert acceptance(1, ok, f"windows={tuple(emb.shape[1:])} span={span:.3f}s "
                             f"time={elapsed:.2f}s")


# --- 2 ---------------------------------------------------------------------------------

def test_c2_gradients(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for name, (_, term) in loss_terms().items():
        errs = []
        for seed in range(3):
            fen, head, xa, xp, la, lp = tiny_setup(chain_token=name == "joint", seed=seed)
            params = list(fen.parameters()) + (list(head.parameters()) if head else [])
            errs.append(oracles.max_rel_grad_error(
                lambda: term(fen, head, xa, xp, la, lp), params, n_dirs=40, seed=seed))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 120
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    assert acceptance(2, ok, f"max rel err {detail} time={elapsed:.1f}s")


# --- 3 ---------------------------------------------------------------------------------

def test_c3_mining(acceptance):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for trial in range(100):
        b = int(rng.integers(2, 9))
        w, d = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        a = torch.from_numpy(rng.normal(size=(b, w, d)))
        p = torch.from_numpy(rng.normal(size=(b, w, d)))
        if trial % 10 == 0:
            p = a.clone()  # duplicates produce exact ties
        margin = float(rng.choice([0.1, 0.5, 1.0]))
        mismatches += mine_batch_hard(a, p).tolist() != oracles.batch_hard(a.numpy(), p.numpy())
        mismatches += mine_batch_all(a, p, margin) != oracles.batch_all(a.numpy(), p.numpy(),
                                                                        margin)
    assert acceptance(3, mismatches == 0, f"100 batches, mismatches={mismatches}")


# --- 4 ---------------------------------------------------------------------------------

def test_c4_metric_oracles(acceptance):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        scores = rng.random(n)
        if rng.random() < 0.5:
            scores = np.round(scores, 1)
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[0], labels[-1] = True, False
        roc = roc_curve(scores, labels)
        pts = oracles.roc_points(scores, labels)
        worst = max(worst, np.abs(roc.fpr - [f for _, _, f in pts]).max(),
                    np.abs(roc.tpr - [t for _, t, _ in pts]).max())
        for tau in (1e-3, 0.01, 0.1, 0.5, 1.0):
            worst = max(worst, abs(max_tpr_at_fpr(roc, tau) - oracles.max_tpr(pts, tau)),
                        abs(pauc(roc, tau) - oracles.pauc(pts, tau)))
    perfect = roc_curve([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0])
    perfect_ok = all(abs(pauc(perfect, t) - 1.0) <= 1e-12 for t in (1e-5, 1e-3, 0.3))
    n = 2000
    diag = roc_curve(np.repeat(np.arange(n), 2), np.tile([True, False], n))
    diag_err = max(abs(pauc(diag, t) - t / 2) for t in (1e-3, 0.01, 0.2))
    ok = worst <= 1e-9 and perfect_ok and diag_err <= 1e-9
    assert acceptance(4, ok, f"max |diff| vs oracle={worst:.1e} perfect pauc=1: {perfect_ok} "
                             f"diagonal pauc-tau/2={diag_err:.1e}")


# --- 5 and 7: smoke training ------------------------------------------------------------

SMOKE_EPOCHS = 8


@pytest.fixture(scope="module")
def smoke(burst_model):
    t0 = time.perf_counter()
    sim = SimConfig(protocol_mode="socat", jitter_fraction=0.02)
    chains = generate_chains(sim, 350, 1234, burst_model)
    train, test = chains[:300], chains[300:]
    feats = lambda trs: np.stack([interval_features(t).data for t in trs]).astype(np.float32)
    xa, xp = feats([c.attacker for c in train]), feats([c.target for c in train])
    ta, tp = feats([c.attacker for c in test]), feats([c.target for c in test])
    bundle = fit_bundle(xa, xp, TrainConfig(epochs=SMOKE_EPOCHS, batch_size=64),
                        FenConfig.toy(), val=(ta, tp))
    return {"bundle": bundle, "test": test, "ta": ta, "tp": tp, "feats": feats,
            "time": time.perf_counter() - t0}


def matrix_auc(bundle, xa, xp):
    s = bundle.score_matrix(bundle.embed(xa), bundle.embed(xp))
    return auc_score(s.ravel(), np.eye(len(xa), dtype=bool).ravel())


def test_c5_smoke_training(acceptance, smoke):
    trained = matrix_auc(smoke["bundle"], smoke["ta"], smoke["tp"])
    # an untrained network's head is an arbitrary function of the similarity
    # profile, so its AUC is averaged over initialisations
    untrained = [matrix_auc(untrained_bundle(FenConfig.toy(), seed=s), smoke["ta"], smoke["tp"])
                 for s in range(10)]
    mean_u = float(np.mean(untrained))
    ok = trained >= 0.90 and 0.4 <= mean_u <= 0.6 and smoke["time"] < 15 * 60
    assert acceptance(5, ok, f"test AUC={trained:.4f} untrained AUC mean over 10 inits="
                             f"{mean_u:.3f} (seed 0: {untrained[0]:.3f}, range "
                             f"{min(untrained):.3f}-{max(untrained):.3f}) "
                             f"train time={smoke['time']:.0f}s")


def test_smoke_identical_beats_unrelated(smoke):
    b = smoke["bundle"]
    e = b.embed(smoke["tp"])
    rng = np.random.default_rng(0)
    wins = 0
    for _ in range(200):
        i, j = rng.choice(len(e), 2, replace=False)
        same = b.score_embeddings(e[i:i + 1], e[i:i + 1])[0]
        other = b.score_embeddings(e[i:i + 1], e[j:j + 1])[0]
        wins += same > other
    assert wins / 200 >= 0.95


def test_c7_obfuscation_ordering(acceptance, smoke):
    b, test, tp = smoke["bundle"], smoke["test"], smoke["tp"]

    def auc_under(seed, **kw):
        rng = np.random.default_rng(seed)
        xa = smoke["feats"]([obfuscate(c.attacker, rng, **kw) for c in test])
        return matrix_auc(b, xa, tp)

    clean = matrix_auc(b, smoke["ta"], tp)
    padded = auc_under(1, overhead_pct=100)
    # the delay profiles are evaluated on top of 100% padding
    heavy = auc_under(2, overhead_pct=100, profile="heavy")
    delay_only = auc_under(3, profile="heavy")
    ok = clean - padded >= 0.02 and padded - heavy >= 0.02
    print(f"note: heavy delays without padding give AUC {delay_only:.4f}")
    assert acceptance(7, ok, f"clean={clean:.4f} pad100={padded:.4f} "
                             f"pad100+heavy={heavy:.4f} (delay only {delay_only:.4f})")


# --- 6 ---------------------------------------------------------------------------------

def test_c6_obfuscation_statistics(acceptance, burst_model):
    chains = generate_chains(SimConfig(), 200, 606, burst_model)
    flows = [c.attacker for c in chains]
    rng = np.random.default_rng(6)
    planned, kept, original = [], [], []
    sorted_ok = multiset_ok = True
    for tr in flows:
        plan = plan_padding(tr, 100, rng)
        planned.append(plan.n_dummy)
        kept.append(len(plan))
        original.append(len(tr))
        out = apply_delays(tr, DELAY_PROFILES["heavy"], rng)
        sorted_ok &= bool(np.all(np.diff(out.timestamps) >= 0))
        multiset_ok &= sorted(zip(out.directions, out.sizes)) == sorted(zip(tr.directions,
                                                                           tr.sizes))
    ratio = np.mean(planned) / np.mean(original)
    kept_ratio = np.mean(kept) / np.mean(original)
    n = 10_000
    base = Trace(np.arange(n) * 10.0, np.ones(n, np.int8), np.arange(1, n + 1))
    delayed = apply_delays(base, DELAY_PROFILES["heavy"], np.random.default_rng(60))
    mean_delay = float((delayed.timestamps - base.timestamps[delayed.sizes - 1]).mean())
    ok = (abs(ratio - 1) <= 0.05 and abs(mean_delay - 0.375) <= 0.0375 and sorted_ok
          and multiset_ok)
    assert acceptance(6, ok, f"injected/original={ratio:.4f} (after segment-end discards "
                             f"{kept_ratio:.4f}) heavy mean delay={mean_delay:.4f}s "
                             f"sorted={sorted_ok} multiset={multiset_ok}")


# --- 8 ---------------------------------------------------------------------------------

def _bytes(trace, direction):
    return int(trace.sizes[trace.directions == direction].sum())


def _link_io(chain, link):
    """(input, output after transit, encapsulated output or None) for one link."""
    if link == 0:
        return chain.captures["h0_egress"], chain.captures["h1_ingress"], None
    return (chain.captures[f"h{link}_ingress"], chain.captures[f"h{link + 1}_ingress"],
            chain.captures[f"h{link}_egress"])


def _latency_violations(inp, out, hop):
    floor = hop.propagation_delay + hop.per_hop_processing_delay - 1e-9
    bad = 0
    if out.timestamps.min() < inp.timestamps.min() + floor:
        bad += 1
    if hop.protocol in ("socat", "ssh"):
        for direction in (UP, DOWN):
            ti, si = inp.timestamps[inp.directions == direction], inp.sizes[inp.directions == direction]
            to = out.timestamps[out.directions == direction]
            if hop.protocol == "ssh":
                # one record per packet: the k-th arrival cannot precede the k-th send
                bad += int(np.any(to < ti + floor))
            else:
                so = out.sizes[out.directions == direction]
                # bytes delivered by each arrival must have been sent one floor earlier
                sent = np.searchsorted(ti, to - floor, side="right")
                sent_bytes = np.concatenate([[0], np.cumsum(si)])[sent]
                bad += int(np.any(np.cumsum(so) > sent_bytes))
    return bad


def test_c8_simulator_invariants(acceptance, burst_model):
    sim = SimConfig(protocol_mode="mixed")
    chains = generate_chains(sim, 1000, 8080, burst_model)
    conservation = latency = 0
    for c in chains:
        for link, hop in enumerate(c.config.hops):
            inp, out, enc = _link_io(c, link)
            if hop.protocol == "socat":
                for d in (UP, DOWN):
                    conservation += _bytes(inp, d) != _bytes(out, d)
            if enc is not None:
                conservation += sorted(zip(enc.directions, enc.sizes)) != sorted(
                    zip(out.directions, out.sizes))
            latency += _latency_violations(inp, out, hop)
    # DNS cadence at zero jitter
    quiet = generate_chains(SimConfig(protocol_mode="mixed", jitter_fraction=0.0), 1000, 8081,
                            burst_model)
    period = sim.protocol.dns_poll_period
    cadence = dns_links = 0
    for c in quiet:
        for link, hop in enumerate(c.config.hops):
            if hop.protocol != "dns":
                continue
            dns_links += 1
            _, out, enc = _link_io(c, link)
            q = (enc if enc is not None else out)
            qt = q.timestamps[q.directions == UP]
            cadence += int(np.any(np.abs(np.diff(qt) - period) > 1e-6))
    again = generate_chains(sim, 1000, 8080, burst_model)
    determinism = sum(a.config != b.config or a.captures != b.captures
                      for a, b in zip(chains, again))
    seen = {p: sum(p in c.config.protocols for c in chains) for p in PROTOCOLS}
    total = conservation + latency + cadence + determinism
    assert acceptance(8, total == 0 and dns_links > 0,
                      f"1000 chains: conservation={conservation} latency={latency} "
                      f"dns cadence={cadence} ({dns_links} dns links) "
                      f"determinism={determinism} protocols={seen}")


# --- 9 ---------------------------------------------------------------------------------

def _steps():
    return [round(0.1 * k, 1) for k in range(1, 11)]


# (links, negatives, tau, chain_accuracy, avg_tpr mean, avg_tpr std), all worked by hand
CHAIN_CASES = [
    ([[0.9, 0.9], [0.8, 0.7]], [0.5] * 10, 0.05, 1.0, 1.0, 0.0),
    ([[0.9, 0.4], [0.8, 0.7]], [0.5] * 10, 0.05, 0.5, 0.75, 0.25),
    ([[0.4], [0.3]], [0.5] * 10, 0.05, 0.0, 0.0, 0.0),
    ([[0.9, 0.9, 0.9]] * 9 + [[0.9, 0.2, 0.9]], [0.5] * 10, 0.05, 0.9, 29 / 30, 0.1),
    ([[0.6], [0.4], [0.6], [0.4]], [0.5] * 10, 0.05, 0.5, 0.5, 0.5),
    ([[0.51, 0.49, 0.6]], [0.5] * 10, 0.05, 0.0, 2 / 3, 0.0),
    ([[0.5, 0.9]], [0.5] * 10, 0.05, 0.0, 0.5, 0.0),
    ([[0.55, 0.65], [0.45]], _steps(), 0.5, 0.5, 0.5, 0.5),
    ([[0.1, 0.2], [0.3]], [0.5] * 10, 1.0, 1.0, 1.0, 0.0),
    ([[0.95], [0.75], [0.55], [0.35]], _steps(), 0.05, 0.0, 0.0, 0.0),
    ([[0.95], [0.75], [0.55], [0.35]], _steps(), 0.25, 0.25, 0.25, 0.4330127018922193),
    ([[0.95], [0.75], [0.55], [0.35]], _steps(), 0.45, 0.5, 0.5, 0.5),
    ([[0.9, 0.9, 0.1], [0.9]], [0.5] * 10, 0.05, 0.5, 5 / 6, 1 / 6),
    ([[0.1, 0.9], [0.9, 0.1]], [0.5] * 10, 0.05, 0.0, 0.5, 0.0),
    ([[0.9]], [0.99] * 10, 0.05, 0.0, 0.0, 0.0),
    ([[0.9]], [0.99] * 10, 1.0, 1.0, 1.0, 0.0),
    ([[0.9]], _steps(), 0.25, 1.0, 1.0, 0.0),
    ([[0.9, 0.9]] * 10 + [[0.9, 0.1]] * 10, [0.5] * 10, 0.05, 0.5, 0.75, 0.25),
    ([[0.7, 0.6], [0.3]], [0.5], 0.5, 0.5, 0.5, 0.5),
    ([[0.97, 0.5], [0.99]], [0.2] * 999 + [0.95], 1e-3, 1.0, 1.0, 0.0),
]


def test_c9_chain_report_oracle(acceptance):
    wrong = []
    for k, (links, negs, tau, acc, mean, std) in enumerate(CHAIN_CASES):
        rep = chain_report(links, negs, taus=(tau,))
        got = (rep.chain_accuracy[0], rep.avg_tpr_mean[0], rep.avg_tpr_std[0])
        if not np.allclose(got, (acc, mean, std), atol=1e-12) or got[0] > got[1] + 1e-12:
            wrong.append((k, got))
    assert acceptance(9, not wrong, f"{len(CHAIN_CASES)} crafted cases, wrong={wrong}")


# --- 10 --------------------------------------------------------------------------------

def test_c10_chain_length(acceptance, burst_model):
    t0 = time.perf_counter()
    chains = generate_chains(SimConfig(protocol_mode="ssh"), 300, 99, burst_model)
    cfg = ChainLenConfig(max_len=256, epochs=60)
    xtr, ytr = ingress_examples(chains[:240], cfg.max_len)
    xte, yte = ingress_examples(chains[240:], cfg.max_len)
    model, _ = train_chainlen(xtr, ytr, cfg)
    acc = chainlen_accuracy(chainlen_forward(model, xte), yte)[2]
    base = majority_baseline(ytr, yte)[2]
    elapsed = time.perf_counter() - t0
    assert acceptance(10, acc - base >= 0.15,
                      f"ssh, 300 chains, {len(yte)} test flows: accuracy={acc:.3f} "
                      f"majority={base:.3f} gain={acc - base:+.3f} time={elapsed:.0f}s")
