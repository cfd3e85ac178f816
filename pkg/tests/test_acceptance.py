"""Acceptance criteria. Each test prints one PASS/FAIL line, then asserts."""

import time

import numpy as np
import pytest

from rela import autodiff as ad
from rela import env
from rela.baselines import exact_solve
from rela.core import Instance, format_gap, gap, makespan, validate_schedule
from rela.instances import (
    GenConfig,
    emit_fjs_text,
    generate_sd,
    parse_fjs_text,
    parse_instance,
    serialize_instance,
)
from rela.policy import ReLANet, StateBatch
from rela.ppo import PPOConfig, load_checkpoint, run_episodes, save_checkpoint, train
from rela.report import evaluate_dataset
from rela.representation import ScaleConfig

from oracles import (
    brute_force_makespan,
    closed_form_params,
    network_fd_gradients,
    random_small_instance,
    reference_forward,
    rel_err,
)

HELD_OUT_SEED = 777


@pytest.fixture
def verdict(capsys):
    def report(name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail

    return report


def random_instance(rng) -> Instance:
    scheme = "SD1" if rng.random() < 0.5 else "SD2"
    cfg = GenConfig(scheme, int(rng.integers(1, 11)), int(rng.integers(1, 6)), seed=int(rng.integers(2**31)))
    return generate_sd(cfg, int(rng.integers(1000)))


def test_feasibility_fuzz_and_telescoping(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    violations = length_errors = 0
    worst = 0.0
    for _ in range(1000):
        inst = random_instance(rng)
        est0 = env.reset(inst).est_cmax
        state, rewards = env.rollout(inst, lambda s, c: int(rng.integers(len(c))))
        violations += len(validate_schedule(inst, env.to_schedule(state)))
        length_errors += len(rewards) != inst.n_operations
        worst = max(worst, abs(sum(rewards) - (est0 - state.op_end.max())))
    secs = time.perf_counter() - t0
    verdict(
        "feasibility fuzz",
        violations == 0 and length_errors == 0 and secs < 60,
        f"1000 rollouts, {violations} violations, {length_errors} length mismatches, {secs:.1f}s",
    )
    verdict("telescoping rewards", worst <= 1e-9, f"max |sum r - (EstCmax(s0) - Cmax)| = {worst:.2e}")


def test_full_network_gradient_oracle(verdict):
    t0 = time.perf_counter()
    net = ReLANet()
    rng = np.random.default_rng(0)
    for _, p in net.store:  # nonzero final layers so every parameter carries gradient
        p.data = rng.normal(scale=0.25, size=p.shape)
    inst = Instance.from_durations(2, [[{0: 3, 1: 5}, {0: 2, 1: 1}], [{0: 2, 1: 4}, {1: 3}]])
    state = env.reset(inst)
    state, _, _ = env.step(state, env.candidates(state)[1])
    bundle = env.extract_features(state)
    batch = StateBatch.from_states([state])
    coef = rng.normal(size=batch.pair_mask.shape[1:]) * batch.pair_mask[0]
    cv = 0.7
    params = {n: p.data.copy() for n, p in net.store}
    adj = state.arrays.op_adjacency

    def objective(ps):
        logits, values = reference_forward(ps, bundle, adj, net.config)
        return (logits * coef).sum(axis=(1, 2)) + cv * values

    net.store.zero_grad()
    with ad.Tape() as tape:
        out = net.forward(batch)
        loss = ad.add(ad.tsum(ad.mul(out.logits, coef[None])), ad.mul(ad.tsum(out.values), cv))
        tape.backward(loss)
    base = objective({k: v[None] for k, v in params.items()})[0]
    fd = network_fd_gradients(params, objective, h=1e-5)
    worst, where = max((rel_err(net.store[n].grad, fd[n]), n) for n in fd)
    secs = time.perf_counter() - t0
    verdict(
        "gradient oracle",
        abs(base - loss.item()) <= 1e-10 and worst <= 1e-3 and secs < 120 and net.n_actor_heads == 6,
        f"{net.store.count()} parameters, max rel err {worst:.2e} ({where}), {secs:.1f}s",
    )


def test_exact_solver_matches_enumeration(verdict):
    rng = np.random.default_rng(99)
    matches = 0
    for _ in range(200):
        inst = random_small_instance(rng, max_ops=6)
        sched, optimal = exact_solve(inst)
        matches += optimal and makespan(sched) == brute_force_makespan(inst)
    verdict("exact solver oracle", matches == 200, f"{matches}/200 instances match enumeration")


def test_masking_correctness(verdict):
    rng = np.random.default_rng(5)
    evaluated = 0
    leaked = 0.0
    worst_sum = 0.0
    while evaluated < 10_000:
        net = ReLANet(seed=int(rng.integers(1000)))
        for _, p in net.store:
            p.data = rng.normal(scale=0.5, size=p.shape)
        states = []
        for _ in range(100):
            s = env.reset(random_instance(rng))
            for _ in range(int(rng.integers(s.arrays.n_ops))):
                c = env.candidates(s)
                s, _, _ = env.step(s, c[int(rng.integers(len(c)))])
            states.append(s)
        batch = StateBatch.from_states(states)
        logits = net.forward(batch).logits.data
        B = len(batch)
        mask = batch.pair_mask.reshape(B, -1)
        probs = ad.masked_softmax(logits.reshape(B, -1), mask).data
        leaked = max(leaked, float(np.abs(probs[~mask]).max(initial=0.0)))
        worst_sum = max(worst_sum, float(np.abs(probs.sum(axis=1) - 1).max()))
        evaluated += B
    verdict(
        "masking",
        leaked == 0.0 and worst_sum <= 1e-12,
        f"{evaluated} distributions, max infeasible mass {leaked}, max |sum - 1| = {worst_sum:.1e}",
    )


def test_gap_rows(verdict):
    a = format_gap(gap(106.71, 96.32))
    b = format_gap(gap(193.65, 195.98))
    verdict("gap arithmetic", a == "10.79%" and b == "-1.19%", f"{a}, {b}")


def test_desk_scale_learning(verdict):
    held = [generate_sd(GenConfig("SD1", 3, 3, seed=HELD_OUT_SEED), k) for k in range(50)]
    optimum = float(np.mean([makespan(exact_solve(inst)[0]) for inst in held]))
    uniform = run_episodes(ReLANet(), held * 20, "sampling", np.random.default_rng(0))
    uniform_mean = float(np.mean([s.op_end.max() for s in uniform]))
    per_seed = []
    t0 = time.perf_counter()
    for seed in range(3):
        cfg = PPOConfig.for_scheme("SD1", episodes=300, envs_per_batch=10, seed=seed)
        result = train("SD1", 3, 3, cfg)
        per_seed.append(float(np.mean([s.op_end.max() for s in run_episodes(result.best, held, "greedy")])))
    secs = time.perf_counter() - t0
    trained = float(np.mean(per_seed))
    improvement = (uniform_mean - trained) / uniform_mean
    over_opt = (trained - optimum) / optimum
    verdict(
        "desk-scale learning",
        improvement >= 0.05 and over_opt <= 0.25 and secs < 1800,
        f"greedy {trained:.2f} (seeds {', '.join(f'{x:.2f}' for x in per_seed)}), uniform sampling {uniform_mean:.2f} "
        f"({improvement:.1%} better), exact {optimum:.2f} ({over_opt:.1%} above), {secs:.0f}s",
    )


def test_ablation_structure(verdict):
    configs = {
        "a": ScaleConfig(conv=False, cattn=False, deep_supervision=False),
        "a+x": ScaleConfig(cattn=False, deep_supervision=False),
        "a+x+c": ScaleConfig(deep_supervision=False),
        "a+x+c+s": ScaleConfig(),
        "L=1": ScaleConfig(scale_dims=(32,)),
        "L=2": ScaleConfig(scale_dims=(32, 8)),
        "L=8": ScaleConfig(scale_dims=(64, 56, 48, 40, 32, 24, 16, 8)),
    }
    counts = {k: ReLANet(c).store.count() for k, c in configs.items()}
    ok = all(counts[k] == closed_form_params(c) for k, c in configs.items())
    summands = {}
    state = env.reset(generate_sd(GenConfig("SD1", 3, 3, seed=0), 0))
    batch = StateBatch.from_states([state])
    for k in ("L=1", "L=2", "L=8"):
        net = ReLANet(configs[k])
        for s in net.config.head_scales:
            for b in net.config.enabled:
                net.store[f"actor.{b}.s{s}.b2"].data[...] = 1.0
        logits = net.forward(batch).logits.data[0][batch.pair_mask[0]]
        summands[k] = int(round(float(logits.mean())))
        ok &= net.n_actor_heads == summands[k] and np.all(logits == summands[k])
    ok &= [summands[k] for k in ("L=1", "L=2", "L=8")] == [3, 6, 24]
    verdict("ablation structure", bool(ok), f"parameter counts {counts}; actor summands {summands}")


def test_determinism(verdict, tmp_path):
    cfg = PPOConfig.for_scheme("SD1", episodes=10, envs_per_batch=4, val_size=10, validate_every=5, resample_every=5, seed=3)
    a = train("SD1", 3, 3, cfg)
    b = train("SD1", 3, 3, cfg)
    same_train = a.curve == b.curve and a.final.store.dumps() == b.final.store.dumps()
    data = tmp_path / "data"
    data.mkdir()
    for k in range(5):
        (data / f"sd1_{k:04d}.json").write_bytes(serialize_instance(generate_sd(GenConfig("SD1", 4, 3, seed=8), k)))
    ckpt = tmp_path / "ck.json"
    save_checkpoint(a.final, ckpt)

    def records(mode):
        rep = evaluate_dataset(ckpt, data, mode, n_samples=8, seed=2)
        return [{k: v for k, v in r.items() if k != "seconds"} for r in rep.records()]

    same_eval = records("greedy") == records("greedy") and records("sampling") == records("sampling")
    verdict("determinism", same_train and same_eval, f"training curves equal: {same_train}; evaluation reports equal: {same_eval}")


def test_format_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(7)
    json_ok = fjs_ok = 0
    for _ in range(1000):
        inst = random_instance(rng)
        json_ok += parse_instance(serialize_instance(inst)) == inst
        fjs_ok += parse_fjs_text(emit_fjs_text(inst)) == inst
    net = ReLANet(seed=4)
    for _, p in net.store:
        p.data = rng.normal(scale=0.3, size=p.shape)
    save_checkpoint(net, tmp_path / "ck.json")
    twin = load_checkpoint(tmp_path / "ck.json")
    batch = StateBatch.from_states([env.reset(random_instance(rng)) for _ in range(4)])
    x, y = net.forward(batch), twin.forward(batch)
    bit_equal = x.logits.data.tobytes() == y.logits.data.tobytes() and x.values.data.tobytes() == y.values.data.tobytes()
    verdict(
        "format round-trips",
        json_ok == 1000 and fjs_ok == 1000 and bit_equal,
        f"JSON {json_ok}/1000, fjs {fjs_ok}/1000, checkpoint forward bit-equal: {bit_equal}",
    )
