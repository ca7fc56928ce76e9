"""Release acceptance gate.

One test per numbered criterion. Each runs end to end at its stated
tolerance, prints a single [PASS]/[FAIL] summary line with the measured
quantities, and asserts. Criteria 1-5 and 8 run in seconds; criteria 6
and 7 train real experts and agents and take tens of minutes.
"""

import math
import time

import numpy as np

from ctde_lab.comm import (
    CommDemoDataset,
    CommDemoRecord,
    action_loss,
    collect_comm,
    communication_loss,
    comm_update,
    create_comm_agents,
    decentralize_comm,
    evaluate_comm,
)
from ctde_lab.decentralize import (
    DemoDataset,
    DemoRecord,
    agent_move,
    collect_and_label,
    create_agents,
    decentralize,
    evaluate,
    supervise_step,
)
from ctde_lab.envs import (
    EnvState,
    JointAction,
    N_MOVES,
    SCENARIO_NAMES,
    coop_nav_spec,
    env_reset,
    env_step,
    make_scenario,
    scenario_reward,
    uniform_random_action,
)
from ctde_lab.expert import (
    DdpgExpert,
    DqnExpert,
    evaluate_expert,
    joint_action_tuple,
    random_baseline,
    train_expert,
)
from ctde_lab.nn import (
    Head,
    MlpPolicy,
    mlp_backward,
    mlp_forward,
    mse_batch,
    softmax_ce_batch,
)
from ctde_lab.tabular import (
    check_comm_sufficiency,
    check_tv_lemma,
    constant_comm,
    construct_decentralized,
    detect_po_conflict,
    disjoint_reach_mdp,
    expected_mismatch,
    expert_joint_matrix,
    identity_comm,
    min_expected_mismatch,
    pointwise_match,
    random_expert,
    random_instance,
    random_policy_matrix,
    separable_mdp,
    xor_mdp,
    zero_loss_policy_exists,
    zero_loss_with_comm_exists,
)


def _verdict(ok: bool, name: str, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line)
    assert ok, line


# -- criterion 1: gradient checks ------------------------------------------

FD_STEP = 1e-5
REL_TOL = 1e-4


def _fd_worst(loss_fn, pairs, rng, max_coords=24):
    """Worst relative error between central differences and the given
    gradients, over up to max_coords sampled coordinates per array.

    pairs: (array to perturb, matching gradient array) tuples. Arrays are
    perturbed in place and restored. Coordinates whose gradient sits below
    what central differences can resolve (the subtraction noise floor,
    eps * |loss| / step) are compared at that resolution instead of by
    ratio; a genuinely wrong gradient at any measurable magnitude still
    fails the ratio test.
    """
    noise = np.finfo(float).eps * max(1.0, abs(loss_fn())) / FD_STEP
    worst = 0.0
    for arr, grad in pairs:
        flat, gflat = arr.reshape(-1), np.asarray(grad).reshape(-1)
        n = flat.size
        take = n if n <= max_coords else None
        coords = range(n) if take else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            old = flat[c]
            flat[c] = old + FD_STEP
            lp = loss_fn()
            flat[c] = old - FD_STEP
            lm = loss_fn()
            flat[c] = old
            fd = (lp - lm) / (2.0 * FD_STEP)
            denom = max(abs(fd), abs(gflat[c]), noise / REL_TOL)
            worst = max(worst, abs(fd - gflat[c]) / denom)
    return worst


def _param_pairs(policy, bundle):
    return list(zip(policy.params(), bundle.params()))


def _single_head_ce_fixture(rng):
    n_in = int(rng.integers(3, 7))
    n_out = int(rng.integers(2, 6))
    h = int(rng.integers(4, 8))
    batch = 3
    policy = MlpPolicy.create(
        (n_in, h, h, n_out), (Head(0, n_out, "softmax"),), rng
    )
    x = rng.normal(size=(batch, n_in))
    labels = rng.integers(0, n_out, size=batch)

    def loss_fn():
        out = mlp_forward(policy, x)
        losses, _ = softmax_ce_batch(out, policy.heads[0], labels)
        return float(losses.mean())

    out = mlp_forward(policy, x)
    _, upstream = softmax_ce_batch(out, policy.heads[0], labels)
    bundle = mlp_backward(policy, x, upstream / batch)
    return loss_fn, _param_pairs(policy, bundle) + [(x, bundle.d_input)]


def _mse_fixture(rng):
    n_in = int(rng.integers(3, 7))
    n_out = int(rng.integers(2, 6))
    h = int(rng.integers(4, 8))
    batch = 3
    policy = MlpPolicy.create((n_in, h, h, n_out), (Head(0, n_out, "linear"),), rng)
    x = rng.normal(size=(batch, n_in))
    targets = rng.normal(size=(batch, n_out))

    def loss_fn():
        out = mlp_forward(policy, x)
        losses, _ = mse_batch(out, targets)
        return float(losses.mean())

    out = mlp_forward(policy, x)
    _, upstream = mse_batch(out, targets)
    bundle = mlp_backward(policy, x, upstream / batch)
    return loss_fn, _param_pairs(policy, bundle) + [(x, bundle.d_input)]


def _multi_head_fixture(rng):
    k1 = int(rng.integers(2, 5))
    k2 = int(rng.integers(2, 5))
    n_in = int(rng.integers(3, 7))
    h = int(rng.integers(4, 8))
    batch = 3
    heads = (Head(0, k1, "softmax"), Head(k1, k2, "softmax"))
    policy = MlpPolicy.create((n_in, h, h, k1 + k2), heads, rng)
    x = rng.normal(size=(batch, n_in))
    la = rng.integers(0, k1, size=batch)
    lb = rng.integers(0, k2, size=batch)

    def loss_fn():
        out = mlp_forward(policy, x)
        l1, _ = softmax_ce_batch(out, policy.heads[0], la)
        l2, _ = softmax_ce_batch(out, policy.heads[1], lb)
        return float(l1.mean() + l2.mean())

    out = mlp_forward(policy, x)
    _, u1 = softmax_ce_batch(out, policy.heads[0], la)
    _, u2 = softmax_ce_batch(out, policy.heads[1], lb)
    bundle = mlp_backward(policy, x, (u1 + u2) / batch)
    return loss_fn, _param_pairs(policy, bundle) + [(x, bundle.d_input)]


def _comm_records(spec, rng, batch=3):
    # observations drawn on the environments' actual scale; larger inputs
    # saturate the softmax heads and inflate finite-difference truncation
    # error without exercising anything the rollouts can reach
    movers = spec.mover_indices()
    records = []
    for _ in range(batch):
        prev = [rng.uniform(-1, 1, size=spec.obs_len(i)) for i in range(spec.n_agents)]
        succ = [rng.uniform(-1, 1, size=spec.obs_len(i)) for i in range(spec.n_agents)]
        records.append(
            CommDemoRecord(
                prev_obs=prev,
                succ_obs=succ,
                joint_core=spec.core_obs(succ),
                labels=rng.integers(0, N_MOVES, size=len(movers)),
            )
        )
    return records


def _action_loss_fixture(rng, scenario):
    spec = make_scenario(scenario)
    agents = create_comm_agents(spec, int(rng.integers(5, 8)), rng)
    records = _comm_records(spec, rng)
    receiver = spec.mover_indices()[0]

    def loss_fn():
        return action_loss(agents, spec, receiver, records)[0]

    _, bundle = action_loss(agents, spec, receiver, records)
    pairs = _param_pairs(agents[receiver].policy, bundle)
    # input sensitivity is checked on the message-free part of the stored
    # successor observations; the message slots are overwritten by the
    # re-query, so the stored values there are inert by design
    sl = spec.comm_slice(receiver)
    core_cols = [c for c in range(spec.obs_len(receiver)) if not sl.start <= c < sl.stop]
    for b, rec in enumerate(records):
        stored = np.asarray(rec.succ_obs[receiver])
        for c in core_cols:
            pairs.append((stored[c : c + 1], bundle.d_input[b, c : c + 1]))
    return loss_fn, pairs


def _comm_loss_fixture(rng, scenario):
    spec = make_scenario(scenario)
    agents = create_comm_agents(spec, int(rng.integers(5, 8)), rng)
    records = _comm_records(spec, rng)
    sender = spec.sender_indices()[0]

    def loss_fn():
        return communication_loss(agents, spec, sender, records)[0]

    _, bundle = communication_loss(agents, spec, sender, records)
    pairs = _param_pairs(agents[sender].policy, bundle)
    # the loss reaches the sender only through its emitted message, so the
    # input gradient lives at the sender's stored predecessor observation
    for b, rec in enumerate(records):
        stored = np.asarray(rec.prev_obs[sender])
        for c in range(spec.obs_len(sender)):
            pairs.append((stored[c : c + 1], bundle.d_input[b, c : c + 1]))
    return loss_fn, pairs


def test_criterion_1_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11001)
    fixtures = []
    for _ in range(4):
        fixtures.append(_single_head_ce_fixture(rng))
        fixtures.append(_mse_fixture(rng))
        fixtures.append(_multi_head_fixture(rng))
    for scenario in ("speaker_listener", "coop_nav_comm_2x3"):
        for _ in range(2):
            fixtures.append(_action_loss_fixture(rng, scenario))
            fixtures.append(_comm_loss_fixture(rng, scenario))
    assert len(fixtures) == 20
    worst = 0.0
    for loss_fn, pairs in fixtures:
        worst = max(worst, _fd_worst(loss_fn, pairs, rng))
    elapsed = time.perf_counter() - t0
    ok = worst <= REL_TOL and elapsed < 10.0
    _verdict(
        ok,
        "criterion 1 (gradient checks)",
        f"20/20 network/loss fixtures, parameter and input gradients, "
        f"composed communication path included; worst rel err {worst:.2e} "
        f"(tol {REL_TOL:g}), {elapsed:.1f}s < 10s",
    )


# -- criterion 2: environment reward oracles -------------------------------


def _oracle_reward(spec, state):
    """Brute-force reward recomputation with plain python loops."""
    if spec.kind == "coop_nav":
        total = 0.0
        for lx, ly in state.landmarks:
            best = None
            for ax, ay in state.pos:
                d = math.sqrt((ax - lx) ** 2 + (ay - ly) ** 2)
                if best is None or d < best:
                    best = d
            total -= best
        for i in range(spec.n_agents):
            for j in range(i + 1, spec.n_agents):
                dx = state.pos[i][0] - state.pos[j][0]
                dy = state.pos[i][1] - state.pos[j][1]
                if math.sqrt(dx * dx + dy * dy) < spec.radii[i] + spec.radii[j]:
                    total -= 1.0
        return total
    if spec.kind == "speaker_listener":
        gx, gy = state.landmarks[int(state.goals[1])]
        dx = state.pos[1][0] - gx
        dy = state.pos[1][1] - gy
        return -(dx ** 2 + dy ** 2)
    if spec.kind == "coop_nav_comm":
        total = 0.0
        for i in range(spec.n_agents):
            gx, gy = state.landmarks[int(state.goals[i])]
            dx = state.pos[i][0] - gx
            dy = state.pos[i][1] - gy
            total -= math.sqrt(dx * dx + dy * dy)
        return total
    raise AssertionError(spec.kind)


def _random_state(spec, rng):
    n, l = spec.n_agents, spec.n_landmarks
    if spec.kind == "speaker_listener":
        goals = np.full(n, int(rng.integers(l)))
    elif spec.kind == "coop_nav_comm":
        goals = rng.integers(l, size=n)
    else:
        goals = None
    return EnvState(
        pos=rng.uniform(-1.5, 1.5, (n, 2)),
        vel=rng.uniform(-1.0, 1.0, (n, 2)),
        landmarks=rng.uniform(-1.5, 1.5, (l, 2)),
        goals=goals,
        comm=[rng.uniform(0, 1, spec.comm_out[i]) for i in range(n)],
        t=int(rng.integers(0, 25)),
    )


def test_criterion_2_environment_reward_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(22002)
    worst = 0.0
    for name in SCENARIO_NAMES:
        spec = make_scenario(name)
        for _ in range(1000):
            state = _random_state(spec, rng)
            got = scenario_reward(spec, state)
            want = _oracle_reward(spec, state)
            worst = max(worst, abs(got - want))
    rewards_ok = worst <= 1e-12

    # episode length is exactly 25 under any action stream
    lengths_ok = True
    for name in SCENARIO_NAMES:
        spec = make_scenario(name)
        for _ in range(2):
            state, _ = env_reset(spec, rng)
            steps = 0
            done = False
            while not done:
                state, _, _, done = env_step(spec, state, uniform_random_action(spec, rng))
                steps += 1
            lengths_ok = lengths_ok and steps == 25

    # messages sent with the action at step t appear in observations at t+1,
    # and are replaced (not accumulated) by the next step's messages
    delay_ok = True
    spec = make_scenario("speaker_listener")
    state, obs = env_reset(spec, rng)
    delay_ok &= bool(np.all(obs[1][spec.comm_slice(1)] == 0.0))
    c1 = np.array([0.2, 0.5, 0.3])
    state, obs, _, _ = env_step(
        spec, state, JointAction(np.array([0, 3]), [c1, np.zeros(0)])
    )
    delay_ok &= bool(np.array_equal(obs[1][spec.comm_slice(1)], c1))
    c2 = np.array([0.9, 0.05, 0.05])
    state, obs, _, _ = env_step(
        spec, state, JointAction(np.array([0, 1]), [c2, np.zeros(0)])
    )
    delay_ok &= bool(np.array_equal(obs[1][spec.comm_slice(1)], c2))

    spec3 = make_scenario("coop_nav_comm_3x5")
    state, obs = env_reset(spec3, rng)
    sent = [np.linspace(0.1 * (i + 1), 0.1 * (i + 2), spec3.comm_out[i]) for i in range(3)]
    state, obs, _, _ = env_step(spec3, state, JointAction(np.zeros(3, dtype=int), sent))
    for i in range(3):
        heard = obs[i][spec3.comm_slice(i)]
        want = np.concatenate([sent[j] for j in range(3) if j != i])
        delay_ok &= bool(np.array_equal(heard, want))

    elapsed = time.perf_counter() - t0
    ok = rewards_ok and lengths_ok and delay_ok and elapsed < 30.0
    _verdict(
        ok,
        "criterion 2 (environment oracles)",
        f"1000 random states x {len(SCENARIO_NAMES)} scenarios, max reward "
        f"deviation {worst:.1e} <= 1e-12; episode length 25 everywhere "
        f"({'ok' if lengths_ok else 'BROKEN'}); one-step message delay "
        f"({'ok' if delay_ok else 'BROKEN'}); {elapsed:.1f}s < 30s",
    )


# -- criterion 3: distribution-shift bound ---------------------------------


def test_criterion_3_distribution_shift_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(33003)
    checked, violations = 0, 0
    for k in range(220):
        mdp = random_instance(rng)
        expert = random_expert(mdp, rng)
        expert_pol = expert_joint_matrix(mdp, expert)
        learner_pol = random_policy_matrix(mdp, rng)
        if k < 20:
            beta = float(k % 2)  # exercise both edges of the mixing rate
        else:
            beta = float(rng.uniform())
        report = check_tv_lemma(mdp, expert_pol, learner_pol, beta)
        checked += 1
        if not report.holds:
            violations += 1

    mdp, expert_pol, learner_pol = disjoint_reach_mdp()
    tight = check_tv_lemma(mdp, expert_pol, learner_pol, 1.0)
    equality_gap = abs(tight.lhs - tight.bound)
    elapsed = time.perf_counter() - t0
    ok = (
        checked >= 200
        and violations == 0
        and tight.bound == 2.0
        and equality_gap <= 1e-9
        and elapsed < 60.0
    )
    _verdict(
        ok,
        "criterion 3 (occupancy-shift bound)",
        f"{checked} random instances, {violations} violations of "
        f"|d_mix - d_learner|_1 <= 2*T*beta; disjoint-support fixture meets "
        f"the bound with equality (gap {equality_gap:.1e}); {elapsed:.1f}s < 60s",
    )


# -- criterion 4: decentralization cost floor ------------------------------


def test_criterion_4_decentralization_cost_floor():
    t0 = time.perf_counter()
    mdp, expert = xor_mdp()
    floor, _ = min_expected_mismatch(mdp, expert)
    conflicts = detect_po_conflict(mdp, expert)
    xor_ok = (
        abs(floor - 0.5) <= 1e-12
        and floor > 0.0
        and len(conflicts) > 0
        and not zero_loss_policy_exists(mdp, expert)
    )

    mdp2, expert2 = separable_mdp()
    conflicts2 = detect_po_conflict(mdp2, expert2)
    tables = construct_decentralized(mdp2, expert2)
    residual = expected_mismatch(mdp2, tables, expert2)
    sep_ok = (
        len(conflicts2) == 0
        and pointwise_match(mdp2, tables, expert2)
        and residual == 0.0
        and zero_loss_policy_exists(mdp2, expert2)
    )
    elapsed = time.perf_counter() - t0
    ok = xor_ok and sep_ok and elapsed < 60.0
    _verdict(
        ok,
        "criterion 4 (cost floor without messages)",
        f"xor fixture: brute-force floor {floor:.3f} >= 0.5 > 0 with "
        f"{len(conflicts)} detected conflict(s); conflict-free fixture: "
        f"constructive policy reaches loss {residual:.1e} and matches "
        f"pointwise; {elapsed:.1f}s < 60s",
    )


# -- criterion 5: communication sufficiency --------------------------------


def test_criterion_5_communication_sufficiency():
    t0 = time.perf_counter()
    mdp, expert = xor_mdp()

    with_identity = check_comm_sufficiency(mdp, expert, identity_comm(mdp))
    identity_ok = (
        with_identity.condition_holds
        and with_identity.matches_expert
        and zero_loss_with_comm_exists(mdp, expert, identity_comm(mdp))
    )

    with_constant = check_comm_sufficiency(mdp, expert, constant_comm(mdp))
    constant_ok = (
        not with_constant.condition_holds
        and not with_constant.matches_expert
        and not zero_loss_with_comm_exists(mdp, expert, constant_comm(mdp))
    )
    elapsed = time.perf_counter() - t0
    ok = identity_ok and constant_ok and elapsed < 60.0
    _verdict(
        ok,
        "criterion 5 (message sufficiency)",
        f"xor fixture: identity protocol passes the sufficiency condition and "
        f"the constructed policy reproduces the expert exactly "
        f"({'ok' if identity_ok else 'BROKEN'}); the constant protocol fails "
        f"it ({'ok' if constant_ok else 'BROKEN'}); {elapsed:.1f}s < 60s",
    )


# -- criterion 8: structural invariants ------------------------------------


def _dataset_checksum(ds):
    total = 0.0
    for r in ds.records:
        total += float(np.sum(r.joint_core)) + float(np.sum(r.labels))
    return total


def test_criterion_8_structural_invariants():
    t0 = time.perf_counter()
    notes = []

    # dataset growth is append-only and sampling never mutates it
    spec = make_scenario("speaker_listener")
    rng = np.random.default_rng(88008)
    expert = DdpgExpert.create(spec, 8, 0.9, 0.0, rng)
    agents = create_agents(spec, 8, rng)
    ds = DemoDataset(spec, "shared", min_size=8)
    sizes = []
    for _ in range(5):
        collect_and_label(agents, expert, spec, 20, ds, rng)
        sizes.append(len(ds))
    grow_ok = sizes == [20, 40, 60, 80, 100]
    before = _dataset_checksum(ds)
    for _ in range(3):
        ds.sample_batches(8, rng)
    grow_ok = grow_ok and len(ds) == 100 and _dataset_checksum(ds) == before
    notes.append(f"dataset growth {'ok' if grow_ok else 'BROKEN'}")

    # every stored label is the expert's greedy action at the stored core
    movers = spec.mover_indices()
    purity_ok = all(
        np.array_equal(r.labels, expert.greedy_moves(r.joint_core)[movers])
        for r in ds.records
    )
    notes.append(f"label purity {'ok' if purity_ok else 'BROKEN'}")

    # decentralized policies consume local observations only
    spec3 = make_scenario("coop_nav_3")
    agents3 = create_agents(spec3, 8, rng)
    width_ok = all(
        a.policy.input_len == spec3.obs_len(a.index)
        and a.policy.input_len < spec3.joint_core_len()
        for a in agents3
    )
    try:
        agent_move(agents3[0], np.zeros(spec3.joint_core_len()), "greedy")
        width_ok = False
    except ValueError:
        pass
    comm_agents = create_comm_agents(spec, 8, rng)
    width_ok = width_ok and all(
        a.policy.input_len == spec.obs_len(a.index) for a in comm_agents
    )
    notes.append(f"execution input width {'ok' if width_ok else 'BROKEN'}")

    # summed per-agent argmaxes equal the exhaustive joint maximum
    vdn = DqnExpert.create(spec3, "dqn_vdn", 16, 0.9, 0.0, rng)
    vdn_ok = True
    for _ in range(20):
        core = rng.normal(size=spec3.joint_core_len())
        per_agent = [mlp_forward(net, core) for net in vdn.nets]
        best, best_val = None, -np.inf
        for flat in range(5 ** 3):
            tup = joint_action_tuple(flat, (5, 5, 5))
            val = sum(per_agent[k][tup[k]] for k in range(3))
            if val > best_val:
                best, best_val = tup, val
        vdn_ok = vdn_ok and tuple(vdn.greedy_moves(core)) == best
    notes.append(f"value-sum argmax decomposition {'ok' if vdn_ok else 'BROKEN'}")

    # with one moving agent the summed and joint Q formulations coincide,
    # down to bitwise-equal training trajectories
    kw = dict(episodes=3, hidden=10, batch_size=8, lr=1e-3, tau=1e-3,
              gamma=0.9, clip_norm=0.1, warmup=16)
    exp1, curve1 = train_expert(spec, np.random.default_rng(555), variant="dqn_exp", **kw)
    vdn1, curve2 = train_expert(spec, np.random.default_rng(555), variant="dqn_vdn", **kw)
    single_ok = np.array_equal(np.asarray(curve1), np.asarray(curve2)) and all(
        np.array_equal(a, b)
        for a, b in zip(exp1.nets[0].params(), vdn1.nets[0].params())
    )
    notes.append(f"single-mover variant equivalence {'ok' if single_ok else 'BROKEN'}")

    # zero-width message channels reduce the message-era update to the plain
    # supervised update, bitwise
    spec2 = coop_nav_spec(2)
    plain = create_agents(spec2, 8, np.random.default_rng(4242))
    withc = create_comm_agents(spec2, 8, np.random.default_rng(4242))
    zero_ok = all(
        np.array_equal(a, b)
        for p, c in zip(plain, withc)
        for a, b in zip(p.policy.params(), c.policy.params())
    )
    tiny_expert = DdpgExpert.create(spec2, 8, 0.9, 0.0, np.random.default_rng(9))
    cds = CommDemoDataset(spec2, min_size=8)
    collect_comm(withc, tiny_expert, spec2, 40, cds, np.random.default_rng(7))
    pds = DemoDataset(spec2, "shared", min_size=8)
    for r in cds.records:
        pds.append(
            DemoRecord(
                joint_core=r.joint_core,
                mover_obs=[r.succ_obs[i] for i in spec2.mover_indices()],
                labels=r.labels,
            )
        )
    batch = cds.sample(8, np.random.default_rng(99))
    a_losses, _ = comm_update(withc, spec2, batch, 1e-3)
    p_losses = supervise_step(plain, pds, 8, 1e-3, np.random.default_rng(99))
    zero_ok = zero_ok and a_losses == p_losses and all(
        np.array_equal(a, b)
        for p, c in zip(plain, withc)
        for a, b in zip(p.policy.params(), c.policy.params())
    )
    notes.append(f"zero-width channel reduction {'ok' if zero_ok else 'BROKEN'}")

    elapsed = time.perf_counter() - t0
    all_ok = (
        grow_ok and purity_ok and width_ok and vdn_ok and single_ok and zero_ok
        and elapsed < 60.0
    )
    _verdict(
        all_ok,
        "criterion 8 (structural invariants)",
        "; ".join(notes) + f"; {elapsed:.1f}s < 60s",
    )


# -- criterion 6: desk-scale pipeline with messages ------------------------


def test_criterion_6_pipeline_speaker_listener():
    t0 = time.perf_counter()
    spec = make_scenario("speaker_listener")
    lines, ok = [], True
    for seed in (0, 1, 2):
        seed_t0 = time.perf_counter()
        expert, curve = train_expert(
            spec,
            np.random.default_rng(seed),
            episodes=5000,
            hidden=64,
            batch_size=32,
            lr=1e-4,
            tau=1e-3,
            gamma=0.9,
            clip_norm=0.1,
            warmup=1024,
        )
        final_avg = curve[-1][2]
        greedy_mean, _ = evaluate_expert(expert, 1000, np.random.default_rng(seed + 1000))
        rand_mean, rand_se = random_baseline(spec, 1000, np.random.default_rng(seed + 2000))
        rand_std = rand_se * math.sqrt(1000)

        pair, _, _ = decentralize_comm(
            expert,
            spec,
            np.random.default_rng(seed + 500),
            episodes=5000,
            hidden=64,
            batch_size=32,
            lr=1e-3,
            eval_every=250,
            eval_episodes=200,
            stop_tolerance=2.0,
            min_dataset=1024,
            expert_ref=greedy_mean,
            comm_loss_enabled=True,
        )
        pair_mean, _ = evaluate_comm(pair, spec, 1000, np.random.default_rng(seed + 3000))

        muted, _, _ = decentralize_comm(
            expert,
            spec,
            np.random.default_rng(seed + 500),
            episodes=2500,
            hidden=64,
            batch_size=32,
            lr=1e-3,
            eval_every=250,
            eval_episodes=200,
            stop_tolerance=2.0,
            min_dataset=1024,
            expert_ref=greedy_mean,
            comm_loss_enabled=False,
        )
        muted_mean, _ = evaluate_comm(muted, spec, 1000, np.random.default_rng(seed + 4000))
        seed_elapsed = time.perf_counter() - seed_t0

        margin_a = final_avg - (rand_mean + 3.0 * rand_se)
        gap_b = abs(pair_mean - greedy_mean)
        band_b = 0.15 * abs(greedy_mean)
        gap_c = abs(muted_mean - rand_mean)
        a_ok = margin_a >= 0.0
        b_ok = gap_b <= band_b
        c_ok = gap_c <= rand_std
        t_ok = seed_elapsed < 20 * 60
        ok = ok and a_ok and b_ok and c_ok and t_ok
        lines.append(
            f"  seed {seed}: expert train avg {final_avg:.2f} vs random "
            f"{rand_mean:.2f}+-{rand_se:.2f} (beats by "
            f"{(final_avg - rand_mean) / rand_se:.1f} stderr, need >= 3: "
            f"{'ok' if a_ok else 'FAIL'}); pair {pair_mean:.2f} vs expert "
            f"greedy {greedy_mean:.2f} (gap {gap_b:.2f} <= {band_b:.2f}: "
            f"{'ok' if b_ok else 'FAIL'}); muted ablation {muted_mean:.2f} "
            f"(|diff to random| {gap_c:.2f} <= sigma {rand_std:.2f}: "
            f"{'ok' if c_ok else 'FAIL'}); {seed_elapsed / 60:.1f}min"
        )
    for line in lines:
        print(line)
    elapsed = time.perf_counter() - t0
    _verdict(
        ok,
        "criterion 6 (desk-scale message pipeline)",
        f"3 seeds: expert beats random by >= 3 stderr, message-trained pair "
        f"within 15% of the expert, muted ablation within one episode-level "
        f"sigma of random; {elapsed / 60:.1f}min total",
    )


# -- criterion 7: decentralization needs fewer episodes than the expert ----


def test_criterion_7_ordering_coop_nav_3():
    t0 = time.perf_counter()
    spec = make_scenario("coop_nav_3")
    expert_episodes = 12000
    expert, _ = train_expert(
        spec,
        np.random.default_rng(0),
        episodes=expert_episodes,
        hidden=225,
        batch_size=64,
        lr=1e-3,
        tau=1e-3,
        gamma=0.9,
        clip_norm=0.1,
        warmup=1024,
    )
    ref, _ = evaluate_expert(expert, 500, np.random.default_rng(1000))

    agents, _, info = decentralize(
        expert,
        spec,
        np.random.default_rng(500),
        episodes=expert_episodes,
        hidden=128,
        batch_size=32,
        lr=1e-3,
        eval_every=250,
        eval_episodes=200,
        stop_tolerance=5.0,
        min_dataset=1024,
        expert_ref=ref,
    )
    final_mean, _ = evaluate(agents, spec, 500, np.random.default_rng(3000))
    elapsed = time.perf_counter() - t0

    stopped = info["stopped_at"]
    reached = final_mean >= ref - 5.0
    fewer = stopped is not None and stopped < expert_episodes
    ok = reached and fewer and elapsed < 45 * 60
    _verdict(
        ok,
        "criterion 7 (ordering of the two stages)",
        f"expert reached {ref:.2f} after {expert_episodes} episodes; "
        f"decentralization reached {final_mean:.2f} (within 5: "
        f"{'ok' if reached else 'FAIL'}) by episode {stopped} "
        f"({'fewer' if fewer else 'NOT FEWER'}); {elapsed / 60:.1f}min < 45min",
    )
