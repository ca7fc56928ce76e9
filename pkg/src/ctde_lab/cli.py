"""Command-line entry points: `train-expert`, `decentralize`, `evaluate`,
and `theory`.

Every command is deterministic under (config, seed).  Each training run
writes its artifacts into its own directory under the output root (flag
`--out`, else the config's `out_dir`, else $CTDE_LAB_OUT, else ./runs):
a checkpoint bundle, curve CSVs with full-precision floats, and a
resolved-config snapshot that makes the run replayable byte for byte.
"""

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from .config import (
    EXPERT_VARIANTS,
    RunConfig,
    config_hash,
    load_config_file,
    make_config,
    resolved_text,
)
from .envs import env_reset, env_step, make_scenario, write_trajectory_csv
from .nn import AdamState, load_checkpoint, save_checkpoint


# -- small shared helpers --------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float) or isinstance(value, np.floating):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Parse a curve CSV back into (header, float rows) losslessly."""
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [tuple(float(v) for v in row) for row in reader]
    return header, rows


def _resolve_out_dir(args, overrides) -> None:
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    elif "out_dir" not in overrides and os.environ.get("CTDE_LAB_OUT"):
        overrides["out_dir"] = os.environ["CTDE_LAB_OUT"]


def _build_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "config", None):
        overrides.update(load_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValueError(f"--set wants key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "scenario", None):
        overrides["scenario"] = args.scenario
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    _resolve_out_dir(args, overrides)
    return make_config(overrides=overrides)


def _run_dir(config: RunConfig, stage: str) -> str:
    name = f"{config.scenario}_{config.variant}_{stage}_s{config.seed}"
    path = os.path.join(config.out_dir, name)
    os.makedirs(path, exist_ok=True)
    return path


def _write_snapshot(run_dir: str, config: RunConfig) -> None:
    with open(os.path.join(run_dir, "resolved_config.txt"), "w") as fh:
        fh.write(resolved_text(config))


# -- checkpoint bundles ----------------------------------------------------


def save_expert_bundle(path, expert, config: RunConfig) -> None:
    from .expert import DdpgExpert

    tag = {
        "kind": "expert",
        "scenario": expert.spec.name,
        "variant": config.variant,
        "gamma": expert.gamma,
        "config_hash": config_hash(config),
        "best_avg": float(expert.best_avg),
    }
    if isinstance(expert, DdpgExpert):
        records = [
            (expert.actor, {**tag, "role": "actor"}),
            (expert.critic, {**tag, "role": "critic"}),
        ]
    else:
        records = [
            (net, {**tag, "role": f"qnet{k}"}) for k, net in enumerate(expert.nets)
        ]
    save_checkpoint(path, records)


def load_expert(path):
    """Rebuild a frozen expert from a checkpoint bundle."""
    from .expert import DdpgExpert, DqnExpert

    records = load_checkpoint(path)
    head = records[0][1]
    if head.get("kind") != "expert":
        raise ValueError(f"{path} is not an expert checkpoint")
    spec = make_scenario(head["scenario"])
    variant = head["variant"]
    gamma = float(head["gamma"])
    if variant == "ddpg":
        roles = {extra["role"]: policy for policy, extra in records}
        actor, critic = roles["actor"], roles["critic"]
        return DdpgExpert(
            spec=spec,
            actor=actor,
            critic=critic,
            actor_target=actor.copy(),
            critic_target=critic.copy(),
            actor_opt=AdamState.for_policy(actor),
            critic_opt=AdamState.for_policy(critic),
            gamma=gamma,
            clip_norm=0.0,
            best_avg=float(head.get("best_avg", -np.inf)),
        )
    if variant in EXPERT_VARIANTS:
        nets = [policy for policy, _ in records]
        return DqnExpert(
            spec=spec,
            variant=variant,
            nets=nets,
            targets=[n.copy() for n in nets],
            opts=[AdamState.for_policy(n) for n in nets],
            gamma=gamma,
            clip_norm=0.0,
            best_avg=float(head.get("best_avg", -np.inf)),
        )
    raise ValueError(f"unknown expert variant {variant!r} in {path}")


def save_agents_bundle(path, agents, spec, mode: str, config: RunConfig) -> None:
    tag = {
        "kind": "agents",
        "scenario": spec.name,
        "mode": mode,
        "config_hash": config_hash(config),
    }
    save_checkpoint(
        path,
        [(a.policy, {**tag, "agent_index": a.index}) for a in agents],
    )


def load_agents(path):
    """Rebuild decentralized agents; returns (agents, spec, mode)."""
    from .decentralize import Agent

    records = load_checkpoint(path)
    head = records[0][1]
    if head.get("kind") != "agents":
        raise ValueError(f"{path} is not an agents checkpoint")
    spec = make_scenario(head["scenario"])
    agents = [
        Agent(
            index=int(extra["agent_index"]),
            policy=policy,
            opt=AdamState.for_policy(policy),
        )
        for policy, extra in records
    ]
    return agents, spec, head["mode"]


# -- train-expert ----------------------------------------------------------


def cmd_train_expert(args) -> int:
    from .expert import train_expert

    base = _build_config(args)
    for seed in range(base.seed, base.seed + args.seeds):
        config = replace(base, seed=seed)
        if getattr(args, "episodes", None):
            config = replace(config, expert_episodes=args.episodes)
        spec = make_scenario(config.scenario)
        expert, curve = train_expert(
            spec,
            np.random.default_rng(config.seed),
            variant=config.variant,
            episodes=config.expert_episodes,
            hidden=config.expert_hidden,
            batch_size=config.expert_batch,
            lr=config.expert_lr,
            tau=config.tau,
            gamma=config.gamma,
            clip_norm=config.expert_clip,
            buffer_capacity=config.buffer_capacity,
            warmup=config.warmup,
        )
        run_dir = _run_dir(config, "expert")
        write_csv(
            os.path.join(run_dir, "curve.csv"),
            ["episode", "reward", "moving_avg_1000"],
            curve,
        )
        save_expert_bundle(os.path.join(run_dir, "expert.bin"), expert, config)
        _write_snapshot(run_dir, config)
        print(
            f"trained {config.scenario} expert ({config.variant}), seed {seed}: "
            f"best moving average {_fmt(expert.best_avg)} -> {run_dir}"
        )
    return 0


# -- decentralize ----------------------------------------------------------


def cmd_decentralize(args) -> int:
    from .comm import decentralize_comm
    from .decentralize import decentralize

    base = _build_config(args)
    expert = load_expert(args.expert)
    if expert.spec.name != base.scenario:
        raise ValueError(
            f"checkpoint is for scenario {expert.spec.name!r}, "
            f"config says {base.scenario!r}"
        )
    for seed in range(base.seed, base.seed + args.seeds):
        config = replace(base, seed=seed)
        if getattr(args, "episodes", None):
            config = replace(config, decent_episodes=args.episodes)
        spec = make_scenario(config.scenario)
        with_comm = any(w > 0 for w in spec.comm_out)
        rng = np.random.default_rng(config.seed)
        if with_comm:
            agents, curve, info = decentralize_comm(
                expert,
                spec,
                rng,
                episodes=config.decent_episodes,
                hidden=config.agent_hidden,
                batch_size=config.agent_batch,
                lr=config.agent_lr,
                eval_every=config.eval_every,
                eval_episodes=config.eval_episodes,
                stop_tolerance=config.stop_tolerance,
                clip_norm=config.agent_clip,
                min_dataset=config.min_dataset,
                comm_loss_enabled=config.comm_loss_enabled,
            )
            header = ["episode", "eval_reward"]
            header += [f"action_loss_agent{a.index}" for a in agents]
            header += [f"comm_loss_agent{a.index}" for a in agents]
            mode = "comm"
        else:
            agents, curve, info = decentralize(
                expert,
                spec,
                rng,
                episodes=config.decent_episodes,
                hidden=config.agent_hidden,
                batch_size=config.agent_batch,
                lr=config.agent_lr,
                loss_kind=config.loss_kind,
                dataset_mode=config.dataset_mode,
                eval_every=config.eval_every,
                eval_episodes=config.eval_episodes,
                stop_tolerance=config.stop_tolerance,
                clip_norm=config.agent_clip,
                min_dataset=config.min_dataset,
            )
            header = ["episode", "eval_reward"]
            header += [f"loss_agent{a.index}" for a in agents]
            mode = "plain"
        run_dir = _run_dir(config, "decent")
        write_csv(os.path.join(run_dir, "curves.csv"), header, curve)
        save_agents_bundle(
            os.path.join(run_dir, "agents.bin"), agents, spec, mode, config
        )
        _write_snapshot(run_dir, config)
        with open(os.path.join(run_dir, "info.txt"), "w") as fh:
            fh.write(f"expert_ref={_fmt(info['expert_ref'])}\n")
            fh.write(f"stopped_at={info['stopped_at']}\n")
        stopped = info["stopped_at"]
        note = f"stopped at episode {stopped}" if stopped is not None else "ran to cap"
        print(f"decentralized {config.scenario} ({mode}), seed {seed}: {note} -> {run_dir}")
    return 0


# -- evaluate --------------------------------------------------------------


def _bundle_kind(path) -> str:
    return load_checkpoint(path)[0][1].get("kind", "?")


def _evaluate_bundle(path, episodes: int, seed: int):
    """Returns (label, spec, mean, stderr) for either bundle kind."""
    kind = _bundle_kind(path)
    rng = np.random.default_rng(seed)
    if kind == "expert":
        from .expert import evaluate_expert

        expert = load_expert(path)
        mean, stderr = evaluate_expert(expert, episodes, rng)
        return "expert", expert.spec, mean, stderr
    if kind == "agents":
        agents, spec, mode = load_agents(path)
        if mode == "comm":
            from .comm import evaluate_comm

            mean, stderr = evaluate_comm(agents, spec, episodes, rng)
        else:
            from .decentralize import evaluate

            mean, stderr = evaluate(agents, spec, episodes, rng)
        return f"agents[{mode}]", spec, mean, stderr
    raise ValueError(f"unknown bundle kind {kind!r} in {path}")


def _dump_trajectory(path, bundle_path, seed: int) -> None:
    kind = _bundle_kind(bundle_path)
    rng = np.random.default_rng(seed)
    rows = []
    if kind == "expert":
        from .expert import expert_act

        expert = load_expert(bundle_path)
        spec = expert.spec
        state, obs = env_reset(spec, rng)
        act = lambda o: expert_act(expert, o, "greedy")
    else:
        agents, spec, mode = load_agents(bundle_path)
        if mode == "comm":
            from .comm import comm_joint_action

            act = lambda o: comm_joint_action(agents, spec, o, "greedy")
        else:
            from .decentralize import agents_joint_action

            act = lambda o: agents_joint_action(agents, spec, o, "greedy")
        state, obs = env_reset(spec, rng)
    t, done = 0, False
    while not done:
        action = act(obs)
        state, obs, reward, done = env_step(spec, state, action)
        rows.append((t, state, action, reward))
        t += 1
    write_trajectory_csv(path, spec, rows)


def cmd_evaluate(args) -> int:
    label, spec, mean, stderr = _evaluate_bundle(
        args.checkpoint, args.episodes, args.seed
    )
    lines = [
        f"bundle={args.checkpoint}",
        f"kind={label}",
        f"scenario={spec.name}",
        f"episodes={args.episodes}",
        f"seed={args.seed}",
        f"mean_reward={_fmt(mean)}",
        f"stderr={_fmt(stderr)}",
    ]
    if args.against:
        label2, spec2, mean2, stderr2 = _evaluate_bundle(
            args.against, args.episodes, args.seed
        )
        if spec2.name != spec.name:
            raise ValueError(
                f"cannot compare bundles for {spec.name!r} and {spec2.name!r}"
            )
        lines += [
            f"against={args.against}",
            f"against_kind={label2}",
            f"against_mean_reward={_fmt(mean2)}",
            f"against_stderr={_fmt(stderr2)}",
            f"delta={_fmt(mean - mean2)}",
        ]
    if args.dump_trajectory:
        _dump_trajectory(args.dump_trajectory, args.checkpoint, args.seed)
        lines.append(f"trajectory={args.dump_trajectory}")
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(report)
    return 0


# -- theory ----------------------------------------------------------------


def _theory_fixture(name: str):
    from . import tabular

    if name == "xor":
        return tabular.xor_mdp()
    if name == "separable":
        return tabular.separable_mdp()
    if name == "disjoint":
        mdp, expert_pol, learner_pol = tabular.disjoint_reach_mdp()
        return mdp, (expert_pol, learner_pol)
    raise ValueError(f"unknown fixture {name!r}; pick xor, separable or disjoint")


def _theory_instances(args):
    """Yields (label, mdp, expert int matrix) for the sweep commands."""
    from . import tabular

    if args.instance:
        mdp, expert = tabular.load_tabular(args.instance)
        if expert is None:
            raise ValueError(f"{args.instance} has no expert block")
        yield args.instance, mdp, expert
        return
    if args.random:
        rng = np.random.default_rng(args.seed)
        for k in range(args.random):
            mdp = tabular.random_instance(rng)
            yield f"random[{k}]", mdp, tabular.random_expert(mdp, rng)
        return
    mdp, expert = _theory_fixture(args.fixture)
    yield args.fixture, mdp, expert


def _theory_tv(args) -> int:
    from . import tabular

    failures = 0
    count = 0
    if args.fixture == "disjoint" and not (args.instance or args.random):
        mdp, (expert_pol, learner_pol) = _theory_fixture("disjoint")
        report = tabular.check_tv_lemma(mdp, expert_pol, learner_pol, 1.0)
        tight = abs(report.lhs - report.bound) <= 1e-9
        ok = report.holds and tight
        print(
            f"disjoint: lhs={_fmt(report.lhs)} bound={_fmt(report.bound)} "
            f"holds={report.holds} tight={tight}"
        )
        return 0 if ok else 1
    rng = np.random.default_rng(args.seed + 1)
    for label, mdp, expert in _theory_instances(args):
        expert_pol = tabular.expert_joint_matrix(mdp, expert)
        learner_pol = tabular.random_policy_matrix(mdp, rng)
        beta = args.mix_prob if args.mix_prob is not None else float(rng.uniform())
        report = tabular.check_tv_lemma(mdp, expert_pol, learner_pol, beta)
        count += 1
        if not report.holds:
            failures += 1
            print(
                f"{label}: VIOLATION lhs={_fmt(report.lhs)} "
                f"bound={_fmt(report.bound)}"
            )
    print(f"tv-lemma: {count - failures}/{count} instances hold")
    return 0 if failures == 0 else 1


def _theory_po(args) -> int:
    from . import tabular

    if args.fixture == "disjoint" and not (args.instance or args.random):
        raise ValueError("the disjoint fixture only applies to tv-lemma")
    bad = 0
    count = 0
    for label, mdp, expert in _theory_instances(args):
        conflicts = tabular.detect_po_conflict(mdp, expert)
        zero_exists = tabular.zero_loss_policy_exists(mdp, expert)
        consistent = bool(conflicts) == (not zero_exists)
        count += 1
        if conflicts:
            print(f"{label}: {len(conflicts)} conflict(s), e.g. {conflicts[0]}")
        else:
            print(f"{label}: no conflicts")
        if not consistent:
            bad += 1
            print(f"{label}: INCONSISTENT with brute-force enumeration")
    print(f"po-conflict: {count - bad}/{count} instances consistent")
    return 0 if bad == 0 else 1


def _theory_comm(args) -> int:
    from . import tabular

    if args.fixture == "disjoint" and not (args.instance or args.random):
        raise ValueError("the disjoint fixture only applies to tv-lemma")
    protocol = args.protocol or "identity"
    bad = 0
    count = 0
    for label, mdp, expert in _theory_instances(args):
        if protocol == "identity":
            comm = tabular.identity_comm(mdp)
        elif protocol == "constant":
            comm = tabular.constant_comm(mdp)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
        report = tabular.check_comm_sufficiency(mdp, expert, comm)
        ok = report.condition_holds and report.matches_expert
        count += 1
        if not ok:
            bad += 1
        print(
            f"{label}: protocol={protocol} condition={report.condition_holds} "
            f"matches_expert={report.matches_expert}"
        )
    print(f"comm-sufficiency: {count - bad}/{count} instances pass")
    return 0 if bad == 0 else 1


def cmd_theory(args) -> int:
    if args.check == "tv-lemma":
        return _theory_tv(args)
    if args.check == "po-conflict":
        return _theory_po(args)
    if args.check == "comm-sufficiency":
        return _theory_comm(args)
    raise ValueError(f"unknown theory check {args.check!r}")


# -- argument parsing ------------------------------------------------------


def _add_common(parser) -> None:
    parser.add_argument("--scenario", help="scenario name")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="base seed")
    parser.add_argument("--seeds", type=int, default=1, help="run this many consecutive seeds")
    parser.add_argument("--variant", choices=EXPERT_VARIANTS, default=None)
    parser.add_argument("--out", help="output root directory")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override any config field (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctde-lab",
        description="centralized training, decentralized execution: a desk-scale lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-expert", help="train a centralized expert")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=None, help="expert episode cap")
    p.set_defaults(func=cmd_train_expert)

    p = sub.add_parser("decentralize", help="imitate an expert with per-agent policies")
    _add_common(p)
    p.add_argument("--expert", required=True, help="expert checkpoint path")
    p.add_argument("--episodes", type=int, default=None, help="decentralization episode cap")
    p.set_defaults(func=cmd_decentralize)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint bundle")
    p.add_argument("--checkpoint", required=True, help="expert or agents bundle")
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--against", help="second bundle for a shared-seed comparison")
    p.add_argument("--dump-trajectory", help="write one greedy episode to this CSV")
    p.add_argument("--report", help="also write the report to this file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("theory", help="run a tabular consistency check")
    p.add_argument("check", choices=["tv-lemma", "po-conflict", "comm-sufficiency"])
    p.add_argument("--fixture", default="xor", help="xor, separable or disjoint")
    p.add_argument("--instance", help="plain-text instance file")
    p.add_argument("--random", type=int, default=0, help="sweep this many random instances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--protocol", choices=["identity", "constant"], default=None)
    p.add_argument("--mix-prob", type=float, default=None)
    p.set_defaults(func=cmd_theory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
