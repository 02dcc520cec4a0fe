import argparse
import os
import sys
from typing import List, Optional

import yaml

from config.settings import OUTPUT_DIR, SEED, TIME_LIMIT
from core.errors import ConfigError, MAiFError, PlannerTimeout
from core.gridworld import FormationGridEnv, Scenario, formation_preset, generate_map, load_scenario, save_map
from core.logger import setup_logger
from services.bench import (emit_reports, generate_map_pool, load_benchmark_config, run_benchmark,
                            summary_table, timeout_dominated)
from services.execution import formation_policy_actor, random_policy
from services.learning import (PolicyBundle, TrainConfig, train_end_to_end_baseline, train_formation_policy,
                               train_meta_policy, train_path_policy, write_training_log)
from services.planners import PLANNERS, format_plan, plan_scenario
from services.scalarization import (SWEEP_MULTIPLIERS, WEIGHT_REPORT, estimate_base_weight, load_weight_report,
                                    pareto_sweep, save_weight_report)
from services.value_functions import load_checkpoint, save_checkpoint

logger = setup_logger("maif")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_TIMEOUT = 3


def _train_config(args) -> TrainConfig:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    return config


def _read_section(path: Optional[str], section: str) -> dict:
    if not path:
        return {}
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    return raw.get(section, {}) if isinstance(raw, dict) else {}


def _weight(args, policy_dir: str) -> float:
    if args.w_f is not None:
        return args.w_f
    report = os.path.join(policy_dir, WEIGHT_REPORT)
    if not os.path.exists(report):
        raise ConfigError(f"no --w-f given and no {WEIGHT_REPORT} in {policy_dir}; run 'weigh' first")
    return load_weight_report(report).w_f


def cmd_gen_maps(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    pool = generate_map_pool(args.count, args.size, args.density, args.seed if args.seed is not None else SEED)
    for i, grid_map in enumerate(pool):
        save_map(grid_map, os.path.join(args.out, f"map_{i:03d}.txt"))
    print(f"Wrote {len(pool)} maps to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _train_config(args)
    os.makedirs(args.out, exist_ok=True)
    policy_dir = args.policy_dir or args.out

    if args.phase == "path":
        value_fn = train_path_policy(None, config)
    elif args.phase == "formation":
        value_fn = train_formation_policy(config)
    elif args.phase == "meta":
        path_policy = load_checkpoint(os.path.join(policy_dir, "path_policy.pt"))
        formation_policy = load_checkpoint(os.path.join(policy_dir, "formation_policy.pt"))
        w_f = _weight(args, policy_dir)
        value_fn = train_meta_policy(path_policy, formation_policy, w_f, config)
        PolicyBundle(path_policy, formation_policy, value_fn, w_f, config.agent_count).save(args.out)
    else:
        value_fn = train_end_to_end_baseline(config, args.w_f or 0.0)

    if args.phase != "meta":
        save_checkpoint(value_fn, os.path.join(args.out, f"{args.phase}_policy.pt"))
    write_training_log(value_fn.history, os.path.join(args.out, f"training_{args.phase}.csv"))
    print(f"Trained {args.phase} policy for {config.total_episodes} episodes; outputs in {args.out}")
    return EXIT_OK


def cmd_weigh(args) -> int:
    config = _train_config(args)
    policy_dir = args.policy_dir or args.out
    formation_policy = load_checkpoint(os.path.join(policy_dir, "formation_policy.pt"))
    grid_map = generate_map(config.map_size, config.density, config.seed, agent_count=config.agent_count)
    env = FormationGridEnv(grid_map, config.formation_offsets(), start_mode="random")
    estimate = estimate_base_weight(formation_policy_actor(formation_policy), random_policy, env,
                                    args.episodes, config.seed)
    os.makedirs(args.out, exist_ok=True)
    save_weight_report(estimate, os.path.join(args.out, WEIGHT_REPORT))
    print(f"w_f = {estimate.w_f:.4f} ± {estimate.confidence_halfwidth:.4f} "
          f"(T={estimate.T}, e_min={estimate.e_min:.3f}, e_max={estimate.e_max:.3f})")
    return EXIT_OK


def cmd_plan(args) -> int:
    scenario = load_scenario(args.scenario)
    time_limit = args.time_limit or TIME_LIMIT
    try:
        plan = plan_scenario(args.method, scenario, args.weight, time_limit)
    except PlannerTimeout as e:
        logger.error(str(e))
        print("-")
        return EXIT_TIMEOUT
    text = format_plan(plan)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "plan.txt"), "w") as f:
        f.write(text)
    print(text, end="")
    print(f"# makespan={plan.makespan} formation_loss={plan.total_formation_loss:.3f} runtime={plan.runtime:.3f}s")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = load_benchmark_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.time_limit:
        config.time_limit = args.time_limit
    rows = run_benchmark(config)
    emit_reports(rows, [], {}, args.out)
    print(summary_table(rows), end="")
    return EXIT_TIMEOUT if timeout_dominated(rows) else EXIT_OK


def cmd_pareto(args) -> int:
    config = load_benchmark_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    size, density, agents = config.cells[0]
    offsets = formation_preset(config.formation, agents)
    maps = generate_map_pool(config.maps_per_cell, size, density, config.seed, agent_count=agents)
    instances = [Scenario.from_map(m, offsets, config.seed) for m in maps]

    policy_dir = args.policy_dir or args.out
    base_weight = _weight(args, policy_dir)
    bundle_factory = None
    if os.path.exists(os.path.join(policy_dir, "path_policy.pt")):
        train_config = TrainConfig.from_dict(_read_section(args.config, "train"))

        def bundle_factory(weight: float) -> PolicyBundle:
            path_policy = load_checkpoint(os.path.join(policy_dir, "path_policy.pt"))
            formation_policy = load_checkpoint(os.path.join(policy_dir, "formation_policy.pt"))
            meta = train_meta_policy(path_policy, formation_policy, weight, train_config)
            return PolicyBundle(path_policy, formation_policy, meta, weight, agents)

    points = pareto_sweep(bundle_factory, args.multipliers, instances, base_weight,
                          time_limit=args.time_limit or config.time_limit,
                          warmup_steps=config.warmup_steps, seed=config.seed)
    emit_reports([], points, {}, args.out)
    for p in points:
        print(f"{p.source:>12} x{p.multiplier:<4g} weight={p.weight:.4f} "
              f"makespan={p.makespan:.2f} loss={p.formation_loss:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maif", description="Multi-agent path finding in formation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="YAML config file")
    common.add_argument("--out", default=OUTPUT_DIR, help="output directory")
    common.add_argument("--time-limit", type=float, default=None, help="planner time limit in seconds")

    verbs = parser.add_subparsers(dest="verb", required=True)

    gen = verbs.add_parser("gen-maps", parents=[common], help="generate a map pool")
    gen.add_argument("--count", type=int, default=100)
    gen.add_argument("--size", type=int, default=32)
    gen.add_argument("--density", type=float, default=0.15)
    gen.set_defaults(func=cmd_gen_maps)

    train = verbs.add_parser("train", parents=[common], help="train one policy")
    train.add_argument("--phase", required=True, choices=("path", "formation", "meta", "end2end"))
    train.add_argument("--w-f", dest="w_f", type=float, default=None)
    train.add_argument("--policy-dir", default=None, help="where trained low-level policies live")
    train.set_defaults(func=cmd_train)

    weigh = verbs.add_parser("weigh", parents=[common], help="estimate the base formation weight")
    weigh.add_argument("--episodes", type=int, default=30)
    weigh.add_argument("--policy-dir", default=None)
    weigh.set_defaults(func=cmd_weigh)

    plan = verbs.add_parser("plan", parents=[common], help="plan a scenario with CBS or joint A*")
    plan.add_argument("--method", required=True, choices=PLANNERS)
    plan.add_argument("--scenario", required=True)
    plan.add_argument("--weight", type=float, default=0.0)
    plan.set_defaults(func=cmd_plan)

    bench = verbs.add_parser("bench", parents=[common], help="run the benchmark")
    bench.set_defaults(func=cmd_bench)

    pareto = verbs.add_parser("pareto", parents=[common], help="sweep multiples of the base weight")
    pareto.add_argument("--multipliers", type=float, nargs="+", default=list(SWEEP_MULTIPLIERS))
    pareto.add_argument("--w-f", dest="w_f", type=float, default=None)
    pareto.add_argument("--policy-dir", default=None)
    pareto.set_defaults(func=cmd_pareto)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb in ("bench", "pareto") and not args.config:
        logger.error(f"'{args.verb}' needs --config")
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except (MAiFError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
