"""Command-line entry point.

Subcommands: ``verify`` (property suites, JSON report), ``counterexample``
(closed-form versus numeric sweep as CSV), ``em-demo`` (exact EM traces) and
``train`` (actor-critic on the toy tasks).  Every output file starts with a
header block recording the tool version, subcommand, seed and fully resolved
configuration; exit codes are 0 on success, 1 on a failed check or diverged
run, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, actor_critic, em_exact, maxent, verify
from .actor_critic import TrainConfig
from .approximator import save_params
from .mdp import CounterexampleParams, build_counterexample, make_continuous_bandit, \
    make_point_mass, random_mdp


class UsageError(ValueError):
    pass


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return "none"
    return str(v)


def _meta(subcommand: str, seed: int, config: dict) -> dict:
    meta = {"tool": "varac", "version": __version__, "subcommand": subcommand,
            "seed": seed}
    for key in sorted(config):
        meta[f"config.{key}"] = config[key]
    return meta


def write_csv(path: Path, meta: dict, fieldnames, rows) -> None:
    lines = [f"# {k}={_format(v)}" for k, v in meta.items()]
    lines.append(",".join(fieldnames))
    for row in rows:
        lines.append(",".join(_format(row[name]) for name in fieldnames))
    path.write_text("\n".join(lines) + "\n")


def parse_config_text(text: str) -> dict:
    """`key = value` lines; blank lines and '#' comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise UsageError(f"line {lineno}: empty key or value")
        out[key] = value
    return out


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_INT_FIELDS = {name for name, f in _CONFIG_FIELDS.items() if f.type == "int"}


def _coerce(key: str, value: str):
    if key not in _CONFIG_FIELDS:
        raise UsageError(f"unknown config key {key!r}")
    if key == "lambda_beta" and value.lower() in ("none", "adaptive"):
        return None
    try:
        return int(value) if key in _INT_FIELDS else float(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key!r}: {value!r}") from exc


def build_train_config(file_text: str | None, overrides: list[str]) -> TrainConfig:
    raw = parse_config_text(file_text) if file_text else {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        raw[key] = value
    kwargs = {key: _coerce(key, value) for key, value in raw.items()}
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _parse_sets(overrides: list[str]) -> dict:
    out = {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        out[key] = value
    return out


def cmd_verify(args) -> int:
    checks, artifacts = verify.run_suite(args.suite, args.seed)
    report = {
        "header": _meta("verify", args.seed, {"suite": args.suite}),
        "checks": [c.as_dict() for c in checks],
        "passed": all(c.passed for c in checks),
    }
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"{status} {check.name} error={check.error:.3e} tolerance={check.tolerance:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        traces = artifacts.get("dirac_traces")
        if traces:
            rows = []
            for table_index, trace in traces:
                for eps, tv in zip(trace.eps_values, trace.tv_distances):
                    rows.append({"table": table_index, "eps": float(eps), "tv": float(tv)})
            write_csv(out / "dirac_trace.csv",
                      _meta("verify", args.seed, {"suite": args.suite}),
                      ("table", "eps", "tv"), rows)
    if not report["passed"]:
        failed = [c.name for c in checks if not c.passed]
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_counterexample(args) -> int:
    sets = _parse_sets(args.set)
    k2 = int(sets.pop("k2", 10))
    k1_values = [int(x) for x in sets.pop("k1_values", "1,3,10,30,100").split(",")]
    gamma_values = [float(x) for x in sets.pop("gamma_values", "0,0.2,0.5,0.9,0.99").split(",")]
    c_values = [float(x) for x in sets.pop("c_values", "0.2,0.5,1,2,5").split(",")]
    if sets:
        raise UsageError(f"unknown keys: {sorted(sets)}")

    hard_actions = {}
    rows = []
    for k1 in k1_values:
        for gamma in gamma_values:
            key = (k1, gamma)
            if key not in hard_actions:
                mdp = build_counterexample(CounterexampleParams(k1, k2, gamma, 1.0))
                final = em_exact.em_policy_iteration(mdp)[-1]
                hard_actions[key] = "a2" if final.policy.greedy_actions()[0] == 1 else "a1"
            for c in c_values:
                closed = maxent.optimal_p1_closed(k1, gamma, c)
                numeric = maxent.optimal_p1_numeric(k1, gamma, c)
                rows.append({
                    "k1": k1,
                    "gamma": gamma,
                    "c": c,
                    "p1_closed": closed.p1,
                    "p1_numeric": numeric,
                    "indicator": closed.mode_flips,
                    "hard_optimal_action": hard_actions[key],
                })

    config = {"k2": k2, "k1_values": ",".join(map(str, k1_values)),
              "gamma_values": ",".join(map(_format, gamma_values)),
              "c_values": ",".join(map(_format, c_values))}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "counterexample.csv", _meta("counterexample", args.seed, config),
              ("k1", "gamma", "c", "p1_closed", "p1_numeric", "indicator",
               "hard_optimal_action"), rows)
    return 0


def _build_demo_mdp(source: str, seed: int, sets: dict):
    if source == "counterexample":
        params = CounterexampleParams(
            k1=int(sets.pop("k1", 2)),
            k2=int(sets.pop("k2", 5)),
            gamma=float(sets.pop("gamma", 0.9)),
            c=float(sets.pop("c", 1.0)),
        )
        return build_counterexample(params), dataclasses.asdict(params)
    if source == "random":
        n_states = int(sets.pop("n_states", 6))
        n_actions = int(sets.pop("n_actions", 3))
        gamma = float(sets.pop("gamma", 0.9))
        return random_mdp(n_states, n_actions, seed, gamma), {
            "n_states": n_states, "n_actions": n_actions, "gamma": gamma}
    path = Path(source)
    if not path.exists():
        raise UsageError(f"mdp source {source!r} is not a builtin or a file")
    from .mdp import DiscreteMdp

    return DiscreteMdp.from_json(path.read_text()), {"file": str(path)}


def cmd_em_demo(args) -> int:
    sets = _parse_sets(args.set)
    steps = int(sets.pop("steps", 30))
    mdp, source_cfg = _build_demo_mdp(args.mdp, args.seed, sets)
    if sets:
        raise UsageError(f"unknown keys: {sorted(sets)}")

    rows = []
    value_names = [f"v{s}" for s in range(mdp.n_states)]
    if args.mode == "policy_iteration":
        trace = em_exact.em_policy_iteration(mdp)
        for i, it in enumerate(trace):
            row = {"iteration": i, "policy_fingerprint": em_exact.policy_fingerprint(it.policy)}
            row.update({name: it.value[s] for s, name in enumerate(value_names)})
            rows.append(row)
    else:
        q0 = np.zeros((mdp.n_states, mdp.n_actions))
        tables = em_exact.em_q_learning(mdp, q0, steps)
        for i, table in enumerate(tables):
            policy = em_exact.ExactPolicy.greedy(table)
            row = {"iteration": i, "policy_fingerprint": em_exact.policy_fingerprint(policy)}
            row.update({name: float(table[s].max()) for s, name in enumerate(value_names)})
            rows.append(row)

    config = {"mode": args.mode, "mdp": args.mdp, "steps": steps, **source_cfg}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "em_trace.csv", _meta("em-demo", args.seed, config),
              ["iteration"] + value_names + ["policy_fingerprint"], rows)
    return 0


def cmd_train(args) -> int:
    file_text = Path(args.config).read_text() if args.config else None
    config = build_train_config(file_text, args.set)
    env = make_continuous_bandit() if args.env == "bandit" else make_point_mass()
    try:
        result = actor_critic.train(env, config, args.variant, args.seed)
    except actor_critic.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1

    config_dict = actor_critic.config_to_dict(config)
    config_dict.update({"env": args.env, "variant": args.variant})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "train_trace.csv", _meta("train", args.seed, config_dict),
              actor_critic.TRACE_FIELDS, result.rows)
    save_params(out / "policy.params", result.policy.params)
    save_params(out / "q.params", result.q_net.params)
    save_params(out / "v.params", result.v_net.params)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varac")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run property suites and emit a JSON report")
    p.add_argument("--suite", choices=("theorems", "operators", "gradients", "all"),
                   default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("counterexample", help="closed-form vs numeric sweep CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("em-demo", help="exact EM iterate traces as CSV")
    p.add_argument("--mdp", default="counterexample",
                   help="'counterexample', 'random', or a JSON file path")
    p.add_argument("--mode", choices=("policy_iteration", "q_learning"),
                   default="policy_iteration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_em_demo)

    p = sub.add_parser("train", help="actor-critic training on a toy task")
    p.add_argument("--env", choices=("bandit", "point_mass"), required=True)
    p.add_argument("--variant", choices=("virel", "beta"), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
