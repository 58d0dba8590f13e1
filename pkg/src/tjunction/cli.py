"""Command-line entry point.

Commands:
    tjunction train {ego-initial,guiding,meta,ego-final}
    tjunction eval {kl,sweep,probe,cross}
    tjunction replay TRACE [--verify]
    tjunction validate-config [--config PATH]

Exit codes: 0 success, 2 usage error (unknown command/flags), 3 invalid
configuration, 4 missing prerequisite checkpoint. Failures print a single
machine-readable line ``<error-class>: <message>`` to stderr.

The default output root comes from ``TJUNCTION_RUN_ROOT`` (falling back to
``./runs``); every run directory receives a manifest that pins the effective
config, its hash, and the seed, from which the artifacts are reproducible
byte-for-byte (``--from-manifest`` re-runs one).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .manifest import read_manifest, write_manifest
from .sim.types import ConfigError
from .train.config import RunConfig, STAGES, config_hash
from .train.stages import MissingPrerequisite, run_stage

ENV_RUN_ROOT = "TJUNCTION_RUN_ROOT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"usage-error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _build_parser() -> _Parser:
    p = _Parser(prog="tjunction", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="run config JSON (defaults built in)")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", type=Path, default=None, help="output directory")
        sp.add_argument("--workers", type=int, default=1, help="parallel episode workers (eval only)")

    tr = sub.add_parser("train", help="train one pipeline stage")
    tr.add_argument("stage", choices=STAGES)
    common(tr)
    tr.add_argument("--steps", type=int, default=None, help="override the stage's environment-step budget")
    tr.add_argument("--reg-weight", type=float, default=None, help="override the regularization weight (meta stage)")
    tr.add_argument("--ego-initial", type=Path, default=None, help="ego-initial checkpoint")
    tr.add_argument("--guiding", type=Path, default=None, help="guiding checkpoint")
    tr.add_argument("--meta", type=Path, default=None, help="meta checkpoint")
    tr.add_argument("--from-manifest", type=Path, default=None, help="re-run the stage pinned by a manifest")

    ev = sub.add_parser("eval", help="run an evaluation")
    ev.add_argument("kind", choices=("kl", "sweep", "probe", "cross"))
    common(ev)
    ev.add_argument("--social", type=Path, default=None, help="guided meta social checkpoint")
    ev.add_argument("--social-ablation", type=Path, default=None, help="non-guided meta social checkpoint")
    ev.add_argument("--ego", type=Path, default=None, help="frozen initial ego checkpoint")
    ev.add_argument("--ego-final", type=Path, default=None, help="mixed-trained ego checkpoint")
    ev.add_argument("--episodes", type=int, default=None, help="episodes per cross-evaluation cell")
    ev.add_argument("--seeds", type=int, default=None, help="number of evaluation seeds")
    ev.add_argument("--samples", type=int, default=None, help="samples per KL point / sweep records per beta")
    ev.add_argument("--archive-traces", type=int, default=0, help="archive up to N episode traces per cell")
    ev.add_argument("--from-manifest", type=Path, default=None)

    rp = sub.add_parser("replay", help="replay an archived episode trace")
    rp.add_argument("trace", type=Path)
    rp.add_argument("--verify", action="store_true", help="re-simulate and demand byte identity")

    vc = sub.add_parser("validate-config", help="parse and validate a config file")
    vc.add_argument("--config", type=Path, default=None)
    return p


def _load_config(path: Path | None, seed: int | None, doc: dict | None = None) -> RunConfig:
    if doc is not None:
        cfg = RunConfig.from_dict(doc)
    elif path is not None:
        cfg = RunConfig.from_json_file(path)
    else:
        cfg = RunConfig()
        cfg.validate()
    if seed is not None:
        cfg.seed = seed
    return cfg


def _out_dir(args, command: str, stage: str, seed: int) -> Path:
    if args.out is not None:
        return args.out
    root = Path(os.environ.get(ENV_RUN_ROOT, "runs"))
    return root / f"{command}-{stage}-seed{seed}"


def _cmd_train(args) -> int:
    manifest = read_manifest(args.from_manifest) if args.from_manifest else None
    doc = manifest["config"] if manifest else None
    seed = args.seed if args.seed is not None else (manifest["seed"] if manifest else None)
    cfg = _load_config(args.config, seed, doc)
    seed = cfg.seed
    options = dict(manifest["options"]) if manifest else {}
    if args.steps is not None:
        options["steps"] = args.steps
    if args.reg_weight is not None:
        options["reg_weight"] = args.reg_weight
    prereq = dict(manifest["prerequisites"]) if manifest else {}
    for key, val in (("ego-initial", args.ego_initial), ("guiding", args.guiding), ("meta", args.meta)):
        if val is not None:
            prereq[key] = val

    out = _out_dir(args, "train", args.stage, seed)
    started = time.perf_counter()
    artifacts = run_stage(
        args.stage,
        cfg,
        out,
        seed=seed,
        prereq=prereq,
        total_env_steps=options.get("steps"),
        reg_weight=options.get("reg_weight"),
    )
    write_manifest(
        out, "train", args.stage, seed, cfg,
        outputs={k: Path(v).name for k, v in artifacts.items()},
        options=options, prerequisites=prereq,
        wall_clock_s=time.perf_counter() - started,
    )
    print(f"ok: stage {args.stage} -> {out} (config {config_hash(cfg)[:12]}, seed {seed})")
    return 0


def _resolve_ego(path: Path):
    from .train.stages import load_ego_net, load_trajae

    net, meta = load_ego_net(path)
    trajae = None
    if meta.get("uses_latents") and meta.get("trajae_file"):
        candidate = Path(path).parent / meta["trajae_file"]
        if not candidate.exists():
            raise MissingPrerequisite(f"ego checkpoint {path} references missing {candidate}")
        trajae = load_trajae(candidate)
    return net, meta, trajae


def _cmd_eval(args) -> int:
    from .evaluation import (
        EgoSpec,
        EvalReport,
        FamilySpec,
        cross_evaluate,
        estimate_kl,
        probe_actions,
        run_episodes,
        sweep_preference_reward,
    )
    from .train.stages import load_ego_net, load_social_net

    manifest = read_manifest(args.from_manifest) if args.from_manifest else None
    doc = manifest["config"] if manifest else None
    seed = args.seed if args.seed is not None else (manifest["seed"] if manifest else None)
    cfg = _load_config(args.config, seed, doc)
    seed = cfg.seed
    options = dict(manifest["options"]) if manifest else {}
    for key, val in (
        ("episodes", args.episodes), ("seeds", args.seeds), ("samples", args.samples),
        ("archive_traces", args.archive_traces or None),
    ):
        if val is not None:
            options[key] = val
    prereq = dict(manifest["prerequisites"]) if manifest else {}
    for key, val in (
        ("social", args.social), ("social-ablation", args.social_ablation),
        ("ego", args.ego), ("ego-final", args.ego_final),
    ):
        if val is not None:
            prereq[key] = val

    def need(key: str) -> Path:
        val = prereq.get(key)
        if val is None or not Path(val).exists():
            raise MissingPrerequisite(f"eval {args.kind} requires --{key} (missing: {val})")
        return Path(val)

    out = _out_dir(args, "eval", args.kind, seed)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    report = EvalReport(metadata={"kind": args.kind, "seed": seed})
    n_seeds = options.get("seeds", cfg.eval.cross_seeds)
    eval_seeds = [seed + i for i in range(n_seeds)]

    if args.kind in ("kl", "sweep"):
        ego_net, _ = load_ego_net(need("ego"))
        policies = {"meta-rl": load_social_net(need("social"))}
        if prereq.get("social-ablation"):
            policies["meta-rl-no-guide"] = load_social_net(Path(prereq["social-ablation"]))
        grid = cfg.eval.beta_grid()
        if args.kind == "kl":
            samples = options.get("samples", cfg.eval.kl_samples)
            for name, net in policies.items():
                for b in grid:
                    anchor = _nearest_anchor(cfg, b)
                    est = estimate_kl(cfg, net, ego_net, anchor, b, samples, seed)
                    report.kl_curves.append(
                        {"policy": name, "beta": b, "anchor_index": anchor, "kl": est.kl,
                         "n_samples": est.n_samples, "low_sample_warning": est.low_sample_warning}
                    )
        else:
            samples = options.get("samples", cfg.eval.sweep_steps)
            for name, net in policies.items():
                for pt in sweep_preference_reward(cfg, net, ego_net, grid, samples, seed):
                    report.reward_curves.append(
                        {"policy": name, "beta": pt.beta, "mean": pt.mean, "stderr": pt.stderr, "n": pt.n}
                    )
        report.write_json(out / "report.json")
        report.write_curves_csv(out / "curves.csv")
        outputs = {"report": "report.json", "curves": "curves.csv"}
    elif args.kind == "probe":
        social = load_social_net(need("social"))
        queries = [("meta", b) for b in cfg.eval.beta_grid()]
        queries += [("guide", k) for k in range(len(cfg.anchors.values))]
        for r in probe_actions(cfg, social, queries, seed=seed):
            report.probe.append(
                {"query": r.query, "beta": r.beta, "action": r.action,
                 "desired_speed": r.desired_speed, "probs": r.probs}
            )
        report.write_json(out / "report.json")
        outputs = {"report": "report.json"}
    else:  # cross
        episodes = options.get("episodes", cfg.eval.cross_episodes)
        ego_ckpts: dict[str, tuple] = {}
        if prereq.get("ego"):
            ego_ckpts["ego-idm-trained"] = (need("ego"), None)
        if prereq.get("ego-final"):
            path = need("ego-final")
            _, meta, trajae = _resolve_ego(path)
            trajae_path = Path(path).parent / meta["trajae_file"] if meta.get("trajae_file") else None
            ego_ckpts["ego-mixed-trained"] = (path, trajae_path)
        if not ego_ckpts:
            raise MissingPrerequisite("eval cross requires --ego and/or --ego-final")
        families: dict[str, dict] = {"idm": {"kind": "idm"}}
        if prereq.get("social"):
            families["meta-rl"] = {
                "kind": "meta", "social": str(need("social")),
                "beta_lo": cfg.train.beta_min, "beta_hi": cfg.train.beta_max,
            }
            families["meta-rl-u33"] = {
                "kind": "meta", "social": str(need("social")),
                "beta_lo": cfg.eval.ood_beta_min, "beta_hi": cfg.eval.ood_beta_max,
            }
        if prereq.get("social-ablation"):
            families["meta-rl-no-guide"] = {
                "kind": "meta", "social": str(Path(prereq["social-ablation"])),
                "beta_lo": cfg.train.beta_min, "beta_hi": cfg.train.beta_max,
            }
        report = cross_evaluate(cfg, ego_ckpts, families, episodes, eval_seeds, workers=args.workers)
        report.metadata["kind"] = "cross"
        report.metadata["seed"] = seed
        if options.get("archive_traces"):
            _archive_traces(cfg, ego_ckpts, families, out / "traces", seed, options["archive_traces"])
        report.write_json(out / "report.json")
        report.write_cells_csv(out / "cells.csv")
        outputs = {"report": "report.json", "cells": "cells.csv"}
        if options.get("archive_traces"):
            outputs["traces"] = "traces"

    write_manifest(
        out, "eval", args.kind, seed, cfg, outputs=outputs, options=options,
        prerequisites=prereq, wall_clock_s=time.perf_counter() - started,
    )
    print(f"ok: eval {args.kind} -> {out} (config {config_hash(cfg)[:12]}, seed {seed})")
    return 0


def _nearest_anchor(cfg: RunConfig, beta: float) -> int:
    # ties break toward the lower (more adversarial) anchor
    values = cfg.anchors.values
    best, best_d = 0, abs(values[0] - beta)
    for k, a in enumerate(values[1:], start=1):
        d = abs(a - beta)
        if d < best_d - 1e-12:
            best, best_d = k, d
    return best


def _archive_traces(cfg, ego_ckpts, families, trace_root: Path, seed: int, limit: int) -> None:
    from .evaluation.harness import _eval_plan, FamilySpec
    from .train.rollout import NetBundle, RolloutCollector
    from .train.stages import load_social_net

    for ego_name, (ego_path, trajae_path) in ego_ckpts.items():
        net, meta, trajae = _resolve_ego(Path(ego_path))
        for fam_name, spec in families.items():
            social = load_social_net(spec["social"]) if spec.get("social") else None
            family = FamilySpec(fam_name, spec["kind"], spec.get("beta_lo", -1.0), spec.get("beta_hi", 3.0), social)
            use_latents = bool(meta.get("uses_latents")) and trajae is not None
            plan = _eval_plan(f"trace-{fam_name}", family, use_latents)
            collector = RolloutCollector(cfg, plan, NetBundle(ego=net, social=social, trajae=trajae), seed)
            collector.enable_tracing(trace_root / f"{ego_name}--{fam_name}", limit)
            done = 0
            while collector._traces_written < limit or collector._trace_files:
                batch = collector.collect(32)
                done += len(batch.episodes)
                if done > limit + collector.n_envs * 4:
                    break


def _cmd_replay(args) -> int:
    from .trace import replay_trace

    summary = replay_trace(args.trace, verify=args.verify)
    print(f"replayed {summary.steps} steps; outcome={summary.outcome}; flags={summary.final_flags}")
    if args.verify:
        if summary.verified:
            print("verify: byte-identical")
        else:
            print(f"verify-failed: first mismatch at line {summary.mismatch_line}", file=sys.stderr)
            return 1
    return 0


def _cmd_validate(args) -> int:
    cfg = _load_config(args.config, None)
    print(f"config-ok: {config_hash(cfg)}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "replay":
            return _cmd_replay(args)
        return _cmd_validate(args)
    except ConfigError as e:
        print(f"invalid-config: {e}", file=sys.stderr)
        return 3
    except MissingPrerequisite as e:
        print(f"missing-prerequisite: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
