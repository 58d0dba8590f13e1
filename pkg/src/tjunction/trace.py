"""Replay archived episode traces and verify them against the simulator."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

from .sim import Env, ScenarioConfig, TraceWriter
from .sim.env import sampler_from_spec


@dataclass
class ReplaySummary:
    steps: int
    final_flags: list[str]
    outcome: str
    verified: bool | None  # None when verification was not requested
    mismatch_line: int | None = None


def replay_trace(path: str | Path, verify: bool = False) -> ReplaySummary:
    """Re-simulate a trace from its recorded config/seed and actions.

    With ``verify`` the re-simulated step lines must match the archived ones
    byte for byte.
    """
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"trace {path} is empty")
    header = json.loads(lines[0])
    if header.get("trace_version") != 1:
        raise ValueError(f"unsupported trace version in {path}")
    config = ScenarioConfig.from_dict(header["config"])
    sampler = sampler_from_spec(header.get("sampler", {"mode": "zero"}))

    env = Env(config, sampler)
    env.reset(header["seed"])
    buf = io.StringIO()
    writer = TraceWriter(buf)
    writer.write_header(env.state, seed=header["seed"], sampler_spec=header.get("sampler", {"mode": "zero"}))

    steps = 0
    final_flags: list[str] = []
    outcome = "timeout"
    for lineno, line in enumerate(lines[1:], start=1):
        rec = json.loads(line)
        actions = [agent["action"] for agent in rec["agents"]]
        out = env.step(actions)
        writer.write_step(out, actions)
        steps += 1
        final_flags = out.flags
        if out.episode_done:
            flag = out.flags[0]
            outcome = "success" if flag == "goal" else ("collision" if flag == "fail" else "timeout")

    verified: bool | None = None
    mismatch = None
    if verify:
        replayed = buf.getvalue().splitlines()
        verified = True
        for i, (a, b) in enumerate(zip(lines, replayed)):
            if a != b:
                verified = False
                mismatch = i
                break
        if len(lines) != len(replayed):
            verified = False
            mismatch = mismatch if mismatch is not None else min(len(lines), len(replayed))
    return ReplaySummary(steps=steps, final_flags=final_flags, outcome=outcome, verified=verified, mismatch_line=mismatch)
