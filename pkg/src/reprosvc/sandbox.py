"""Sandboxed command execution for all pipeline stages.

Every command runs with:
  - a projected environment (whitelist plus a fixed minimal base, never the
    full service environment),
  - stdin closed (interactive steps fail by construction),
  - cpu / address-space / process rlimits,
  - a wall-clock watchdog that kills the whole process group on expiry,
  - network denied except where a stage explicitly allows it.

Network denial prefers a detached network namespace (``unshare --net``,
available when the service runs with sufficient privilege); when namespaces
are unavailable it falls back to black-hole proxy variables, which every
well-behaved fetch tool honors. The mechanism in use is recorded in the
transcript banner.
"""

from __future__ import annotations

import os
import resource
import shutil
import signal
import subprocess
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

from reprosvc.manifest import ResourceLimits

SPAWN_ERROR = "SPAWN_ERROR"

_BLACKHOLE_PROXY = "http://127.0.0.1:9/"
_PROXY_VARS = ("http_proxy", "https_proxy", "ftp_proxy", "HTTP_PROXY", "HTTPS_PROXY", "FTP_PROXY")


@dataclass(frozen=True)
class StepResult:
    """Outcome of one sandboxed command."""

    exit_status: int | str
    timed_out: bool
    transcript: bytes
    wall_ms: int

    @property
    def ok(self) -> bool:
        return self.exit_status == 0 and not self.timed_out


@lru_cache(maxsize=1)
def network_isolation_mechanism() -> str:
    """Probe once for the strongest available network-denial mechanism."""
    unshare = shutil.which("unshare")
    if unshare:
        try:
            probe = subprocess.run(
                [unshare, "--net", "--", "true"],
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
                timeout=10,
            )
            if probe.returncode == 0:
                return "netns"
        except (OSError, subprocess.SubprocessError):
            pass
    return "proxy-blackhole"


def project_environment(
    whitelist: Sequence[str],
    base_env: Mapping[str, str],
    service_env: Mapping[str, str] | None = None,
    network_allowed: bool = True,
) -> dict[str, str]:
    """Build the child environment: fixed base + whitelisted pass-through.

    Nothing else from the service environment leaks in; undocumented local
    setup therefore fails inside the sandbox exactly as it would on a fresh
    machine.
    """
    if service_env is None:
        service_env = os.environ
    env = dict(base_env)
    for name in whitelist:
        if name in service_env:
            env[name] = service_env[name]
    if not network_allowed and network_isolation_mechanism() == "proxy-blackhole":
        for var in _PROXY_VARS:
            env[var] = _BLACKHOLE_PROXY
        env["no_proxy"] = ""
        env["NO_PROXY"] = ""
    return env


def _limit_setter(limits: ResourceLimits):
    cpu = limits.cpu_seconds
    mem = limits.memory_bytes
    nproc = limits.max_processes

    def apply():
        resource.setrlimit(resource.RLIMIT_CPU, (cpu, cpu + 1))
        resource.setrlimit(resource.RLIMIT_AS, (mem, mem))
        try:
            resource.setrlimit(resource.RLIMIT_NPROC, (nproc, nproc))
        except (ValueError, OSError):
            pass  # per-uid limit can be below current usage; best effort

    return apply


def run_step(
    argv: Sequence[str],
    cwd: Path,
    env: Mapping[str, str],
    limits: ResourceLimits,
    network_allowed: bool,
    wall_seconds: int | None = None,
) -> StepResult:
    """Execute one argv under the sandbox contract and capture its transcript.

    The transcript interleaves stdout and stderr, prefixed with a one-line
    sandbox banner. On wall-clock expiry the whole process group receives
    SIGKILL, so no orphan survives the call.
    """
    wall = wall_seconds if wall_seconds is not None else limits.wall_seconds
    command = list(argv)
    mechanism = "allowed"
    if not network_allowed:
        mechanism = network_isolation_mechanism()
        if mechanism == "netns":
            command = ["unshare", "--net", "--", *command]

    banner = f"[sandbox] argv={list(argv)!r} network={'allowed' if network_allowed else 'denied'}"
    if not network_allowed:
        banner += f" mechanism={mechanism}"
    banner_bytes = (banner + "\n").encode("utf-8")

    start = time.monotonic()
    try:
        proc = subprocess.Popen(
            command,
            cwd=str(cwd),
            env=dict(env),
            stdin=subprocess.DEVNULL,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            start_new_session=True,
            preexec_fn=_limit_setter(limits),
        )
    except OSError as exc:
        wall_ms = int((time.monotonic() - start) * 1000)
        transcript = banner_bytes + f"[sandbox] spawn failed: {exc}\n".encode("utf-8")
        return StepResult(SPAWN_ERROR, False, transcript, wall_ms)

    timed_out = False
    try:
        output, _ = proc.communicate(timeout=wall)
    except subprocess.TimeoutExpired:
        timed_out = True
        _kill_process_group(proc)
        output, _ = proc.communicate()

    elapsed_ms = int((time.monotonic() - start) * 1000)
    if timed_out:
        # the wait lasted at least the limit; clamp out rounding
        elapsed_ms = max(elapsed_ms, wall * 1000)
        output = (output or b"") + f"[sandbox] wall limit of {wall}s exceeded; process tree killed\n".encode("utf-8")
    elif proc.returncode == -signal.SIGXCPU:
        # cpu rlimit breach; only the wall clock decides TIMEOUT status
        output = (output or b"") + b"[sandbox] cpu limit exceeded; process killed\n"

    return StepResult(
        exit_status=proc.returncode,
        timed_out=timed_out,
        transcript=banner_bytes + (output or b""),
        wall_ms=elapsed_ms,
    )


def _kill_process_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass
