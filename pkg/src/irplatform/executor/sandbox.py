"""Container backends and command-template resolution.

Both backends present the same container-side layout::

    /mnt/input      $inputDataset, read-only
    /mnt/inputRun   $inputRun, read-only (ordinal subdirectories 1/, 2/, ... with several predecessors)
    /mnt/output     $outputDir, the only writable mount
    /mnt/image      image contents (mock backend only), working directory

The ``oci`` backend drives a docker/podman compatible CLI with ``--network
none`` and read-only bind mounts.  The ``mock`` backend treats a local
directory as the image and runs the command as a host process inside fresh
user, network and mount namespaces (``unshare``), so network access and
writes outside ``/mnt/output`` fail just as they would in a container.
"""

from __future__ import annotations

import abc
import functools
import logging
import os
import re
import shlex
import shutil
import signal
import string
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path, PurePosixPath
from typing import Mapping, Sequence

from ..errors import ImageNotFound, InvariantViolation, SandboxUnavailable
from ..registry import TEMPLATE_VARIABLES, template_variables
from ..store import tree_digest

log = logging.getLogger(__name__)

INPUT_DIR = "/mnt/input"
OUTPUT_DIR = "/mnt/output"
INPUT_RUN_DIR = "/mnt/inputRun"
IMAGE_DIR = "/mnt/image"
SANDBOX_ROOT = "/mnt"
SANDBOX_PATH = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin"

BUNDLED_IMAGES = Path(__file__).resolve().parent.parent / "images"

# stderr fragments that reveal a blocked sandbox escape attempt
VIOLATION_MARKERS = {
    "network": ("Network is unreachable", "Temporary failure in name resolution", "Name or service not known"),
    "read_only": ("Read-only file system",),
}


@dataclass(frozen=True)
class ResourceLimits:
    cpus: float = 1.0
    memory_bytes: int = 10 * 1024**3
    timeout: float = 3600.0

    def __post_init__(self) -> None:
        if self.cpus <= 0 or self.memory_bytes <= 0 or self.timeout <= 0:
            raise InvariantViolation("resource limits must be positive", invariant="limits positive")

    def to_dict(self) -> dict:
        return {"cpus": self.cpus, "memory_bytes": self.memory_bytes, "timeout": self.timeout}


@dataclass(frozen=True)
class Mount:
    source: Path
    target: str
    read_only: bool = True


@dataclass(frozen=True)
class SandboxSpec:
    image_ref: str
    command: str
    env: Mapping[str, str]
    mounts: tuple[Mount, ...]
    limits: ResourceLimits = ResourceLimits()
    network: bool = False
    # Host paths that must be invisible inside the sandbox (the platform store).
    hidden: tuple[Path, ...] = ()

    def __post_init__(self) -> None:
        writable = [m for m in self.mounts if not m.read_only]
        if len(writable) != 1 or writable[0].target != OUTPUT_DIR:
            raise InvariantViolation("the output directory must be the only writable mount", invariant="single writable mount")
        if self.network:
            raise InvariantViolation("sandboxed components never get network access", invariant="network disabled")


@dataclass
class RunResult:
    exit_code: int
    timed_out: bool = False
    duration: float = 0.0
    usage: dict = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    stdout_path: Path | None = None
    stderr_path: Path | None = None

    @property
    def ok(self) -> bool:
        return self.exit_code == 0 and not self.timed_out


def input_run_root(run_dirs: Sequence[str]) -> str:
    """Value of $inputRun: the single predecessor output, or the parent of the ordinal subdirectories."""
    if len(run_dirs) == 1:
        return str(run_dirs[0])
    paths = [PurePosixPath(str(d)) for d in run_dirs]
    parent = paths[0].parent
    expected = [parent / str(i) for i in range(1, len(paths) + 1)]
    if paths != expected:
        raise InvariantViolation("predecessor outputs must be ordinal subdirectories 1/, 2/, ... of one parent")
    return str(parent)


def resolve_command(
    template: str, input_dir: str | os.PathLike, output_dir: str | os.PathLike, run_dirs: Sequence[str | os.PathLike] = ()
) -> tuple[str, dict[str, str]]:
    """Substitute $inputDataset, $outputDir and $inputRun; return the command and the exported environment."""
    names = template_variables(template)
    unknown = sorted(set(names) - set(TEMPLATE_VARIABLES))
    if unknown:
        raise InvariantViolation(f"unknown variable(s) {', '.join('$' + u for u in unknown)}", invariant="known variables")
    run_dirs = [str(d) for d in run_dirs]
    if "inputRun" in names and not run_dirs:
        raise InvariantViolation("$inputRun requires at least one predecessor", invariant="$inputRun needs predecessors")
    env = {"inputDataset": str(input_dir), "outputDir": str(output_dir)}
    if run_dirs:
        env["inputRun"] = input_run_root(run_dirs)
    command = string.Template(template).substitute({k: shlex.quote(v) for k, v in env.items()})
    return command, env


def image_dirname(image_ref: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", image_ref)


def _scan_violations(stderr_path: Path) -> list[str]:
    try:
        text = stderr_path.read_text(errors="replace")
    except OSError:
        return []
    return [kind for kind, markers in VIOLATION_MARKERS.items() if any(m in text for m in markers)]


class ContainerBackend(abc.ABC):
    name = "abstract"

    @abc.abstractmethod
    def image_digest(self, image_ref: str) -> str:
        """Content digest of the image; raises ImageNotFound."""

    @abc.abstractmethod
    def run(self, spec: SandboxSpec, logs_dir: Path) -> RunResult:
        """Run spec to completion, writing logs_dir/stdout and logs_dir/stderr."""


def _wait(proc: subprocess.Popen, timeout: float, on_timeout) -> tuple[int, bool, dict]:
    timed_out = threading.Event()

    def fire() -> None:
        timed_out.set()
        on_timeout(proc)

    timer = threading.Timer(timeout, fire)
    timer.daemon = True
    timer.start()
    try:
        _, status, rusage = os.wait4(proc.pid, 0)
    finally:
        timer.cancel()
    code = os.waitstatus_to_exitcode(status)
    proc.returncode = code
    usage = {"max_rss_kb": rusage.ru_maxrss, "user_s": round(rusage.ru_utime, 3), "sys_s": round(rusage.ru_stime, 3)}
    return code, timed_out.is_set(), usage


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass


@functools.lru_cache(maxsize=1)
def namespaces_available() -> bool:
    if shutil.which("unshare") is None:
        return False
    try:
        res = subprocess.run(
            ["unshare", "--user", "--map-root-user", "--net", "--mount", "--propagation", "private", "true"],
            capture_output=True,
            timeout=10,
        )
    except (OSError, subprocess.TimeoutExpired):
        return False
    return res.returncode == 0


@functools.lru_cache(maxsize=1)
def privileged_namespaces() -> bool:
    """True when mount/net namespaces can be created with host root privileges.

    Mounts are then prepared as host root (which can traverse directories an
    unprivileged user namespace cannot) before the command drops into a fresh
    user namespace.
    """
    if os.geteuid() != 0 or shutil.which("unshare") is None:
        return False
    try:
        res = subprocess.run(["unshare", "--net", "--mount", "--propagation", "private", "true"], capture_output=True, timeout=10)
    except (OSError, subprocess.TimeoutExpired):
        return False
    return res.returncode == 0


class MockBackend(ContainerBackend):
    """Local-directory images executed under unshare namespaces.

    ``isolate=None`` isolates when namespaces are available and otherwise
    runs unconfined with a warning; ``isolate=True`` refuses to run without them.
    """

    name = "mock"

    def __init__(self, image_roots: Sequence[str | os.PathLike] = (), isolate: bool | None = None) -> None:
        self.image_roots = [Path(r) for r in image_roots] + [BUNDLED_IMAGES]
        self.isolate = isolate

    def resolve_image(self, image_ref: str) -> Path:
        name = image_dirname(image_ref)
        for root in self.image_roots:
            candidate = root / name
            if candidate.is_dir():
                return candidate
        raise ImageNotFound(
            f"image {image_ref!r} not found (looked for {name!r} under {', '.join(str(r) for r in self.image_roots)})",
            image=image_ref,
        )

    def image_digest(self, image_ref: str) -> str:
        return "sha256:" + tree_digest(self.resolve_image(image_ref), exclude=("__pycache__",))

    def _isolated(self) -> bool:
        if self.isolate is False:
            return False
        if namespaces_available():
            return True
        if self.isolate:
            raise SandboxUnavailable("user/network/mount namespaces are not available on this host")
        log.warning("namespaces unavailable: running component WITHOUT sandbox isolation")
        return False

    def _setup_script(self, spec: SandboxSpec, image_dir: Path, drop_user: bool = False) -> str:
        q = shlex.quote
        lines = ["set -e", f"mount -t tmpfs -o mode=755 irp-sandbox {SANDBOX_ROOT}"]
        for m in [Mount(image_dir, IMAGE_DIR, True), *spec.mounts]:
            if str(m.source.resolve()).startswith(SANDBOX_ROOT + "/"):
                raise SandboxUnavailable(f"mock backend cannot mount {m.source}: host paths under {SANDBOX_ROOT} are shadowed")
            lines.append(f"mkdir -p {q(m.target)}")
            lines.append(f"mount --bind {q(str(m.source))} {q(m.target)}")
            if m.read_only:
                lines.append(f"mount -o remount,bind,ro {q(m.target)}")
        for hidden in spec.hidden:
            lines.append(f"if [ -d {q(str(hidden))} ]; then mount -t tmpfs -o mode=555,size=64k irp-hidden {q(str(hidden))}; fi")
        lines.append("mount -t tmpfs -o mode=1777 irp-tmp /tmp")
        lines.append("mount -o remount,bind,ro /")
        lines.append(f"cd {IMAGE_DIR}")
        env = " ".join(f"{k}={q(v)}" for k, v in sorted(spec.env.items()))
        drop = "unshare --user --map-root-user " if drop_user else ""
        lines.append(f'exec {drop}env -i PATH={SANDBOX_PATH} HOME=/tmp LANG=C.UTF-8 {env} sh -c "$IRP_COMMAND"')
        return "\n".join(lines) + "\n"

    def run(self, spec: SandboxSpec, logs_dir: Path) -> RunResult:
        image_dir = self.resolve_image(spec.image_ref)
        logs_dir.mkdir(parents=True, exist_ok=True)
        stdout_path, stderr_path = logs_dir / "stdout", logs_dir / "stderr"
        limit = ["prlimit", f"--as={spec.limits.memory_bytes}"] if shutil.which("prlimit") else []
        if self._isolated():
            if privileged_namespaces():
                argv = limit + [
                    "unshare", "--net", "--mount", "--propagation", "private",
                    "sh", "-c", self._setup_script(spec, image_dir, drop_user=True),
                ]
            else:
                argv = limit + [
                    "unshare", "--user", "--map-root-user", "--net", "--mount", "--propagation", "private",
                    "sh", "-c", self._setup_script(spec, image_dir),
                ]
            env = {"PATH": SANDBOX_PATH, "IRP_COMMAND": spec.command}
            cwd = None
        else:
            # Unconfined fallback: container paths map straight to host paths.
            command = spec.command
            for m in sorted(spec.mounts, key=lambda m: -len(m.target)):
                command = command.replace(m.target, shlex.quote(str(m.source)))
            host_env = {k: v for k, v in spec.env.items()}
            for m in spec.mounts:
                for k, v in host_env.items():
                    if v == m.target:
                        host_env[k] = str(m.source)
            argv = limit + ["sh", "-c", command]
            env = {"PATH": os.environ.get("PATH", SANDBOX_PATH), "HOME": str(image_dir), **host_env}
            cwd = image_dir
        started = time.monotonic()
        with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
            proc = subprocess.Popen(argv, stdout=out, stderr=err, stdin=subprocess.DEVNULL, env=env, cwd=cwd, start_new_session=True)
            code, timed_out, usage = _wait(proc, spec.limits.timeout, _kill_group)
        return RunResult(
            exit_code=code,
            timed_out=timed_out,
            duration=time.monotonic() - started,
            usage=usage,
            violations=_scan_violations(stderr_path),
            stdout_path=stdout_path,
            stderr_path=stderr_path,
        )


class OciBackend(ContainerBackend):
    """docker/podman compatible CLI backend (``run --network none`` with read-only binds)."""

    name = "oci"

    def __init__(self, cli: str | None = None, pull: bool = True) -> None:
        self.cli = cli or os.environ.get("IRPLATFORM_OCI_CLI") or shutil.which("docker") or shutil.which("podman") or "docker"
        self.pull = pull
        self._digests: dict[str, str] = {}

    def _inspect(self, image_ref: str) -> str | None:
        try:
            res = subprocess.run(
                [self.cli, "image", "inspect", "--format", "{{.Id}}", image_ref], capture_output=True, text=True, timeout=60
            )
        except OSError as exc:
            raise ImageNotFound(f"container CLI {self.cli!r} unavailable: {exc}", image=image_ref) from exc
        return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else None

    def image_digest(self, image_ref: str) -> str:
        if image_ref in self._digests:
            return self._digests[image_ref]
        digest = self._inspect(image_ref)
        if digest is None and self.pull:
            subprocess.run([self.cli, "pull", image_ref], capture_output=True, timeout=3600)
            digest = self._inspect(image_ref)
        if digest is None:
            raise ImageNotFound(f"image {image_ref!r} cannot be resolved by {self.cli}; pull or load it first", image=image_ref)
        self._digests[image_ref] = digest
        return digest

    def argv(self, spec: SandboxSpec, name: str) -> list[str]:
        argv = [
            self.cli, "run", "--rm", "--name", name,
            "--network", "none",
            "--read-only", "--tmpfs", "/tmp",
            "--cap-drop", "ALL", "--security-opt", "no-new-privileges",
            "--cpus", f"{spec.limits.cpus:g}",
            "--memory", f"{spec.limits.memory_bytes}b",
        ]
        for m in spec.mounts:
            argv += ["--volume", f"{m.source}:{m.target}:{'ro' if m.read_only else 'rw'}"]
        for k, v in sorted(spec.env.items()):
            argv += ["--env", f"{k}={v}"]
        argv += ["--entrypoint", "sh", spec.image_ref, "-c", spec.command]
        return argv

    def run(self, spec: SandboxSpec, logs_dir: Path) -> RunResult:
        logs_dir.mkdir(parents=True, exist_ok=True)
        stdout_path, stderr_path = logs_dir / "stdout", logs_dir / "stderr"
        name = f"irp-{os.getpid()}-{threading.get_ident()}-{time.monotonic_ns()}"
        started = time.monotonic()

        def kill(proc: subprocess.Popen) -> None:
            subprocess.run([self.cli, "kill", name], capture_output=True)
            _kill_group(proc)

        with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
            proc = subprocess.Popen(self.argv(spec, name), stdout=out, stderr=err, stdin=subprocess.DEVNULL, start_new_session=True)
            code, timed_out, usage = _wait(proc, spec.limits.timeout, kill)
        return RunResult(
            exit_code=code,
            timed_out=timed_out,
            duration=time.monotonic() - started,
            usage=usage,
            violations=_scan_violations(stderr_path),
            stdout_path=stdout_path,
            stderr_path=stderr_path,
        )


def make_backend(name: str, store_root: str | os.PathLike | None = None, **kwargs) -> ContainerBackend:
    if name == "mock":
        roots = [Path(store_root) / "images"] if store_root is not None else []
        return MockBackend(roots, **kwargs)
    if name == "oci":
        return OciBackend(**kwargs)
    raise InvariantViolation(f"unknown container backend {name!r} (expected 'oci' or 'mock')")
