#!/usr/bin/env python
"""
Reproduce the lab's headline results into one output directory.
Runs the mode matrix, the exact estimates, the Monte-Carlo checks and the fleet scan.
"""
import argparse
import subprocess
import sys
from pathlib import Path


class Colors:
    """ANSI color codes."""
    GREEN = '\033[92m'
    RED = '\033[91m'
    YELLOW = '\033[93m'
    BLUE = '\033[94m'
    RESET = '\033[0m'
    BOLD = '\033[1m'


def print_step(message: str):
    print(f"\n{Colors.BOLD}{Colors.BLUE}>>> {message}{Colors.RESET}\n")


def print_success(message: str):
    print(f"{Colors.GREEN}SUCCESS:{Colors.RESET} {message}")


def print_error(message: str):
    print(f"{Colors.RED}ERROR:{Colors.RESET} {message}")


def print_warning(message: str):
    print(f"{Colors.YELLOW}WARNING:{Colors.RESET} {message}")


def run_command(cmd: list, description: str, cwd: Path, stdout_path: Path = None) -> bool:
    """Run a command and return True if successful."""
    print(f"Running: {' '.join(str(c) for c in cmd)}")

    if stdout_path is None:
        result = subprocess.run(cmd, cwd=str(cwd))
    else:
        with stdout_path.open("w", encoding="utf-8") as handle:
            result = subprocess.run(cmd, cwd=str(cwd), stdout=handle)

    if result.returncode != 0:
        print_error(f"{description} failed with exit code {result.returncode}")
        return False

    print_success(f"{description} completed")
    return True


def sshlab(*args) -> list:
    return [sys.executable, "-m", "sshlab", *[str(a) for a in args]]


def main():
    parser = argparse.ArgumentParser(
        description="Run the sshlab experiments and collect their reports"
    )
    parser.add_argument(
        "--out",
        type=Path,
        default=Path("results"),
        help="Directory for reports (default: results/)"
    )
    parser.add_argument(
        "--trials",
        type=int,
        default=20000,
        help="Monte-Carlo trials for the probabilistic downgrade"
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=4,
        help="Worker processes for the Monte-Carlo runs"
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=0,
        help="Base seed shared by every step"
    )
    parser.add_argument(
        "--with-tests",
        action="store_true",
        help="Run the full test suite, slow tests included, before the experiments"
    )
    args = parser.parse_args()

    project_root = Path(__file__).resolve().parent.parent
    out = (project_root / args.out).resolve() if not args.out.is_absolute() else args.out
    out.mkdir(parents=True, exist_ok=True)
    failures = []

    if args.with_tests:
        print_step("Step 0: Running the test suite")
        if not run_command([sys.executable, "-m", "pytest", "-q"], "Test suite", project_root):
            print_error("Tests failed!")
            return 1

    print_step("Step 1: Prefix truncation against every mode")
    if not run_command(
        sshlab("matrix", "--trials", 100, "--seed", args.seed, "--out", out / "mode_matrix.json"),
        "Mode matrix",
        project_root,
    ):
        failures.append("matrix")

    print_step("Step 2: Exact estimates")
    for ell in (16, 264):
        if not run_command(
            sshlab("estimate", "--ell", ell, "--brute-force"),
            f"Estimate at {ell} bytes",
            project_root,
            stdout_path=out / f"estimate_{ell}.json",
        ):
            failures.append(f"estimate-{ell}")

    print_step("Step 3: Monte-Carlo checks")
    runs = [
        ("ext-downgrade-chacha", [], 1000, "chacha_downgrade"),
        ("ext-downgrade-cbc-etm", [], args.trials, "cbc_etm_downgrade_unknown"),
        ("ext-downgrade-cbc-etm", ["--use-ping"], args.trials, "cbc_etm_downgrade_ping"),
        ("prefix-truncate", ["--mode", "GCM", "--profile", "lenient"], 1000, "gcm_truncation"),
    ]
    for scenario, extra, trials, name in runs:
        if not run_command(
            sshlab(
                "montecarlo", "--scenario", scenario, *extra,
                "--trials", trials, "--seed", args.seed, "--workers", args.workers,
                "--out", out / f"{name}.json",
            ),
            f"Monte-Carlo {name}",
            project_root,
        ):
            failures.append(name)

    print_step("Step 4: Scanning the simulated fleet")
    if not run_command(
        sshlab("scan", "--fleet", "fleet_1000", "--seed", args.seed, "--out", out / "scan"),
        "Fleet scan",
        project_root,
    ):
        failures.append("scan")

    if failures:
        print_warning(f"{len(failures)} step(s) failed: {', '.join(failures)}")
        return 1

    print(f"\n{Colors.BOLD}{Colors.GREEN}{'=' * 60}{Colors.RESET}")
    print(f"{Colors.BOLD}{Colors.GREEN}All experiments completed successfully!{Colors.RESET}")
    print(f"{Colors.BOLD}{Colors.GREEN}{'=' * 60}{Colors.RESET}\n")
    print(f"{Colors.BOLD}Reports:{Colors.RESET} {out}")
    print()

    return 0


if __name__ == "__main__":
    sys.exit(main())
