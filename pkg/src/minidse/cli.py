"""Command line front end.

Subcommands cover the whole workflow: assemble a program, run it over
an input file, flip the branches of a recorded run into a corpus of
new inputs, verify a single candidate, benchmark the mirroring fast
path, and dump the solver predicate for one branch.

Exit codes identify the failing stage: 10 assembly, 11 interpreter,
12 mirroring, 13 campaign, 14 verification, 15 configuration.  A
normal run of any subcommand exits 0.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import expr as E
from .asm import AsmError, ContainerError, assemble_file, load_program, \
    save_program
from .events import write_events
from .inverter import run_campaign
from .slicer import full_query, slice_query
from .symex import MirrorDivergence, MirrorTimeout, SymbolicExecutor
from .verifier import Outcome, verify
from .vm import MiniVm, VmError

EXIT_ASM = 10
EXIT_VM = 11
EXIT_SYMEX = 12
EXIT_CAMPAIGN = 13
EXIT_VERIFY = 14
EXIT_CONFIG = 15


class ConfigError(Exception):
    pass


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------
# configuration file

_CONFIG_TYPES = {
    "jobs": int,
    "branch-policy": str,
    "random-seed": int,
    "solver-timeout": float,
    "solver-seed": int,
    "max-table-size": int,
    "quantum": int,
    "budget": int,
    "output-dir": str,
    "events-out": str,
    "debug-dir": str,
    "max-campaign-time": float,
    "max-predicate-time": float,
    "reps": int,
    "no-slicing": bool,
    "no-skip": bool,
    "no-jumptables": bool,
    "no-simplify": bool,
    "no-context-switch": bool,
}

_DEFAULTS = {
    "jobs": 1,
    "branch_policy": "seq",
    "random_seed": 0,
    "solver_seed": 0,
    "max_table_size": 512,
    "reps": 5,
}


def _parse_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("cannot read config file: %s" % exc) from None
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError("%s:%d: expected key=value" % (path, lineno))
        mapping[key.strip()] = value.strip()
    return mapping


def _coerce(key, text):
    want = _CONFIG_TYPES[key]
    if want is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError("config key %s wants a boolean, got %r" % (key, text))
    try:
        if want is int:
            return int(text, 0)
        if want is float:
            return float(text)
    except ValueError:
        raise ConfigError("config key %s: bad value %r" % (key, text)) from None
    return text


def _apply_config(args):
    if getattr(args, "config", None) is None:
        return
    for key, text in _parse_config(args.config).items():
        if key not in _CONFIG_TYPES:
            raise ConfigError("unknown config key %r" % key)
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            continue  # key is valid but not used by this subcommand
        value = _coerce(key, text)
        current = getattr(args, dest)
        if _CONFIG_TYPES[key] is bool:
            setattr(args, dest, current or value)  # an explicit flag wins
        elif current is None:
            setattr(args, dest, value)


def _fill_defaults(args):
    for dest, value in _DEFAULTS.items():
        if hasattr(args, dest) and getattr(args, dest) is None:
            setattr(args, dest, value)


# ----------------------------------------------------------------------
# shared helpers

def _load(path):
    try:
        if path.endswith(".masm"):
            return assemble_file(path)
        return load_program(path)
    except OSError as exc:
        raise CliError(EXIT_ASM, "cannot read program: %s" % exc) from None


def _read_bytes(path, what):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CliError(EXIT_VM, "cannot read %s: %s" % (what, exc)) from None


def _run_baseline(program, seed, args):
    kwargs = {}
    if getattr(args, "quantum", None) is not None:
        kwargs["quantum"] = args.quantum
    if getattr(args, "budget", None) is not None:
        kwargs["budget"] = args.budget
    return MiniVm(program, seed, **kwargs).run()


def _mirror(program, seed, baseline, args):
    sx = SymbolicExecutor(
        program, seed,
        skip_concrete=not getattr(args, "no_skip", False),
        follow_switches=not getattr(args, "no_context_switch", False),
        jump_tables=not getattr(args, "no_jumptables", False),
        max_table_size=args.max_table_size)
    deadline = None
    if getattr(args, "max_predicate_time", None) is not None:
        deadline = time.monotonic() + args.max_predicate_time
    sx.run(baseline.events, deadline=deadline)
    return sx


def _debug_enabled(args):
    return bool(os.environ.get("MINIDSE_DEBUG", "")) \
        or getattr(args, "debug_dir", None) is not None


def _constraint_at(path, branch):
    if not 0 <= branch < len(path):
        raise CliError(EXIT_SYMEX,
                       "branch %d out of range; the path has %d symbolic "
                       "branch points" % (branch, len(path)))
    return path[branch]


def _flip_goal(constraint, target):
    if constraint.kind == "conditional":
        return E.bnot(constraint.cond), constraint.inverted_target
    choices = dict(constraint.alt_targets)
    if target is None:
        goal = None
        for cond in choices.values():
            goal = cond if goal is None else E.bor(goal, cond)
        return goal, None
    if target not in choices:
        raise CliError(EXIT_SYMEX,
                       "0x%x is not an untaken target of this branch; "
                       "choices: %s" % (target,
                                        ", ".join("0x%x" % t
                                                  for t in sorted(choices))))
    return choices[target], target


# ----------------------------------------------------------------------
# subcommands

def _cmd_asm(args):
    program = _load(args.program)
    out = args.output
    if out is None:
        out = str(Path(args.program).with_suffix(".mprog"))
    save_program(program, out)
    data_bytes = sum(len(blob) for _, blob in program.segments)
    print("wrote %s (%d instructions, %d data bytes)"
          % (out, len(program.instructions), data_bytes))
    return 0


def _cmd_run(args):
    program = _load(args.program)
    seed = _read_bytes(args.seed, "input file")
    result = _run_baseline(program, seed, args)
    if args.events_out:
        write_events(args.events_out, result.events)
    if result.stdout:
        sys.stdout.buffer.write(result.stdout)
        sys.stdout.buffer.flush()
    if result.stderr:
        sys.stderr.buffer.write(result.stderr)
        sys.stderr.buffer.flush()
    print("status: %s" % result.status)
    if result.exit_code is not None:
        print("exit-code: %d" % result.exit_code)
    print("executed: %d" % result.stats.executed)
    print("threads: %d" % result.stats.threads)
    print("switches: %d" % result.stats.switches)
    print("branches: %d" % len(result.branch_trace))
    return 0 if result.status == "exit" else EXIT_VM


def _print_report(report, out=None):
    out = out if out is not None else sys.stdout
    counts = report.counts()
    for result in report.results:
        task = result.task
        verdict = "-"
        if result.verdict is not None:
            verdict = result.verdict.outcome.value
        line = "[%04d] site 0x%x %-11s -> %-8s %-8s %-12s kept %d/%d  %.3fs" % (
            task.branch_index, task.site, task.kind,
            ("0x%x" % task.target) if task.target is not None else "?",
            result.status, verdict, result.kept, len(task.prefix),
            result.solver_time)
        print(line, file=out)
    print("branches: %d" % report.branches, file=out)
    print("queries: %d" % report.queries, file=out)
    print("sat: %d" % report.sat, file=out)
    print("unsat: %d" % counts["unsat"], file=out)
    print("unknown: %d" % counts["unknown"], file=out)
    print("errors: %d" % counts["error"], file=out)
    print("correct: %d" % report.correct, file=out)
    print("wall-time: %.3fs" % report.wall_time, file=out)
    if report.aborted:
        print("aborted: campaign deadline expired", file=out)


def _campaign(program, seed, args):
    kwargs = dict(
        jobs=args.jobs, policy=args.branch_policy,
        policy_seed=args.random_seed, solver_timeout=args.solver_timeout,
        solver_seed=args.solver_seed, slicing=not args.no_slicing,
        skip_concrete=not args.no_skip,
        follow_switches=not args.no_context_switch,
        jump_tables=not args.no_jumptables,
        max_table_size=args.max_table_size, quantum=args.quantum,
        budget=args.budget, output_dir=args.output_dir,
        max_campaign_time=args.max_campaign_time,
        max_predicate_time=args.max_predicate_time)
    if args.no_simplify:
        with E.simplification(False):
            return run_campaign(program, seed, **kwargs)
    return run_campaign(program, seed, **kwargs)


def _write_debug(args, report):
    if not _debug_enabled(args):
        return
    if args.debug_dir is None:
        print("debug: %d events, %d mirrored, %d skipped, %d tables, "
              "%d concretizations"
              % (report.symex_stats.events, report.symex_stats.mirrored,
                 report.symex_stats.skipped, report.symex_stats.tables,
                 report.symex_stats.concretizations), file=sys.stderr)
        return
    debug = Path(args.debug_dir)
    debug.mkdir(parents=True, exist_ok=True)
    write_events(str(debug / "baseline.mev"), report.baseline.events)
    conds = [pc.cond for pc in report.path]
    (debug / "path.smt2").write_text(
        E.to_smtlib(conds) if conds else "; empty path\n", encoding="utf-8")
    with open(debug / "report.txt", "w", encoding="utf-8") as fh:
        _print_report(report, out=fh)


def _cmd_invert(args):
    program = _load(args.program)
    seed = _read_bytes(args.seed, "input file")
    report = _campaign(program, seed, args)
    _print_report(report)
    _write_debug(args, report)
    return EXIT_CAMPAIGN if report.aborted else 0


def _cmd_bench(args):
    program = _load(args.program)
    seed = _read_bytes(args.seed, "input file")
    report = _campaign(program, seed, args)
    _print_report(report)

    events = report.baseline.events
    timings = {}
    for label, skip in (("base", False), ("skip", True)):
        best = None
        for _ in range(args.reps):
            sx = SymbolicExecutor(
                program, seed, skip_concrete=skip,
                follow_switches=not args.no_context_switch,
                jump_tables=not args.no_jumptables,
                max_table_size=args.max_table_size)
            begin = time.perf_counter()
            sx.run(events)
            took = time.perf_counter() - begin
            best = took if best is None else min(best, took)
        timings[label] = best
    ratio = timings["base"] / timings["skip"] if timings["skip"] > 0 else 0.0
    print("mirror-base: %.4fs" % timings["base"])
    print("mirror-skip: %.4fs" % timings["skip"])
    print("base/skip: %.2f" % ratio)
    _write_debug(args, report)
    return EXIT_CAMPAIGN if report.aborted else 0


def _cmd_verify(args):
    program = _load(args.program)
    seed = _read_bytes(args.seed, "input file")
    candidate = _read_bytes(args.candidate, "candidate file")
    baseline = _run_baseline(program, seed, args)
    sx = _mirror(program, seed, baseline, args)
    constraint = _constraint_at(sx.path, args.branch)
    if constraint.kind == "indirect" and args.target is None:
        raise CliError(EXIT_VERIFY,
                       "indirect branches need --target to verify against")
    verdict = verify(program, baseline, constraint, candidate,
                     expected_target=args.target, quantum=args.quantum,
                     budget=args.budget)
    print("verdict: %s" % verdict.outcome.value)
    print("position: %d" % verdict.position)
    print("run-status: %s" % verdict.run_status)
    return 0 if verdict.outcome is Outcome.CORRECT else EXIT_VERIFY


def _cmd_dump_predicate(args):
    program = _load(args.program)
    seed = _read_bytes(args.seed, "input file")
    baseline = _run_baseline(program, seed, args)
    sx = _mirror(program, seed, baseline, args)
    constraint = _constraint_at(sx.path, args.branch)
    goal, _ = _flip_goal(constraint, args.target)
    prefix = [pc.cond for pc in sx.path[:args.branch]]
    if args.no_slicing:
        query = full_query(prefix, goal)
    else:
        query = slice_query(prefix, goal)
    sys.stdout.write(E.to_smtlib(query.conditions()))
    print("; kept %d of %d prefix conditions" % (len(query.kept), len(prefix)))
    return 0


# ----------------------------------------------------------------------
# argument plumbing

def _int_arg(text):
    return int(text, 0)


def _build_parser():
    top = argparse.ArgumentParser(
        prog="minidse",
        description="Record, mirror, and flip branches of mini-VM programs.")
    sub = top.add_subparsers(dest="command", required=True)

    vm_flags = argparse.ArgumentParser(add_help=False)
    vm_flags.add_argument("--quantum", type=_int_arg, default=None,
                          help="instructions per scheduling slice")
    vm_flags.add_argument("--budget", type=_int_arg, default=None,
                          help="total instruction budget")
    vm_flags.add_argument("--config", default=None,
                          help="key=value defaults file; explicit flags win")

    mirror_flags = argparse.ArgumentParser(add_help=False)
    mirror_flags.add_argument("--no-skip", action="store_true",
                              help="mirror every instruction, no fast path")
    mirror_flags.add_argument("--no-jumptables", action="store_true",
                              help="do not recover indirect jump tables")
    mirror_flags.add_argument("--no-simplify", action="store_true",
                              help="disable expression rewriting")
    mirror_flags.add_argument("--no-context-switch", action="store_true",
                              help="mirror all threads into one context")
    mirror_flags.add_argument("--max-table-size", type=_int_arg, default=None,
                              help="largest jump table to recover")
    mirror_flags.add_argument("--max-predicate-time", type=float, default=None,
                              help="wall seconds allowed for mirroring")

    campaign_flags = argparse.ArgumentParser(add_help=False)
    campaign_flags.add_argument("--jobs", type=_int_arg, default=None,
                                help="solver worker processes")
    campaign_flags.add_argument("--branch-policy", choices=("seq", "random"),
                                default=None, help="task processing order")
    campaign_flags.add_argument("--random-seed", type=_int_arg, default=None,
                                help="seed for --branch-policy random")
    campaign_flags.add_argument("--solver-timeout", type=float, default=None,
                                help="wall seconds per solver query")
    campaign_flags.add_argument("--solver-seed", type=_int_arg, default=None,
                                help="base seed for solver decision jitter")
    campaign_flags.add_argument("--output-dir", default=None,
                                help="directory for verified flip inputs")
    campaign_flags.add_argument("--no-slicing", action="store_true",
                                help="send whole path prefixes to the solver")
    campaign_flags.add_argument("--max-campaign-time", type=float,
                                default=None,
                                help="wall seconds for the whole campaign")
    campaign_flags.add_argument("--debug-dir", default=None,
                                help="write events, predicates, and the "
                                     "report here")

    p_asm = sub.add_parser("asm", help="assemble a .masm source file")
    p_asm.add_argument("program")
    p_asm.add_argument("-o", "--output", default=None)
    p_asm.set_defaults(func=_cmd_asm)

    p_run = sub.add_parser("run", parents=[vm_flags],
                           help="run a program over an input file")
    p_run.add_argument("program")
    p_run.add_argument("seed")
    p_run.add_argument("--events-out", default=None,
                       help="record the event stream to this file")
    p_run.set_defaults(func=_cmd_run)

    p_invert = sub.add_parser(
        "invert", parents=[vm_flags, mirror_flags, campaign_flags],
        help="flip every symbolic branch of a recorded run")
    p_invert.add_argument("program")
    p_invert.add_argument("seed")
    p_invert.set_defaults(func=_cmd_invert)

    p_bench = sub.add_parser(
        "bench", parents=[vm_flags, mirror_flags, campaign_flags],
        help="campaign metrics plus mirroring fast-path timings")
    p_bench.add_argument("program")
    p_bench.add_argument("seed")
    p_bench.add_argument("-n", "--reps", type=_int_arg, default=None,
                         help="mirror timing repetitions (best of n)")
    p_bench.set_defaults(func=_cmd_bench)

    p_verify = sub.add_parser(
        "verify", parents=[vm_flags, mirror_flags],
        help="judge one candidate input against one branch")
    p_verify.add_argument("program")
    p_verify.add_argument("seed")
    p_verify.add_argument("candidate")
    p_verify.add_argument("--branch", type=_int_arg, required=True,
                          help="index into the recorded symbolic path")
    p_verify.add_argument("--target", type=_int_arg, default=None,
                          help="expected landing pc for indirect branches")
    p_verify.set_defaults(func=_cmd_verify)

    p_dump = sub.add_parser(
        "dump-predicate", parents=[vm_flags, mirror_flags],
        help="print the flip predicate for one branch as SMT-LIB2")
    p_dump.add_argument("program")
    p_dump.add_argument("seed")
    p_dump.add_argument("--branch", type=_int_arg, required=True)
    p_dump.add_argument("--target", type=_int_arg, default=None)
    p_dump.add_argument("--no-slicing", action="store_true")
    p_dump.set_defaults(func=_cmd_dump_predicate)

    return top


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args)
        _fill_defaults(args)
        return args.func(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except (AsmError, ContainerError) as exc:
        print("assembly error: %s" % exc, file=sys.stderr)
        return EXIT_ASM
    except VmError as exc:
        print("vm error: %s" % exc, file=sys.stderr)
        return EXIT_VM
    except MirrorTimeout as exc:
        print("mirror error: %s" % exc, file=sys.stderr)
        return EXIT_SYMEX
    except MirrorDivergence as exc:
        print("mirror divergence: %s" % exc, file=sys.stderr)
        return EXIT_SYMEX
    except CliError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
