"""Two features that trip up naive mirroring: threads and jump tables.

First half: the minsearch sample fans work out to four spawned workers,
each preempted mid-loop by the round-robin scheduler.  Mirroring with
per-thread register contexts flips the final comparison cleanly.
Mirroring every thread through one shared register file corrupts a
preempted worker's partial result, and the mirror's own consistency
check calls it out instead of producing a bogus predicate.

Second half: the switch8 sample jumps through an 8-slot address table
where two slots share a handler.  One recorded indirect jump fans out
into six alternative-target queries, each verified by replay.
"""

from pathlib import Path

from minidse.asm import assemble_file
from minidse.inverter import run_campaign
from minidse.symex import MirrorDivergence
from minidse.vm import MiniVm

SAMPLES = Path(__file__).resolve().parent.parent / "samples"


def load(name):
    program = assemble_file(str(SAMPLES / ("%s.masm" % name)))
    seed = (SAMPLES / ("%s.seed" % name)).read_bytes()
    return program, seed


def main():
    program, seed = load("minsearch")
    base = MiniVm(program, seed).run()
    print("minsearch baseline: stdout=%r, %d threads, %d context switches"
          % (base.stdout, base.stats.threads, base.stats.switches))

    report = run_campaign(program, seed, follow_switches=True)
    final = report.results[-1]
    flipped = MiniVm(program, final.candidate).run()
    print("with per-thread contexts: %d/%d flips verified, final replay "
          "prints %r" % (report.correct, report.queries, flipped.stdout))

    try:
        run_campaign(program, seed, follow_switches=False)
        print("with one shared context: campaign ran (unexpected)")
    except MirrorDivergence as exc:
        print("with one shared context: %s" % exc)

    print()
    program, seed = load("switch8")
    report = run_campaign(program, seed)
    print("switch8: %d recorded branches, %d queries" %
          (report.branches, report.queries))
    for r in report.results:
        if r.task.kind != "indirect":
            continue
        run = MiniVm(program, r.candidate).run()
        print("  selector byte %d steers to 0x%x, exit %d (%s)"
              % (r.candidate[0], r.task.target, run.exit_code,
                 r.verdict.outcome.value))


if __name__ == "__main__":
    main()
