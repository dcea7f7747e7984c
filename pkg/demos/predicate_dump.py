"""From assembly text to a solver-ready predicate in one sitting.

Assembles a ten-line checker from a string, records a run, mirrors it,
and prints the path predicate both ways: the raw condition list and the
SMT-LIB 2 rendering the solver-facing tooling emits.  Then slices the
query for the last branch and solves it by hand, without the campaign
driver, to show the pieces the driver is made of.
"""

from minidse import expr as E
from minidse.asm import assemble
from minidse.slicer import slice_query
from minidse.solver import solve
from minidse.symex import SymbolicExecutor
from minidse.verifier import verify
from minidse.vm import MiniVm

SOURCE = """
        mov r0, 0
        open r0                 ; fd for the input file
        mov r6, buf
        read r0, r6, 3
        xor r1, r1
        load.b r1, [r6]         ; byte 0: must be 'M'
        cmp r1, 'M'
        jnz bad
        xor r2, r2
        load.w r2, [r6 + 1]     ; bytes 1-2: little-endian count < 300
        cmp r2, 300
        jae bad
        exit 0
bad:    exit 1

        .data 0x2000
buf:    .zero 3
"""


def main():
    program = assemble(SOURCE)
    # magic byte right, count too large: the run walks both branches
    # and exits through the reject path
    seed = b"M" + (300).to_bytes(2, "little")
    baseline = MiniVm(program, seed).run()
    print("baseline exit: %d" % baseline.exit_code)

    sx = SymbolicExecutor(program, seed)
    sx.run(baseline.events)
    print("\nrecorded conditions:")
    for pc in sx.path:
        print("  0x%x  %s" % (pc.site, E.serialize(pc.cond)))

    # flip the second branch: keep the first condition, negate the second
    prefix = [pc.cond for pc in sx.path[:1]]
    goal = E.bnot(sx.path[1].cond)
    query = slice_query(prefix, goal)
    print("\nSMT-LIB for the flip (kept %d of %d prefix conditions):"
          % (len(query.constraints), len(prefix)))
    print(E.to_smtlib(query.conditions()))

    result = solve(list(query.conditions()))
    candidate = bytearray(seed)
    for index, value in result.model.items():
        candidate[index] = value
    print("model: %s -> input %s" % (dict(result.model), bytes(candidate)))

    verdict = verify(program, baseline, sx.path[1], bytes(candidate))
    replay = MiniVm(program, bytes(candidate)).run()
    print("verdict: %s, replay exit %d" % (verdict.outcome.value,
                                           replay.exit_code))


if __name__ == "__main__":
    main()
