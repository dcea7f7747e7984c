"""minidse: concolic execution for a small deterministic register machine.

The package runs a program concretely on its virtual machine while mirroring
the execution symbolically over an event stream, collects a path predicate,
and inverts branches one at a time with a built-in bitvector solver to
generate new inputs, each of which can be re-run and checked against the
original branch trace.
"""

__version__ = "0.1.0"
