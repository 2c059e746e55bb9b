"""Dense spectral checks of the MHFE block-triangular preconditioner.

Prints the unit-eigenvalue multiplicity, the perturbation bound and the
second-level Schur surrogate sweep; equivalent to ``hybridbiot eigencheck``.
"""

import sys

from hybridbiot.cli import main

if __name__ == "__main__":
    sys.exit(main(["eigencheck"] + sys.argv[1:]))
