"""Cahn-Hilliard phase-field workbench: spectral solver, neural-operator surrogates, tooling.

Subpackage layout:

* ``fields``     -- grids, field containers, the D4 symmetry group, binary field I/O
* ``spectral``   -- periodic / cosine spectral transforms and differential operators
* ``solver``     -- semi-implicit pseudo-spectral Cahn-Hilliard time stepper
* ``nncore``     -- minimal float64 reverse-mode autodiff (tape, params, Adam)
* ``operators``  -- FNO / UNO architectures built on nncore
* ``training``   -- losses (data + equivariance), training loop
* ``evaluation`` -- rollout metrics, distribution summaries, energy tracking
* ``datasets``   -- dataset generation, manifests, checksums, sample loading
* ``cli``        -- ``chno`` command line entry point
"""

__version__ = "0.1.0"
