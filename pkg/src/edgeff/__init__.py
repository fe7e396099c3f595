"""Pair-token attention force fields, an MD engine, and physics audits.

Subpackages:
  autodiff     dense tensors + reverse-mode tape (numpy backed)
  params       path-addressable parameters, binary checkpoints
  model        embeddings, triangle attention layers, direct force head
  potentials   analytic conservative oracles (Morse, LJ, harmonic network)
  data         molecular systems, extended XYZ, synthetic corpora, splits
  training     O(3)-augmented supervised loop (AdamW, cosine warmup)
  md           velocity-Verlet, SVR / Nosé–Hoover, force projection
  rotations    uniform SO(3)/O(3) draws and 600-cell grids
  diagnostics  equivariance error, rotation grids, Jacobian audits, spectra
  cli          train / simulate / audit / spectrum / bench subcommands
"""

__version__ = "0.1.0"
