"""Sign-cluster simulation laboratory for the Gaussian free field on the
metric graph of Z^d.

Modules:
    lattice     -- boxes, sites, edges, and metric-graph points
    greens      -- free and Dirichlet Green's functions, kernels, capacity
    gff         -- field sampling, edge openings, conditioning
    clusters    -- sign-cluster labeling and geometric events
    montecarlo  -- experiment drivers, estimators, formula verification
    cli         -- command-line interface
"""

__version__ = "0.1.0"
