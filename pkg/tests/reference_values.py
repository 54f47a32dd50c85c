"""Published reference values for the simulation design grid.

Cells are keyed by ``(a23, a21, a22)``. Size entries are rejection
frequencies at the 10% level from 1000 replications.
"""

LEVELS = (0.0, 0.2, 0.45)

_MU2_ROWS = {
    0.0: ([0.000, 4.082, 24.175, 0.000, 4.070, 23.938, 0.000, 4.040, 23.393],
          [0.000, 4.082, 24.175, 0.000, 4.070, 23.938, 0.000, 4.040, 23.393]),
    0.2: ([11.198, 19.501, 48.211, 12.137, 21.030, 49.983, 13.431, 23.283, 53.527],
          [6.638, 14.262, 38.910, 7.144, 15.044, 38.117, 7.827, 16.092, 36.214]),
    0.45: ([56.388, 81.202, 101.025, 61.410, 83.525, 101.183, 66.590, 83.989, 107.289],
           [29.100, 42.505, 52.008, 30.144, 41.690, 47.471, 31.006, 40.080, 42.374]),
}

MU2 = {
    (a23, a21, a22): (oracle[3 * i + j], observed[3 * i + j])
    for a23, (oracle, observed) in _MU2_ROWS.items()
    for i, a21 in enumerate(LEVELS)
    for j, a22 in enumerate(LEVELS)
}

# corner cells (a21, a22) in {(0, 0), (0.45, 0.45)} of each a23 panel
SIZE = {
    (0.0, 0.0, 0.0): {"oracle": 0.070, "random": 0.107, "crude_threshold": 0.445,
                      "lasso": 0.199, "sup_score": 0.030, "crude_ts": 0.200},
    (0.0, 0.45, 0.45): {"oracle": 0.046, "random": 0.135, "crude_threshold": 0.440,
                        "lasso": 0.230, "sup_score": 0.033, "crude_ts": 0.150},
    (0.2, 0.0, 0.0): {"oracle": 0.059, "random": 0.108, "crude_threshold": 0.413,
                      "lasso": 0.188, "sup_score": 0.024, "crude_ts": 0.176},
    (0.2, 0.45, 0.45): {"oracle": 0.056, "random": 0.129, "crude_threshold": 0.405,
                        "lasso": 0.195, "sup_score": 0.026, "crude_ts": 0.219},
    (0.45, 0.0, 0.0): {"oracle": 0.084, "random": 0.107, "crude_threshold": 0.372,
                       "lasso": 0.201, "sup_score": 0.016, "crude_ts": 0.186},
    (0.45, 0.45, 0.45): {"oracle": 0.087, "random": 0.122, "crude_threshold": 0.398,
                         "lasso": 0.212, "sup_score": 0.037, "crude_ts": 0.292},
}
