"""Published reference values used as fixtures (BF table, BMA weights, averaged errors)."""

QOIS = ("VoidF1", "VoidF2", "VoidF3", "VoidF4")

# test-averaged Bayes factors: (assembly, bias mode) -> VoidF1..4
BAYES_FACTORS = {
    ("0011", "no_bias"): (1.1663, 0.3296, 0.4354, 1.1143),
    ("0011", "with_bias"): (1.9140, 0.4518, 1.0746, 1.2751),
    ("1071", "no_bias"): (1.0718, 0.5692, 1.1366, 1.3501),
    ("1071", "with_bias"): (1.4447, 0.6455, 1.2576, 1.5493),
    ("4101", "no_bias"): (4.2967, 1.6851, 2.7487, 3.4627),
    ("4101", "with_bias"): (5.0553, 1.7191, 2.1205, 1.3720),
}

# BMA weights: (assembly, model) -> (weights for model A, weights for the calibrated model)
WEIGHTS = {
    ("0011", "D"): ((0.4616, 0.7521, 0.6967, 0.4730), (0.5384, 0.2479, 0.3033, 0.5270)),
    ("0011", "E"): ((0.3432, 0.6888, 0.4820, 0.4395), (0.6568, 0.3112, 0.5180, 0.5605)),
    ("1071", "D"): ((0.4827, 0.6373, 0.4680, 0.4255), (0.5173, 0.3627, 0.5320, 0.5745)),
    ("1071", "E"): ((0.4090, 0.6077, 0.4430, 0.3923), (0.5910, 0.3923, 0.5570, 0.6077)),
    ("4101", "D"): ((0.1888, 0.3724, 0.2668, 0.2241), (0.8112, 0.6276, 0.7332, 0.7759)),
    ("4101", "E"): ((0.1651, 0.3678, 0.3205, 0.4216), (0.8349, 0.6322, 0.6795, 0.5784)),
}

# averaged absolute errors of predictive means, assembly 4101
ERRORS_4101 = {
    "A": (1.7724, 2.0249, 2.7713, 1.8043),
    "B": (1.6319, 2.9104, 2.2119, 1.4849),
}

MODEL_FOR_MODE = {"no_bias": "D", "with_bias": "E"}
