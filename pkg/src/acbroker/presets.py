"""Named experiment presets at desk scale.

fig1/fig2: two-agent sweeps of the broker value over permanent (fig1) and
temporary (fig2) impact coefficients.  fig3/fig4: percentile client families
ranked by permanent/temporary impact for a larger seeded population (desk
default N=20; raise "n" to reproduce the original N=100 runs).  fig5/fig6:
an eight-agent ramp population swept over the broker's temporary impact,
reporting relative agent values and the optimal portfolio.

fig3 ships twice because its source fixes the broker impact only through the
ambiguous product "5 kappa0 = 1e-2": "fig3" reads it as kappa0 = 1e-2 (which
also exhibits the interior-optimum shape at desk scale), "fig3_tight_k0" as
kappa0 = 2e-3.
"""

PRESETS = {
    "fig1": {
        "kind": "sweep2d",
        "mu": 1.0, "sigma": 1.0, "horizon": 1.0,
        "kappa0": 0.1, "lambda0": 1e-3,
        "agents": [
            {"kappa": 0.1, "lam": 1e-3, "x0": 0.0},
            {"kappa": 0.1, "lam": 1e-3, "x0": 0.0},
        ],
        "sweep": {
            "x": "lambda1", "y": "lambda2",
            "x_range": [1e-3, 5e-2], "y_range": [1e-3, 5e-2],
            "x_count": 10, "y_count": 10,
        },
    },
    "fig2": {
        "kind": "sweep2d",
        "mu": 1.0, "sigma": 1.0, "horizon": 1.0,
        "kappa0": 1e-2, "lambda0": 1e-2,
        "agents": [
            {"kappa": 1e-2, "lam": 1e-2, "x0": 0.0},
            {"kappa": 1e-2, "lam": 1e-2, "x0": 0.0},
        ],
        "sweep": {
            "x": "kappa1", "y": "kappa2",
            "x_range": [1e-2, 1e-1], "y_range": [1e-2, 1e-1],
            "x_count": 10, "y_count": 10,
        },
    },
    "fig3": {
        "kind": "percentile",
        "mu": 1.0, "sigma": 1.0, "horizon": 1.0,
        "kappa0": 1e-2, "lambda0": 1e-4,
        "agent_generator": {
            "type": "uniform", "n": 20, "seed": 20240611,
            "kappa": 5e-2, "lam_low": 1e-4, "lam_high": 1e-3, "x0": 0.0,
        },
        "percentile": {"key": "lambda", "directions": ["lowest", "highest"],
                       "p_count": 10},
    },
    "fig3_tight_k0": {
        "kind": "percentile",
        "mu": 1.0, "sigma": 1.0, "horizon": 1.0,
        "kappa0": 2e-3, "lambda0": 1e-4,
        "agent_generator": {
            "type": "uniform", "n": 20, "seed": 20240611,
            "kappa": 5e-2, "lam_low": 1e-4, "lam_high": 1e-3, "x0": 0.0,
        },
        "percentile": {"key": "lambda", "directions": ["lowest", "highest"],
                       "p_count": 10},
    },
    "fig4": {
        "kind": "percentile",
        "mu": 1.0, "sigma": 1.0, "horizon": 1.0,
        "kappa0": 1e-3, "lambda0": 5e-5,
        "agent_generator": {
            "type": "uniform", "n": 20, "seed": 20240612,
            "kappa_low": 1e-4, "kappa_high": 1e-3, "lam": 1e-4, "x0": 0.0,
        },
        "percentile": {"key": "kappa", "directions": ["lowest", "highest"],
                       "p_count": 10},
    },
    "fig5": {
        "kind": "kappa0_sweep",
        "mu": 1.0, "sigma": 1.0, "horizon": 1.0,
        "kappa0": 1e-2, "lambda0": 1e-4,
        "agent_generator": {
            "type": "ramp", "n": 8,
            "kappa_base": 1e-2, "kappa_end": 1e-1,
            "lam_base": 1e-4, "lam_end": 1e-3, "x0": 0.0,
        },
        # the sweep extends until the broker's temporary impact approaches the
        # cheapest agent's, where the optimal portfolio starts shedding
        # clients; below 1e-2 the broker always takes all eight
        "kappa0_range": [1e-3, 2.2e-2], "kappa0_count": 8,
    },
}

# fig6 reads theta* off the same kappa0 sweep that fig5 reads values from.
PRESETS["fig6"] = dict(PRESETS["fig5"])
