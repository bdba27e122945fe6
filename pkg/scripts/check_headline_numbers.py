"""Prints the headline budget numbers and whether they land in their target bands."""

import sys

import numpy as np

from optocool.core import (
    TWO_PI,
    NoiseBudget,
    budget_from_occupancies,
    cooling_sweep,
    effective_budget,
    ground_state_conditions,
)


def check(label: str, value: float, low: float, high: float) -> bool:
    ok = low <= value <= high
    mark = "✅" if ok else "❌"
    print(f"{mark} {label}: {value:.4g} (target {low:.4g} .. {high:.4g})")
    return ok


def check_rates() -> bool:
    budget = NoiseBudget.from_components(
        gamma_m=TWO_PI * 5.7, n_th=2.1e4, n_imp_shot=2.7e-5
    )
    verdicts = ground_state_conditions(budget)
    results = [
        check("Gamma_meas / 2pi [kHz]", budget.gamma_meas / TWO_PI / 1e3, 13 * 0.92, 13 * 1.08),
        check("Gamma_th / 2pi [kHz]", budget.gamma_th / TWO_PI / 1e3, 120 * 0.95, 120 * 1.05),
        check("Gamma_meas / Gamma_th", verdicts.rate_ratio, 0.10, 0.12),
    ]
    return all(results)


def check_product() -> bool:
    products = [
        effective_budget(
            n_th=2.1e4,
            c0=0.31,
            xi=0.23,
            n_c=n_c,
            gamma_m=TWO_PI * 5.7,
            c0_extraneous=0.56,
            n_imp_extraneous=0.70e-5,
        ).product
        for n_c in np.logspace(1, 6, 501)
    ]
    return check("minimum 4 sqrt(n_imp n_tot)", min(products), 4.8, 5.2)


def check_cooling() -> bool:
    gamma_m = TWO_PI * 5.7
    budget = budget_from_occupancies(gamma_m, n_tot=2.4e4, n_imp=2.9e-4)
    gamma_eff = TWO_PI * np.logspace(2, 6, 2001)
    curve = cooling_sweep(budget, gamma_eff / gamma_m - 1.0)
    best = int(np.argmin(curve.occupancy_plus_half))
    return all(
        [
            check("minimum n_m", float(curve.occupancy_plus_half[best] - 0.5), 4.7, 5.9),
            check(
                "optimal Gamma_eff / 2pi [kHz]",
                float(gamma_eff[best] / TWO_PI / 1e3),
                52 * 0.9,
                52 * 1.1,
            ),
        ]
    )


def main() -> int:
    print("--- Rates ---")
    ok = check_rates()
    print("--- Product ---")
    ok = check_product() and ok
    print("--- Cooling ---")
    ok = check_cooling() and ok
    if ok:
        print("All headline numbers reproduced.")
        return 0
    print("Some headline numbers are off.")
    return 1


if __name__ == "__main__":
    sys.exit(main())
