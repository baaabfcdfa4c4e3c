"""Why compare a patient with themself: accuracy as between-patient spread grows.

For each sigma_b in {0, 1, 2.5, 5} * sigma_v the script simulates a cohort,
trains the cross-sectional FNN on single visits and the sequential encoder
on within-patient pairs, and prints both next to their Gaussian Bayes
ceilings.  The FNN tracks its falling ceiling; the paired model does not care.

    python3 demos/heterogeneity_sweep.py [n_seeds]     # about 40 s per seed
"""

import sys

import numpy as np

from voicetrack.cohort import (CohortConfig, FnnConfig, bayes_reference_accuracies, cross_sectional_fnn,
                               generate_cohort, pse_on_cohort)
from voicetrack.pse import PseConfig

SIGMA_V = 0.5


def main(n_seeds: int) -> None:
    print(f"{'sigma_b':>8s} {'FNN':>7s} {'Bayes x-sec':>12s} {'PSE':>7s} {'Bayes paired':>13s}")
    for mult in (0.0, 1.0, 2.5, 5.0):
        fnn, pse = [], []
        for seed in range(n_seeds):
            cfg = CohortConfig.with_visit_noise(SIGMA_V, sigma_b=mult * SIGMA_V, n_patients=200,
                                                frames_per_visit=64, seed=seed)
            cohort = generate_cohort(cfg)
            fnn.append(cross_sectional_fnn(cohort, FnnConfig(seed=seed)).report.accuracy)
            pcfg = PseConfig(frame_length=64, pretrain_epochs=5, epochs=40, lr=3e-3, seed=seed)
            pse.append(pse_on_cohort(cohort, pcfg, split_seed=seed).accuracy)
        ref = bayes_reference_accuracies(cfg)
        print(f"{mult * SIGMA_V:8.2f} {np.mean(fnn):7.3f} {ref.cross_sectional:12.3f} "
              f"{np.mean(pse):7.3f} {ref.paired:13.3f}", flush=True)


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1)
