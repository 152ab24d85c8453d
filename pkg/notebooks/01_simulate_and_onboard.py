# %% [markdown]
# # Simulated patients and on-board features
#
# A short tour of one synthetic patient: the glucose trace, the logged
# events, and the insulin / carbohydrate on-board curves derived from them.

# %%
import numpy as np

from glucocast.onboard import DEFAULT_KERNELS, onboard_features, remaining_fraction
from glucocast.series import Variable, align
from glucocast.sim import simulate_cohort

rec = simulate_cohort(1, days=3, seed=4)[0]
g = rec[Variable.GLUCOSE]
print(rec.patient_id, len(g), "CGM slots at", g.step_s, "s")
print("missing CGM slots:", int(np.isnan(g.values).sum()))
print(f"glucose mean {np.nanmean(g.values):.1f} mg/dL, range {np.nanmin(g.values):.0f}-{np.nanmax(g.values):.0f}")

# %% [markdown]
# Remaining-fraction curves of the default kernels, sampled hourly.

# %%
for v, k in DEFAULT_KERNELS.items():
    hours = np.arange(0, k.duration_s // 3600 + 1)
    r = remaining_fraction(k, hours * 3600.0)
    print(f"{v.value:>14} {k.shape:>15}: " + " ".join(f"{x:.2f}" for x in r))

# %% [markdown]
# On-board series on the 5-minute grid. Peaks follow bolus and meal times.

# %%
aligned = align(rec, 300)
ob = onboard_features(aligned, rec.series)
for v in (Variable.IOB, Variable.COB, Variable.EOB):
    x = ob[v].values
    print(f"{v.value}: max {x.max():.2f} at slot {int(x.argmax())}, mean {x.mean():.2f}")
