# %% [markdown]
# # Backward input selection on one patient
#
# Candidate lags of every variable are built on the 15-minute grid and
# pruned by resampled ridge weights. The validation curve shows how little
# accuracy is lost while most inputs are removed.

# %%
from glucocast.config import SELECT_VARIABLES, resolve
from glucocast.sim import simulate_cohort
from glucocast.sisal import candidate_set, sisal

cfg = resolve(environ={}).selection(seed=0)
rec = simulate_cohort(1, days=14, seed=2)[0]

# %%
for mode, variables in SELECT_VARIABLES.items():
    data = candidate_set(rec, variables, 900, 15, cfg.max_lag_steps)
    res = sisal(data, cfg)
    print(f"[{mode}] {len(data.columns)} candidates, {len(res.selected_set)} selected")
    print("  ranking:", ", ".join(v.value for v in res.variable_ranking))
    print("  selected:", ", ".join(f.name for f in res.selected_set))
    curve = res.validation_curve
    print(f"  val MSE: all inputs {curve[0]:.1f}, selected {curve[res.selected_step]:.1f}, "
          f"single input {curve[-1]:.1f}")
