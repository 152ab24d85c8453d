# %% [markdown]
# # Walk-forward forecasting on a small cohort
#
# Ten days of training and four of testing per patient. Persistence is the
# reference every model has to beat.

# %%
from glucocast import evalbench as eb
from glucocast.models import ArimaSpec, RFSpec, RidgeSpec
from glucocast.sim import simulate_cohort

cohort = simulate_cohort(3, days=14, seed=0)
cfg = eb.EvalConfig(models=(RidgeSpec(), ArimaSpec(), RFSpec(n_trees=30)), step_s_options=(300, 900),
                    history_options=(6,), horizon_options=(15, 60))
res = eb.run_grid(cohort, cfg)
print(len(res.rows), "rows,", res.n_errors, "errors")

# %%
print(eb.format_table(eb.report(res.rows, res.baseline)))
