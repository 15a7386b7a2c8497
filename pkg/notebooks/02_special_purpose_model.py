"""
Fairness and fit in the special-purpose recidivism model
=========================================================

The special-purpose model explains jail time with a latent risk class, a
latent severity factor and observed covariates.  The class prior depends on
the covariates through a small network, which is warm-started so that the
class posterior does not collapse onto one class.  We train it with and
without the fairness penalty and compare test R^2 and epsilon-DF.
"""

# %%
from dataclasses import replace

from fairsvi.data import encode_frame, synth_sp
from fairsvi.distributions import RngStream
from fairsvi.evaluation import assemble_report
from fairsvi.training import GroupEncoder, TrainConfig, train

frame, schema, truth = synth_sp(3000, rng=RngStream(11))
splits = encode_frame(frame, schema)
print(frame.head())

# %%
config = TrainConfig(epochs=15, batch_size=128, lr=0.002, seed=0)
vanilla = train("sp", splits, config)
fair = train("sp", splits, replace(config, fair=True, lam=10.0))

# %%
index = GroupEncoder(splits.train.protected).index
for name, result in (("Vanilla-SP", vanilla), ("DF-SP", fair)):
    report = assemble_report(result.model, splits.test, model_id=name, index=index)
    m = report.metrics
    print(f"{name:11s} R^2 {m['r2']:.3f}  MAE {m['mae']:.3f}  epsilon-DF {m['epsilon_df']:.3f}")

# %%
# Mean predicted jail time (log scale) for each race-by-sex group.
report = assemble_report(fair.model, splits.test, model_id="DF-SP", index=index)
for group, value in sorted(report.extras["jail_time_by_group"].items()):
    print(f"{group:28s} {value:.3f}")
