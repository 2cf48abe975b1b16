# %% [markdown]
# # Sweeping the pipeline
#
# Each sweep varies one setting and re-scores a batch of planted scenes.
# Noise is raised well past the calibrated level so the settings separate.
#
# The planted model is built for provable recovery, not to imitate a
# trained network. Its gates are all zero, so the residual stream never
# changes and every layer sees the same input. Read these tables as a demo
# of the sweep machinery, not as evidence about which setting is best.

# %%
from ca_kit.ablation import planted_scenes, run_ablation
from ca_kit.mmdit import ModelConfig
from ca_kit.planted import planted_weights

weights = planted_weights(ModelConfig(), seed=0)
scenes = planted_scenes(weights, n=2, sigma=3.0, seed=0)

# %% [markdown]
# Representation space crossed with the per-pixel softmax.

# %%
print(run_ablation("space_softmax", scenes, weights).to_csv())

# %% [markdown]
# Which slots the concept queries may attend to: none, concepts only, image
# only, or both.

# %%
print(run_ablation("ca_sa", scenes, weights).to_csv())

# %% [markdown]
# One row per layer, then the average over all of them. Flat here, for the
# reason given at the top.

# %%
print(run_ablation("layers", scenes, weights).to_csv())

# %% [markdown]
# Timestep sweep with the multi-class protocol, which reports no mAP.

# %%
print(run_ablation("timesteps", scenes, weights, protocol="multi", steps=[0, 500, 1000]).to_csv())
