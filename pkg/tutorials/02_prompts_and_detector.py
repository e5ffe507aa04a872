# %% [markdown]
# Prompts, a small detector and its attention map
#
# Build a labelled batch, turn one window into a prompt, train a detector with
# the short desk recipe and project its attention back onto the measurement grid.
# Takes a few minutes on a laptop CPU.

# %%
import tempfile

import numpy as np

from relayguard.assets import build_reference_asset
from relayguard.classifier import DESK_TRAIN_CONFIG, train_detector
from relayguard.dataset import Dataset, stratified_split
from relayguard.evaluate import run_main_eval
from relayguard.explain import explain
from relayguard.scenarios import GeneratorConfig, generate_batch
from relayguard.textualize import V3, align_tokens_to_cells, textualize, tokenize
from relayguard.waveform import SystemConfig

windows, records = generate_batch(SystemConfig(), GeneratorConfig(n_scenarios=800, seed=1))
ds = Dataset.from_windows(windows)
print(ds.class_counts)

# %%
doc = textualize(windows[0])
print(doc.text[:300], "...")
print("stripped variant:", textualize(windows[0], V3).text[:120], "...")

# %%
work = tempfile.mkdtemp()
asset = build_reference_asset(f"{work}/asset", seed=0)
sample = tokenize(doc, asset.tokenizer)
print("tokens:", sample.n_tokens, "of 512")

# %%
train, test = stratified_split(ds)
model = train_detector(asset, train, DESK_TRAIN_CONFIG)
report, _ = run_main_eval(model, test)
print(report.row("reference encoder, desk recipe"))

# %%
amap = explain(model, sample, align_tokens_to_cells(sample, doc))
t, c = np.unravel_index(np.argmax(amap.cell_scores), amap.cell_scores.shape)
print("most attended cell: time index", t, "channel", ("Ain", "Bin", "Cin", "Aout", "Bout", "Cout")[c])
print("top 10% cells:", amap.top_cells(0.1)[:5], "...")
