"""Walk through one seed of the method with the Python API.

Generates a small synthetic multimodal dataset, pretrains the contrastive
encoders, builds a context set, fine-tunes a stochastic model from a
deterministic baseline and compares selective prediction on a mixture of
clean and shifted test inputs.

    python demos/walkthrough.py
"""
from dataclasses import replace

import numpy as np

from certain import contextset, contrastive, datagen, evaluate, pipeline
from certain.objective import train

SEED = 0
cfg = pipeline.BenchmarkConfig()

# 1. Data: paired sequence + image inputs, some deliberately mismatched.
ds = datagen.generate(datagen.DatasetManifest(seed=SEED))
print(f"train {len(ds.train)}  val {len(ds.val)}  test {len(ds.test)}  "
      f"mismatched in train: {sum(s.mismatched for s in ds.train)}")

# 2. Contrastive pretraining aligns the two modality encoders.
cmodel, history = contrastive.pretrain(ds, contrastive.ContrastiveConfig(epochs=10, seed=SEED))
print(f"contrastive val retrieval accuracy: {history[-1]['val_retrieval']:.3f}")
phi_ehr, phi_cxr = contrastive.embed(cmodel, ds.train)

# 3. Inputs whose modalities disagree in the shared space are likely mismatched.
idx, stats = contextset.select_inter(phi_ehr, phi_cxr, v=cfg.v)
flags = np.array([s.mismatched for s in ds.train])
print(f"inter-modal selection: {len(idx)} samples, precision {flags[idx].mean():.2f} "
      f"(base rate {flags.mean():.2f}), cutoff {stats.t:.3f}")

# 4. The combined context set: corruptions plus the inter-modal selection.
ctx = contextset.build("medcertain_I", ds.train, (phi_ehr, phi_cxr), v=cfg.v, seed=SEED)
print("context set:", ctx.counts())

# 5. Deterministic baseline, then stochastic fine-tuning with and without context.
det = train(replace(cfg.det, seed=SEED), ds.train, ds.val)
plain = train(replace(cfg.stoch, seed=SEED, tau=0.0), ds.train, ds.val, None, init=det)
informed = train(replace(cfg.stoch, seed=SEED), ds.train, ds.val, ctx, init=det)

# 6. Selective prediction: reject the most uncertain inputs first.
samples, shifted = datagen.mix_shifted(ds.test, ds.test_shifted, cfg.shift_fraction, SEED)
print(f"\n{'model':<16}{'AUROC':>8}{'sel. AUROC':>12}{'H clean':>9}{'H shifted':>11}")
for name, result in (("deterministic", det), ("uninformative", plain), ("context prior", informed)):
    pred = result.predict(samples, j_eval=cfg.j_eval, seed=SEED)
    s = evaluate.evaluate_predictions(pred, samples).summary()
    h = pred.entropy
    print(f"{name:<16}{s['auroc']:>8.3f}{s['selective_auroc']:>12.3f}"
          f"{h[~shifted].mean():>9.3f}{h[shifted].mean():>11.3f}")
