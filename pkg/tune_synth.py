# Scratch script: validate the acceptance-harness synthetic setup.
import pathlib
import tempfile
import time
from dataclasses import replace

from antitransfer.losses import ATConfig
from antitransfer.synth import SynthSpec, generate
from antitransfer.training import TrainConfig, pretrain, train_on_dir

tmp = pathlib.Path(tempfile.mkdtemp(prefix="tune_v5_"))
base = SynthSpec(samples_per_split=(400, 100, 300),
                 train_correlation=0.9, test_correlation=0.0,
                 image_size=(32, 37), noise_sigma=0.1,
                 target_amplitude=1.0, orth_amplitude=1.2,
                 band_fade=1.0, seed=0)
orth_dir = generate(replace(base, train_correlation=0.0, band_fade=0.0,
                            seed=9999), tmp / "orth_data")
p = pretrain(TrainConfig(strategy="scratch", label_field="orth1",
                         seed=7, max_epochs=15, arch_preset="vgg-tiny"),
             orth_dir, tmp / "orth_model")
ck = str(p.checkpoint_path)
print(f"orth extractor test acc {p.test_accuracy:.2f}", flush=True)
for seed in (1, 2, 3):
    data_dir = generate(replace(base, seed=seed), tmp / f"data_{seed}")
    line = [f"seed {seed}:"]
    t0 = time.perf_counter()
    for strat, layers in [("scratch", (1,)), ("wi", (1,)),
                          ("at", (1,)), ("at", (2,)), ("at", (3,)), ("at", (4,)),
                          ("at_inverse", (2,)), ("wi_freeze", (2,))]:
        kw = {} if strat == "scratch" else dict(pretrained_checkpoints=(ck,))
        cfg = TrainConfig(strategy=strat, seed=seed, max_epochs=30,
                          arch_preset="vgg-tiny",
                          at=ATConfig(layers=layers, beta=1.0), **kw)
        r = train_on_dir(cfg, data_dir, tmp / f"{strat}_{layers[0]}_{seed}")
        name = strat if strat != "at" else f"at{layers[0]}"
        line.append(f"{name}={r.test_accuracy:.3f}/v{r.val_accuracy:.2f}({len(r.metrics)})")
    line.append(f"[{time.perf_counter()-t0:.0f}s]")
    print(" ".join(line), flush=True)
