"""Train a small forecaster at one noise level and evaluate it at others.

    python3 demos/train_and_sweep.py [epochs]

A reduced model (8 filters, one block) runs about 2 s per epoch.
"""
import sys

from stmodes.datasets import generate_synthetic
from stmodes.experiment import ExperimentConfig, noise_sweep, train_pipeline
from stmodes.vmd import VmdConfig

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
ds = generate_synthetic()
cfg = ExperimentConfig(sigma_hat=0.1, vmd=VmdConfig(num_modes=3), filters=8, blocks=1,
                       epochs=epochs)

pipe = train_pipeline(ds.signals, ds.graph, cfg)
for epoch, train_mae, val_mae, _ in pipe.report.curve_rows():
    print(f"epoch {epoch:>3}  train {train_mae:.4f}  val {val_mae:.4f}")
print(f"best epoch {pipe.report.best_epoch}, {pipe.model.parameter_count()} parameters")
test = pipe.test_metrics
for h in (1, 3, 6, 12):
    print(f"  horizon {h:>2}  MAE {test.mae[h - 1]:.3f}  RMSE {test.rmse[h - 1]:.3f}")

print("\nnoise sweep (trained at sigma 0.1)")
for sigma, report in noise_sweep(pipe, ds.signals, (0.0, 0.1, 0.2, 0.5, 1.0)):
    print(f"  sigma {sigma:<4} average MAE {report.average_mae:.3f}")
