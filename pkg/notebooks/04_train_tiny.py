# Training a deliberately small network on a handful of phantom records.
# Takes a couple of minutes on one CPU. Run with: python notebooks/04_train_tiny.py

from eitphys import nets, sigproc, training
from eitphys.nets import ModelConfig
from eitphys.phantom import build_dataset, split
from eitphys.training import TrainConfig

ds = build_dataset(n_patients=2, records_per_patient=8, seed=1, duration=60.0)
ds = type(ds)([sigproc.align_records(r) for r in ds.records], ds.patients, ds.cohort)
train_set, test_set = split(ds, "intra")
print(len(train_set), "training records,", len(test_set), "test records")

cfg = TrainConfig(task=1, epochs=10, batch_size=4, max_lr=3e-3, crops_per_record=4)
small = ModelConfig(groups=2, layers_per_group=1, initial_features=4, intermed_dim=16, lstm_hidden=32)
model = nets.build_model(training.model_config_for(cfg.spec, small))
ck = training.train(model, train_set, cfg, callback=lambda e: print(f"step {e['step']:3d} loss {e['loss']:.3f}"))

report = training.evaluate(ck, test_set, split_name="intra")
print(f"volume: rmse {report.rmse:.1f} ml vs target sd {report.target_sd:.1f} ml, "
      f"ratings +/o/- = {report.plus}/{report.circle}/{report.minus}")
