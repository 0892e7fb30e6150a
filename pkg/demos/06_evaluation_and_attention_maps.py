# Metrics for a model and an ensemble, then attention maps as PGM/PPM files.
import tempfile
from pathlib import Path

from agegender.data import load_batch, read_pnm, scan_dataset, split_dataset
from agegender.evaluation import evaluate, export_attention_maps
from agegender.models import Ensemble, attention_net_spec, attention_taps, build_model, resnet_lite_spec
from agegender.synthetic import make_utk_folder
from agegender.training import TrainConfig, train

root = Path(tempfile.mkdtemp())
make_utk_folder(root / "faces", 160, size=32, seed=5, signal=0.8)
records, _ = scan_dataset(root / "faces")
split = split_dataset(records, seed=0)

a = build_model(attention_net_spec(input_size=32, stem_channels=8, stage_channels=(8, 16, 16), embedding_dim=16,
                                   age_hidden=16))
r = build_model(resnet_lite_spec(input_size=32, stem_channels=8, stage_channels=(8, 16, 16, 32), embedding_dim=32,
                                 age_hidden=16))
for m in (a, r):
    train(m, split, TrainConfig(epochs=3))

report, members = evaluate(Ensemble([a, r]), split.test, with_members=True)
for rep in members + [report]:
    print(f"{rep.label:9s} gender {rep.gender_accuracy:.3f}  age {rep.age_bucket_accuracy:.3f}  AABD {rep.aabd:.3f}")
print("age confusion (rows true, cols predicted)\n", report.confusion_age)
report.write(root / "metrics")

batch = load_batch(split.test[:2], (32, 32))
taps = attention_taps(a, batch.images)
ids = [rec.name.split(".")[0] for rec in split.test[:2]]
files = export_attention_maps(taps, root / "maps", ids, target_hw=(32, 32))
print(len(files), "map files, e.g.", files[0].name, read_pnm(files[0]).shape)
