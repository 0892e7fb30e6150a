# A short training run on synthetic faces, then resume.
import tempfile
from pathlib import Path

from agegender.data import scan_dataset, split_dataset
from agegender.models import attention_net_spec, build_model
from agegender.synthetic import make_utk_folder
from agegender.training import TrainConfig, load_checkpoint, train

root = Path(tempfile.mkdtemp())
make_utk_folder(root / "faces", 200, size=32, seed=4, signal=0.8)
records, _ = scan_dataset(root / "faces")
split = split_dataset(records, seed=0)

# scaled down so this runs in well under a minute
spec = attention_net_spec(input_size=32, stem_channels=8, stage_channels=(8, 16, 16), embedding_dim=16, age_hidden=16)
config = TrainConfig(epochs=4, batch_size=16, learning_rate=0.005)

result = train(build_model(spec), split, config, out_dir=root / "run")
for row in result.log:
    print({k: (round(v, 3) if isinstance(v, float) else v) for k, v in row.items() if k != "wall_seconds"})
print("files:", sorted(p.name for p in (root / "run").iterdir()))

# two more epochs from the saved state
more = train(build_model(spec), split, TrainConfig(epochs=6, batch_size=16), out_dir=root / "run",
             resume=load_checkpoint(root / "run" / "final.aagw"))
print("epochs after resume:", [r["epoch"] for r in more.log])
