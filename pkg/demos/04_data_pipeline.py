# UTK-style filenames, decade buckets, splits and batches.
import tempfile

import numpy as np

from agegender.data import DEFAULT_SCHEME, age_to_bucket, iter_batches, parse_utk_filename, scan_dataset, split_dataset
from agegender.synthetic import make_utk_folder

print(parse_utk_filename("25_0_2_20170116174525125.jpg.chip.jpg"))
for age in (3, 25, 47, 110):
    b = age_to_bucket(age)
    print(f"age {age:3d} -> bucket {b} ({DEFAULT_SCHEME.label(b)})")

root = tempfile.mkdtemp()
make_utk_folder(root, 120, size=48, seed=0)
records, census = scan_dataset(root)
print("census", census.total, "male", census.male, "female", census.female)
print("per bucket", census.by_bucket)

split = split_dataset(records, seed=0)
print("train/val/test", len(split.train), len(split.val), len(split.test))

batch = next(iter_batches(split.train, 16, (64, 64), augment=True, seed=0, epoch=1))
print("batch", batch.images.shape, batch.images.dtype, "range", batch.images.min(), batch.images.max())
print("genders", batch.gender, "buckets", batch.bucket)
