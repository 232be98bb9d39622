# %% [markdown]
# # Progressive coding end to end
#
# Trains a small model for a few epochs, writes one full-ratio stream and
# decodes prefixes of it. Quality grows with the ratio while the rate
# grows layer by layer. A real run would use the defaults (50 epochs).

# %%
import tempfile
from pathlib import Path

from tailpcc import bitstream, harness
from tailpcc.config import RunConfig

work = Path(tempfile.mkdtemp())
run = RunConfig.from_flat({
    "data.count": 12, "data.test_count": 2, "data.points": 1024,
    "train.epochs": 5, "train.batch_size": 4, "train.lambda": 1e-3,
})
ck = harness.cmd_train(run, work / "model.tpck")
print(open(work / "model.tpck.log.csv").read())

# %% [markdown]
# Encode one held-out cloud into a stream carrying every layer.

# %%
_, test = harness.resolve_dataset(run)
pc = harness.with_normals(test[0])
full, q = harness.compress_cloud(ck.model, pc, ck.run)
print(f"N={full.n_points} M={full.m} header={full.header_length} bytes, body={len(full.body)} bytes")

# %% [markdown]
# Truncation needs no decoding: it zeroes the dropped layers' lengths
# and cuts the body.

# %%
print(f"{'alpha':>7} {'k_z':>4} {'k_xyz':>5} {'file bpp':>9} {'PSNR-D2':>8}")
for k in (1, 2, 4, 8, 16, 32):
    bs = bitstream.truncate(full, k / 32)
    rec = bitstream.progressive_decode(bs, ck.model)
    qual = harness.quality(pc, rec)
    print(f"{k / 32:7.4f} {bs.retained[0]:4d} {bs.retained[1]:5d} {bitstream.file_bpp(bs):9.3f} "
          f"{qual['psnr_d2']:8.2f}")
