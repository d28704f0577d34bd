"""
Generate the default synthetic chirp dataset
Run this once after installing requirements: python generate_data.py [out_dir]
"""

import sys

from app.models import SyntheticTaskSpec
from app.services.spectrograms import export_dataset, gen_synthetic
from app.utils.helpers import setup_logging


def main():
    """Write train/val MELF files and manifests for the default task"""
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "data/synthetic"
    print("=" * 60)
    print("🚀 Generating synthetic spectrograms for A-RWKV")
    print("=" * 60)

    setup_logging()
    task = SyntheticTaskSpec()
    print(f"📌 {task.num_classes} classes, {task.n_mels}x{task.n_frames}, SNR {task.snr_db} dB")

    for split, count in (("train", task.n_train), ("val", task.n_val)):
        try:
            manifest = export_dataset(gen_synthetic(task, count, split), out_dir, split)
            print(f"  ✅ {split}: {count} samples -> {manifest}")
        except Exception as e:
            print(f"  ❌ {split}: {str(e)}")
            raise

    print("\n" + "=" * 60)
    print("✅ Data ready! Train with:")
    print(f"   python -m app.cli train --config configs/micro.txt --recipe configs/recipe_micro.txt "
          f"--data {out_dir}/train.tsv --val-data {out_dir}/val.tsv --out runs/micro")
    print("=" * 60)


if __name__ == "__main__":
    main()
