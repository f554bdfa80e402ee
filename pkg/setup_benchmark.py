#!/usr/bin/env python3
"""
Setup script to render the default train/test benchmark datasets
"""

import logging
import os
import sys
from typing import Optional

from config import Config, resolve_run_config, split_seed
from dataset_store import dataset_stats, write_dataset
from shapegen import build_dataset

# Configure logging
logging.basicConfig(level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO))
logger = logging.getLogger(__name__)


def setup_benchmark(preset: str = "default", out_dir: Optional[str] = None, seed: int = Config.SEED) -> bool:
    """Render train.ds and test.ds for the preset's regime and sampler"""
    out_dir = out_dir or Config.DATA_DIR
    try:
        run = resolve_run_config(preset)
        network, data = run.network, run.data
        for split, per_class in (("train", data.train_per_class), ("test", data.test_per_class)):
            logger.info(f"Rendering {split} split ({per_class} objects per class)...")
            dataset = build_dataset(run.train.regime, per_class, network.num_classes, network.resolution,
                                    seed=split_seed(seed, split), sampler=run.train.sampler,
                                    min_views=data.min_views, max_views=data.max_views, fps_pool=data.fps_pool)
            path = os.path.join(out_dir, f"{split}.ds")
            digest = write_dataset(dataset, path)
            logger.info(f"✅ {path} ({digest[:12]})")
            logger.info(f"📊 {split} stats: {dataset_stats(dataset)}")
        return True
    except Exception as e:
        logger.error(f"❌ Error setting up benchmark: {e}")
        return False


def main():
    """Main function"""
    preset = sys.argv[1] if len(sys.argv) > 1 else "default"
    print(f"🚀 Rendering the PANet benchmark (preset: {preset})")
    print("=" * 60)

    success = setup_benchmark(preset)

    if success:
        print("\n✅ Setup completed successfully!")
        print(f"Train with: python main.py train --data {Config.DATA_DIR}/train.ds "
              f"--val {Config.DATA_DIR}/test.ds --out {Config.RUNS_DIR}/default")
    else:
        print("\n❌ Setup failed. Please check the error messages above.")
        sys.exit(1)


if __name__ == "__main__":
    main()
