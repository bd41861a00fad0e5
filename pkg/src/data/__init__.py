from data.dataset import DatasetHandle, MultiViewSample, load_dataset
from data.synthetic import (SyntheticScene, generate_dataset, generate_scene, inject_defect,
                            rig_homographies, visibility_coverage)
