# Allow direct access to the pipeline entry points.
from atlasaug.augmentation import adversarial_augment, extract_transforms, vanilla_augment
from atlasaug.config import TrainConfig, load_config
from atlasaug.evaluation import EvalReport, dice_score
from atlasaug.losses import LossWeights, Prediction
from atlasaug.networks import build_networks
from atlasaug.phantom import PhantomSpec, make_cohort, make_subject, make_template
from atlasaug.trainer import Trainer
from atlasaug.volume import Atlas, DisplacementField, LabelMap, Volume
from atlasaug.volume_io import read_volume, write_volume
from atlasaug.warping import compose_fields, invert_field, warp_labels, warp_volume
