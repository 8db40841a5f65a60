"""Joint input-space (VAT) and weight-space (ABCD) smoothing for small dense networks."""

from .abcd import AbcdConfig, Mask, Objective, abcd_step, sample_mask, sgd_step
from .datasets import (PointSet, SslDataset, gaussian_blobs, half_moons, load_csv, normalize, save_csv,
                       split_labeled)
from .losses import cross_entropy, entropy, kl_divergence
from .net import (GradientBundle, MlpNetwork, backward, flatten, forward, init_network,
                  load_checkpoint, save_checkpoint, unflatten)
from .probes import (ProbeConfig, ProbeTrajectory, TrainingLoss, ascent_probe, interpolation_curve,
                     response_grid, width_sweep)
from .trainer import NumericalAbort, TrainerConfig, TrainReport, evaluate, lr_schedule, train
from .vat import VatConfig, fgsm_perturbation, vat_loss, vat_perturbation

__version__ = "0.1.0"
