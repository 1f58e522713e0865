"""arlab: a desk-scale adversarial-robustness laboratory.

Uncertainty-promoting regularizers (entropy maximization, label
smoothing) with and without adversarial training, the attack matrix to
evaluate them, and the Jacobian/margin diagnostics that explain why
they work.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, forward_primitive
from .attacks import (AttackConfig, AttackResult, adaptive_smoothed_attack,
                      canonical_attack, clean_accuracy, cw_objective, fgsm,
                      format_attack, input_gradient, min_distortion_l2,
                      parse_attack, pgd, random_search_attack, robust_accuracy,
                      transfer_attack)
from .data import Dataset, load_mnist_idx, synth_dataset
from .diagnostics import (DiagnosticsRecord, SurfaceGrid, accuracy_eps_curve,
                          accuracy_steps_curve, compute_diagnostics,
                          decision_margin, jacobian_spectral_norm,
                          lipschitz_certificate, margin_distortion_correlation,
                          normalized_margin, q_nonlinearity, quantile_split,
                          surface_grid)
from .experiment import ExperimentConfig, Report, run_experiment
from .losses import (LossValue, cross_entropy, entm_loss, entropy, kl_div,
                     ls_loss, normal_loss, one_hot, smooth_labels, trades_loss)
from .models import (LayerSpec, Model, build_mlp, build_mnist_cnn,
                     load_checkpoint, predict, save_checkpoint)
from .training import TrainConfig, TrainReport, lr_schedule, sgd_step, train
