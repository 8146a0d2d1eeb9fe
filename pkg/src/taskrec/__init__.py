"""Joint tomographic reconstruction and task-decision training.

The package couples a differentiable parallel-beam forward model with
unrolled learned reconstruction operators and trainable task heads
(classification, binary segmentation, anomaly detection), trained either
sequentially, end-to-end, or jointly through the interpolating loss
(1-C) * reconstruction + C * task.
"""

from .tensor import (Tensor, Tape, ParamSet, ShapeError, backward, add, sub,
                     mul, neg, matmul, relu, sigmoid, conv2d, max_pool2d,
                     softmax, log, exp, clip_min, tsum, tmean, reshape,
                     concat, bias_add, upsample2x, narrow)
from .tomo import (Geometry, Sinogram, ray_transform, adjoint, fbp,
                   poisson_data, gaussian_data, log_transform, NoiseModel)
from .recon import (UnrollConfig, UnrollDivergence, learned_gradient_descent,
                    learned_primal_dual, fbp_operator,
                    init_gradient_descent_params, init_primal_dual_params)
from .tasks import (classify, classification_loss, segment,
                    segmentation_loss, anomaly, anomaly_loss,
                    init_classifier_params, init_unet_params,
                    init_anomaly_params)
from .training import (RegimeConfig, PretrainConfig, JointModel, TrainResult,
                       TrainingDiverged, joint_loss, joint_loss_parts,
                       train_sequential, train_end_to_end, train_joint,
                       sweep_C, invariance_probe, Adam, Sgd)
from .data import (Dataset, PhantomSpec, TripletBatch, TripletSource,
                   load_mnist, generate_phantom, make_phantom_dataset,
                   augment, make_triplets)
from .theory import (DiscreteJointModel, conditional, check_sufficiency,
                     check_corollary, run_theory_suite)
from .report import (MetricsRow, accuracy, pixel_accuracy, emit_table,
                     emit_plots)
from .checkpoint import save_params, load_params

__version__ = "0.1.0"