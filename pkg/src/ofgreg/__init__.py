"""On-the-fly guidance training for 3D deformable registration, in numpy."""

from ofgreg.volume import (
    Grid,
    ScalarVolume,
    DisplacementField,
    LabelVolume,
    ImagePair,
    normalize,
    linear_index,
    coords_from_index,
)
from ofgreg.warp import (
    identity_field,
    warp_trilinear,
    warp_nearest,
    warp_backward,
    resample_field,
    resample_volume,
)
from ofgreg.energy import (
    EnergyConfig,
    local_ncc,
    ncc_grad,
    mse_similarity,
    mse_similarity_grad,
    smoothness,
    smoothness_grad,
    energy,
    energy_grad,
    field_mse,
    field_mse_grad,
)
from ofgreg.optimizer import (
    OptimConfig,
    OptimState,
    RefineTrace,
    adam_step,
    refine,
    refine_downsampled,
)
from ofgreg.metrics import MetricsReport, dice, jacobian_det, pct_nondiffeo, evaluate
from ofgreg.predictor import Architecture, PredictorParams, init_params, predict, backward, save_params, load_params
from ofgreg.data import PhantomSpec, FieldSpec, gen_phantom, gen_smooth_field, make_pair, make_dataset
from ofgreg.training import TrainConfig, Mode, train, ofg_step, unsup_step, selftrain_run

__version__ = "0.1.0"
