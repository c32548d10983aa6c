"""segcalib: post hoc confidence calibration for binary segmentation.

A desk-scale testbed that trains a small convolutional segmentation network
on synthetic subjects with an analytically known per-voxel posterior, then
fits and compares post hoc calibration methods (affine logit scaling, a
convolutional calibrator, last-layer fine-tuning) against Monte Carlo
dropout, scoring everything with masked expected calibration error, Dice,
and paired signed-rank significance tests.
"""

from .calibrate import (
    AuxConvCalibrator,
    AuxConvParams,
    CalibrationFitConfig,
    CalibrationSettings,
    McConfig,
    McDropoutPredictor,
    NetworkPredictor,
    PlattCalibrator,
    PlattParams,
    apply_aux_conv,
    apply_platt,
    calibrate_pipeline,
    fit_aux_conv,
    fit_platt,
    mc_predict,
    platt_to_aux_conv,
)
from .grids import (
    FoldSplit,
    Subject,
    make_grid,
    predicted_class,
    prediction_confidence,
    sigmoid_map,
    split_folds,
)
from .metrics import (
    BinSubjectStats,
    EceReport,
    ReliabilityBins,
    WilcoxonResult,
    best_marking,
    dice_score,
    ece,
    ece_report,
    subject_bin_distribution,
    subject_ece,
    wilcoxon_signed_rank,
)
from .network import (
    CENTER_SITES,
    DECODER_SITES,
    DropoutConfig,
    NetParams,
    SegmentationNetwork,
    TrainConfig,
    adam_step,
    backward,
    ce_loss_and_grad,
    finetune_last_layer,
    forward,
    init_params,
    insert_dropout_and_retrain,
    softdice_loss_and_grad,
    train,
)
from .pipeline import (
    ExperimentResults,
    RunConfig,
    run_experiment,
)
from .synth import (
    SynthConfig,
    gaussian_blur,
    generate_subjects,
    oracle_confidence,
    render_subject,
)

__version__ = "0.1.0"
