"""Broadband JCAS waveform optimization.

Channel synthesis, communication/sensing metrics, individually optimal
precoders and the MI- and CRB-constrained joint precoder solvers.
"""

from .channel import (
    CommChannel,
    CommPath,
    ScenarioConfig,
    SensingScene,
    Target,
    array_response,
    draw_scenario,
    steering_derivative,
    synth_comm_channel,
    synth_sensing_scene,
)
from .metrics import (
    CommMetricReport,
    FimReport,
    PrecoderSet,
    SingularFimError,
    build_ru,
    comm_report,
    crb_total,
    ecg,
    fim,
    j_metric,
    mui,
    sensing_mi,
    sinr_and_rate,
)
from .individual import (
    CrbCovariance,
    DegenerateChannelError,
    MiPrecoderGain,
    opt_comm_precoder,
    opt_crb_covariance,
    opt_mi_precoder,
)
from .jcas import (
    InfeasibleError,
    IterationTrace,
    JcasParams,
    algorithm1,
    algorithm2,
    closed_form_jcas,
    constraint_psi,
    constraint_psi_dprime,
    constraint_psi_prime,
    crb_pipeline,
    crb_start_point,
    find_initial,
    mi_pipeline,
    mi_start_point,
    realify,
)

__version__ = "0.1.0"
