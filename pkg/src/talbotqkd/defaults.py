"""Reference laboratory parameters used as defaults by the CLI and tests."""
from __future__ import annotations

from .keyrate import ChannelModel, DecoySettings

BETA2_PS2 = 12900.0
PULSE_WIDTH_PS = 46.0
SEPARATION_PS = 284.0
MEASURED_WIDTH_PS = 70.0
MEASURED_SEPARATION_PS = 279.0
JITTER_PS = 15.0
DCM_INSERTION_LOSS_DB = 2.67

ETA_X = 0.84
ETA_Z = 0.81
P_DC_X = 3.36e-7
P_DC_Z = 2.80e-7
ERROR_Z = 0.005
MU2 = 2e-6
MU3 = 1e-6

# intrinsic control-basis error at 15 ps jitter from the reference simulation
ERROR_X = {2: 0.2197, 4: 0.3456}
# signal intensity quoted per dimension for the key-rate simulation
MU1 = {2: 0.65, 4: 0.77, 8: 0.76, 16: 0.62, 32: 0.39}

TBS_ETA_DOWN = 0.0001
TBS_ETA_2 = 0.2549
TBS_ETA_UP = 0.9999
TBS_X_PATH_DB = 2.67
TBS_Z_PATH_DB = 2.66


def lab_channel(d: int, err_x: float, channel_loss_db: float = 0.0, err_z: float = ERROR_Z) -> ChannelModel:
    return ChannelModel(
        d=d, channel_loss_db=channel_loss_db, eta_x=ETA_X, eta_z=ETA_Z,
        p_dc_x=P_DC_X, p_dc_z=P_DC_Z, err_x=err_x, err_z=err_z,
    )


def lab_decoys(d: int, mu1: float | None = None) -> DecoySettings:
    return DecoySettings((MU1[d] if mu1 is None else mu1, MU2, MU3))
