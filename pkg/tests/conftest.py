import math
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from thzvlc import channel, env
from thzvlc.geometry import Point3, make_grid


def make_toy_scenario(
    num_users=2,
    num_sbs=2,
    slots_per_period=2,
    vap_xy=((2.0, 2.0), (4.0, 2.0), (2.0, 4.0), (4.0, 4.0)),
    sbs_xy=((2.0, 3.0), (4.0, 3.0)),
    cells_per_side=3,
    fov_deg=75.0,
    room_side=6.0,
    ceiling=3.0,
):
    """Small joint-action scenario; defaults give C(4,3) * 2! = 8 actions."""
    radio = channel.RadioParams(
        carrier_freq_hz=1.0e12,
        bandwidth_hz=1.0e10,
        tx_power_w=1.0,
        absorption_per_m=0.01,
        noise_density_w_per_hz=channel.dbm_per_hz_to_w_per_hz(-174.0),
        image_size_bits=2.0e7,
        slot_duration_s=0.01,
    )
    return env.ScenarioConfig(
        room_side=room_side,
        ceiling_z=ceiling,
        vap_positions=tuple(Point3(x, y, ceiling) for x, y in vap_xy),
        sbs_positions=tuple(Point3(x, y, ceiling) for x, y in sbs_xy[:num_sbs]),
        num_users=num_users,
        user_height_range=(1.4, 1.9),
        body_radius=0.2,
        grid=make_grid(room_side, cells_per_side),
        slots_per_period=slots_per_period,
        num_periods=4,
        radio=radio,
        optics=channel.OpticsParams(fov_semi_angle_rad=math.radians(fov_deg)),
    )


@pytest.fixture
def toy_scenario():
    return make_toy_scenario()


@pytest.fixture
def default_radio():
    return channel.RadioParams(
        carrier_freq_hz=1.0e12,
        bandwidth_hz=1.0e10,
        tx_power_w=1.0,
        absorption_per_m=0.01,
        noise_density_w_per_hz=channel.dbm_per_hz_to_w_per_hz(-174.0),
        image_size_bits=2.0e7,
        slot_duration_s=0.01,
    )
