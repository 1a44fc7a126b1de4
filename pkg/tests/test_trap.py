import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quartzion import constants
from quartzion.trap import (
    QuartzConfig,
    TrapConfig,
    TrapDomainError,
    axial_frequency,
    coupling_constant,
    cyclotron_frequency,
    radial_frequencies,
)

CA_MASS = 6.6359e-26
Q = constants.ELEMENTARY_CHARGE


def trap(**kw):
    args = dict(magnetic_field=7.0, ring_voltage=4.0, char_distance=7.07e-3, ion_mass=CA_MASS,
                ion_charge=Q, geom_factor=0.8, electrode_half_gap=5e-3, ion_count=1)
    args.update(kw)
    return TrapConfig(**args)


def quartz(**kw):
    args = dict(capacitance=1e-12, mode_mass=1e-6, omega_q=2 * math.pi * 2.6897e6,
                piezo_constant=1e-3, quality_factor=6.7e4, temperature=300.0, v0=4e-11)
    args.update(kw)
    return QuartzConfig(**args)


def test_axial_frequency_direct_formula():
    # independent evaluation with the numbers written out
    expected = math.sqrt(1.602176634e-19 * 4.0 / (6.6359e-26 * 7.07e-3**2))
    assert axial_frequency(trap()) == pytest.approx(expected, rel=1e-15)


def test_axial_frequency_scales_with_sqrt_voltage():
    assert axial_frequency(trap(ring_voltage=16.0)) == pytest.approx(
        2 * axial_frequency(trap()), rel=1e-14)


def test_non_confining_polarity():
    with pytest.raises(TrapDomainError):
        axial_frequency(trap(ring_voltage=-4.0))


def test_calcium_cyclotron_near_2p69_mhz():
    nu_c = cyclotron_frequency(trap()) / (2 * math.pi)
    assert nu_c == pytest.approx(2.69e6, rel=2e-3)
    wp, wm = radial_frequencies(trap())
    assert wp > wm > 0


def test_zero_axial_limit():
    wp, wm = radial_frequencies(trap(ring_voltage=0.0, ion_charge=Q))
    assert wp == cyclotron_frequency(trap())
    assert wm == 0.0


def test_trapping_condition_violation_reports_discriminant():
    with pytest.raises(TrapDomainError, match="omega_c\\^2 - 2 omega_z\\^2"):
        radial_frequencies(trap(ring_voltage=5e4))


@pytest.mark.parametrize("field", ["magnetic_field", "char_distance", "electrode_half_gap", "ion_mass"])
def test_config_rejects_nonpositive(field):
    with pytest.raises(TrapDomainError):
        trap(**{field: 0.0})


def test_config_rejects_zero_ions():
    with pytest.raises(TrapDomainError):
        trap(ion_count=0)


def test_quartz_gamma_from_q():
    qc = quartz()
    assert qc.gamma_q == pytest.approx(qc.omega_q / qc.quality_factor)


@given(B=st.floats(1.0, 12.0), U=st.floats(0.1, 50.0), d=st.floats(1e-3, 2e-2))
def test_radial_identities(B, U, d):
    cfg = trap(magnetic_field=B, ring_voltage=U, char_distance=d)
    wz = axial_frequency(cfg)
    wc = cyclotron_frequency(cfg)
    if wc * wc - 2 * wz * wz <= 0:
        with pytest.raises(TrapDomainError):
            radial_frequencies(cfg)
        return
    wp, wm = radial_frequencies(cfg)
    assert abs(wp + wm - wc) <= 1e-12 * wc
    assert abs(2 * wp * wm - wz * wz) <= 1e-12 * wz * wz


def test_coupling_sqrt_n_scaling_and_phase():
    cfg1, cfg4 = trap(ion_count=10), trap(ion_count=40)
    wp, wm = radial_frequencies(cfg1)
    g1 = coupling_constant(cfg1, quartz(), wp, wm)
    g4 = coupling_constant(cfg4, quartz(), wp, wm)
    for form in ("exact", "approximate"):
        assert abs(g4.select(form)) == pytest.approx(2 * abs(g1.select(form)), rel=1e-14)
        assert g1.select(form).real == 0.0
        assert g1.select(form).imag > 0


def test_coupling_inverse_in_half_gap():
    wp, wm = radial_frequencies(trap())
    g1 = coupling_constant(trap(), quartz(), wp, wm).exact
    g2 = coupling_constant(trap(electrode_half_gap=1e-2), quartz(), wp, wm).exact
    assert abs(g2) == pytest.approx(abs(g1) / 2, rel=1e-14)


def test_exact_and_approximate_forms_agree_for_small_magnetron():
    cfg = trap(ring_voltage=1.0)
    wp, wm = radial_frequencies(cfg)
    assert wm / wp < 1e-3
    g = coupling_constant(cfg, quartz(omega_q=wp), wp, wm)
    assert abs(g.exact - g.approximate) / abs(g.exact) < 1e-3


def test_coupling_needs_ordered_frequencies():
    with pytest.raises(TrapDomainError):
        coupling_constant(trap(), quartz(), 1.0, 2.0)
