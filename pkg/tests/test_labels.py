import numpy as np
import pytest
from hypothesis import given, strategies as st

from celmnav.labels import LabelSet, LabelStrategy, decode_targets, encode_targets, length_mask


def test_dataset_indices():
    assert [s.index for s in LabelStrategy] == [1, 2, 3, 4, 5]
    assert LabelStrategy.parse("W_CART") is LabelStrategy.W_CART
    assert LabelStrategy.parse("1") is LabelStrategy.DR
    with pytest.raises(ValueError):
        LabelStrategy.parse("polar")


def test_frame_groups():
    groups = {s: s.frame_group for s in LabelStrategy}
    assert len(set(groups.values())) == 3
    assert groups[LabelStrategy.AS_SPH] == groups[LabelStrategy.AS_CART] == "AS"


def test_n_out():
    assert [s.n_out for s in LabelStrategy] == [3, 4, 3, 4, 3]


def test_decode_examples():
    s = LabelStrategy.AS_SPH
    assert decode_targets([[0.0, 1.0, 5.0, 2.0]], s)[0, 0] == pytest.approx(0.0)
    assert decode_targets([[0.6, 0.8, 5.0, 2.0]], s)[0, 0] == pytest.approx(36.8699, abs=1e-4)


def test_scaled_leaves_angles():
    ls = LabelSet(LabelStrategy.W_SPH, [30.0, -10.0, 4.0], cob=[2, 2], cof=[4, 4])
    out = ls.scaled(0.5)
    assert out.values.tolist() == [30.0, -10.0, 2.0]
    assert out.cob.tolist() == [1, 1]
    assert length_mask(LabelStrategy.DR).all()


@given(az=st.floats(-179.9, 179.9), el=st.floats(-45, 45), rho=st.floats(0.1, 40),
       s=st.sampled_from([LabelStrategy.AS_SPH, LabelStrategy.W_SPH]))
def test_encode_decode_roundtrip(az, el, rho, s):
    v = np.array([[az, el, rho]])
    assert np.allclose(decode_targets(encode_targets(v, s), s), v, atol=1e-9)
