import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model
from csmae.errors import NumericError, ShapeError
from csmae.masking import make_mask_plan, patchify, plans_to_masks
from csmae.objectives import (
    LossFlags,
    cosine_similarity,
    loss_masked_reconstruction,
    loss_mde,
    loss_mim,
    loss_total,
)


# -- brute-force scalar oracles -------------------------------------------------------


def _cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def mde_oracle(c1, c2):
    return -sum(math.log(1 + math.exp(_cos(a, b))) for a, b in zip(c1, c2)) / len(c1)


def mim_oracle(c1, c2, tau, include_positive=False):
    b = len(c1)
    total = 0.0
    for i in range(b):
        pos = math.exp(_cos(c1[i], c2[i]) / tau)
        den12 = sum(math.exp(_cos(c1[i], c2[q]) / tau) for q in range(b) if include_positive or q != i)
        den21 = sum(math.exp(_cos(c1[q], c2[i]) / tau) for q in range(b) if include_positive or q != i)
        total += -math.log(pos / den12) - math.log(pos / den21)
    return total / (2 * b)


def recon_oracle(pred, target, masked):
    per = [sum((p - t) ** 2 for p, t in zip(pred[n], target[n])) / len(pred[n]) for n in masked]
    return sum(per) / len(per)


# -- reconstruction -------------------------------------------------------------------


def test_reconstruction_perfect_prediction():
    x = torch.randn(4, 3, dtype=torch.float64)
    assert loss_masked_reconstruction(x, x, [0, 2]).item() == 0.0


def test_reconstruction_worked_example():
    pred = torch.tensor([[1.0, 1.0], [0.0, 0.0], [5.0, 5.0]], dtype=torch.float64)
    target = torch.zeros(3, 2, dtype=torch.float64)
    assert loss_masked_reconstruction(pred, target, [0]).item() == 1.0
    assert loss_masked_reconstruction(pred, target, [0, 1]).item() == 0.5


def test_reconstruction_matches_oracle(rng):
    pred = rng.normal(size=(9, 7))
    target = rng.normal(size=(9, 7))
    masked = [1, 4, 5, 8]
    got = loss_masked_reconstruction(torch.tensor(pred), torch.tensor(target), masked).item()
    assert got == pytest.approx(recon_oracle(pred.tolist(), target.tolist(), masked), rel=1e-12)


def test_reconstruction_index_set_equals_bool_mask():
    pred, target = torch.randn(2, 6, 3, dtype=torch.float64).unbind(0)
    mask = torch.tensor([True, False, True, False, False, True])
    assert loss_masked_reconstruction(pred, target, mask) == loss_masked_reconstruction(pred, target, [0, 2, 5])


def test_reconstruction_gradient_zero_on_unmasked():
    pred = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
    loss_masked_reconstruction(pred, torch.zeros(6, 3, dtype=torch.float64), [1, 3]).backward()
    assert torch.all(pred.grad[[0, 2, 4, 5]] == 0)
    assert torch.all(pred.grad[[1, 3]] != 0)


def test_reconstruction_permutation_invariant():
    pred, target = torch.randn(2, 6, 3, dtype=torch.float64).unbind(0)
    perm = torch.randperm(6)
    masked = [0, 3, 4]
    inv = torch.argsort(perm)
    moved = [int(inv[i]) for i in masked]
    a = loss_masked_reconstruction(pred, target, masked)
    b = loss_masked_reconstruction(pred[perm], target[perm], moved)
    assert a.item() == pytest.approx(b.item(), rel=1e-12)


def test_reconstruction_empty_mask():
    with pytest.raises(ShapeError):
        loss_masked_reconstruction(torch.zeros(3, 2), torch.zeros(3, 2), [])


# -- cosine -------------------------------------------------------------------------


def test_cosine_examples():
    assert cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([2.0, 0.0])).item() == 1.0
    assert cosine_similarity(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0])).item() == 0.0


def test_cosine_zero_norm():
    with pytest.raises(NumericError):
        cosine_similarity(torch.zeros(3), torch.ones(3))


# -- MDE ------------------------------------------------------------------------------


def test_mde_closed_forms():
    e = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    assert loss_mde(e, e).item() == pytest.approx(-math.log(1 + math.e), abs=1e-12)
    assert loss_mde(e, torch.tensor([[0.0, 1.0]], dtype=torch.float64)).item() == pytest.approx(-math.log(2), abs=1e-12)
    assert loss_mde(e, -e).item() == pytest.approx(-math.log(1 + math.exp(-1)), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(b=st.integers(1, 6), d=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_mde_matches_oracle(b, d, seed):
    r = np.random.default_rng(seed)
    c1, c2 = r.normal(size=(b, d)), r.normal(size=(b, d))
    got = loss_mde(torch.tensor(c1), torch.tensor(c2)).item()
    assert got == pytest.approx(mde_oracle(c1.tolist(), c2.tolist()), rel=1e-10)


def test_mde_bounded():
    c = torch.randn(16, 8, dtype=torch.float64)
    v = loss_mde(c, torch.randn(16, 8, dtype=torch.float64)).item()
    assert -math.log(1 + math.e) <= v <= -math.log(1 + math.exp(-1))


# -- MIM ------------------------------------------------------------------------------


def test_mim_worked_example():
    c1 = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    # as-written: each direction -log(e^{1/tau} / e^{0}) = -1/tau
    assert loss_mim(c1, c1, tau=0.5).item() == pytest.approx(-2.0, abs=1e-12)
    want = -math.log(math.exp(2) / (math.exp(2) + 1))
    assert loss_mim(c1, c1, tau=0.5, denominator_mode="include-positive").item() == pytest.approx(want, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    b=st.integers(2, 6),
    d=st.integers(1, 5),
    tau=st.floats(0.05, 2.0),
    mode=st.sampled_from(["as-written", "include-positive"]),
    seed=st.integers(0, 2**31),
)
def test_mim_matches_oracle(b, d, tau, mode, seed):
    r = np.random.default_rng(seed)
    c1, c2 = r.normal(size=(b, d)), r.normal(size=(b, d))
    got = loss_mim(torch.tensor(c1), torch.tensor(c2), tau, mode).item()
    want = mim_oracle(c1.tolist(), c2.tolist(), tau, include_positive=mode == "include-positive")
    assert got == pytest.approx(want, rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(0.01, 100.0))
def test_similarity_losses_scale_invariant(seed, scale):
    g = torch.Generator().manual_seed(seed)
    c1 = torch.randn(5, 4, generator=g, dtype=torch.float64)
    c2 = torch.randn(5, 4, generator=g, dtype=torch.float64)
    s = torch.rand(5, 1, generator=g, dtype=torch.float64) * scale + 1e-3
    assert loss_mim(c1 * s, c2).item() == pytest.approx(loss_mim(c1, c2).item(), rel=1e-9)
    assert loss_mde(c1, c2 * s).item() == pytest.approx(loss_mde(c1, c2).item(), rel=1e-9)


def test_mim_symmetric_under_modality_swap():
    c1, c2 = torch.randn(2, 6, 4, dtype=torch.float64).unbind(0)
    assert loss_mim(c1, c2).item() == pytest.approx(loss_mim(c2, c1).item(), rel=1e-12)


def test_mim_batch_permutation_invariant():
    c1, c2 = torch.randn(2, 6, 4, dtype=torch.float64).unbind(0)
    perm = torch.randperm(6)
    assert loss_mim(c1[perm], c2[perm]).item() == pytest.approx(loss_mim(c1, c2).item(), rel=1e-12)


def test_mim_as_written_needs_two():
    c = torch.ones(1, 3)
    with pytest.raises(ShapeError):
        loss_mim(c, c)
    assert torch.isfinite(loss_mim(c, c, denominator_mode="include-positive"))


def test_mim_bad_tau():
    with pytest.raises(ValueError):
        loss_mim(torch.ones(2, 3), torch.ones(2, 3), tau=0.0)


# -- combined objective --------------------------------------------------------------


def _batch(b=4, seed=0, mode="random"):
    g = torch.Generator().manual_seed(seed)
    x1 = patchify(torch.randn(b, 12, 12, 2, generator=g, dtype=torch.float64), 4).patches
    x2 = patchify(torch.randn(b, 12, 12, 10, generator=g, dtype=torch.float64), 4).patches
    rng = np.random.default_rng(seed)
    m1, m2 = plans_to_masks([make_mask_plan(9, 4 / 9, mode, rng) for _ in range(b)])
    return x1, x2, m1, m2


@pytest.mark.parametrize(
    "flags",
    [LossFlags(True, False, False, False), LossFlags(False, True, False, False),
     LossFlags(True, True, True, False), LossFlags(True, True, False, True),
     LossFlags(False, False, True, True)],
)
def test_flags_select_terms(flags):
    model = tiny_model()
    out = loss_total(model, *_batch(), flags=flags)
    for name, on in (("umr_1", flags.umr), ("umr_2", flags.umr), ("cmr_1", flags.cmr),
                     ("cmr_2", flags.cmr), ("mde", flags.mde), ("mim", flags.mim)):
        assert (getattr(out, name) is not None) == on
    enabled = [v for v in out.terms.values() if v is not None]
    assert out.total.item() == pytest.approx(sum(v.item() for v in enabled), rel=1e-12)


def test_no_flags_rejected():
    with pytest.raises(ValueError):
        LossFlags(False, False, False, False)


def test_weights_scale_terms():
    model = tiny_model()
    batch = _batch()
    flags = LossFlags(True, False, False, False)
    base = loss_total(model, *batch, flags=flags)
    weighted = loss_total(model, *batch, flags=flags, weights={"umr_1": 2.0, "umr_2": 0.0})
    assert weighted.total.item() == pytest.approx(2 * base.umr_1.item(), rel=1e-12)


def test_cmr_uses_target_masked_positions_under_identical_plans():
    # with identical plans, cross-modal terms never see the target's masked pixels
    model = tiny_model()
    x1, x2, m1, m2 = _batch(mode="identical")
    flags = LossFlags(False, True, False, False)
    a = loss_total(model, x1, x2, m1, m2, flags=flags)
    x1b = x1.clone()
    x1b[~m1] += 3.0  # visible S1 pixels feed cmr_2 through the encoder, not cmr_1's target
    b = loss_total(model, x1b, x2, m1, m2, flags=flags)
    assert a.cmr_1.item() == pytest.approx(b.cmr_1.item(), rel=1e-12)
    assert a.cmr_2.item() != b.cmr_2.item()


def test_values_and_check_finite():
    model = tiny_model()
    x1, x2, m1, m2 = _batch()
    out = loss_total(model, x1, x2, m1, m2, flags=LossFlags(True, False, False, False))
    vals = out.values()
    assert vals["cmr_1"] is None and isinstance(vals["umr_1"], float)
    x1[0, 0, 0] = float("nan")
    bad = loss_total(model, x1, x2, m1, m2, flags=LossFlags(True, False, False, False))
    with pytest.raises(NumericError, match="umr_1"):
        bad.check_finite()
