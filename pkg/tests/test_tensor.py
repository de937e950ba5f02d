import numpy as np
import pytest

from shufflefac import ops
from shufflefac.tensor import (FormatError, GradientTape, OpTimer, Tensor, backward, load_tensor,
                               save_tensor, set_op_timer, span, tensor_from_bytes, tensor_to_bytes)


def test_rank_and_extent_limits():
    Tensor(np.zeros((1, 2, 3, 4)))
    with pytest.raises(ValueError, match="rank"):
        Tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ValueError, match="extents"):
        Tensor(np.zeros((2, 0)))


def test_integer_input_is_promoted_to_float64():
    assert Tensor([1, 2, 3]).dtype == np.float64
    assert Tensor(np.ones(3, dtype=np.float32)).dtype == np.float32


def test_relu_subgradient_at_kink_example():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    with GradientTape() as tape:
        loss = ops.sum(ops.relu(x))
    (dx,) = backward(tape, loss, [x])
    np.testing.assert_array_equal(dx, [0.0, 1.0])


def test_relu_gradient_is_zero_exactly_at_zero():
    x = Tensor([0.0], requires_grad=True)
    with GradientTape() as tape:
        loss = ops.sum(ops.relu(x))
    assert tape.gradient(loss, [x])[0][0] == 0.0


def test_backward_without_records_is_rejected():
    tape = GradientTape()
    with pytest.raises(RuntimeError):
        tape.gradient(Tensor(1.0), [])


def test_non_scalar_loss_is_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradientTape() as tape:
        y = ops.relu(x)
    with pytest.raises(ValueError, match="scalar"):
        tape.gradient(y, [x])


def test_loss_from_other_tape_is_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradientTape():
        other = ops.sum(x)
    with GradientTape() as tape:
        ops.sum(ops.relu(x))
    with pytest.raises(RuntimeError):
        tape.gradient(other, [x])


def test_unreached_source_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradientTape() as tape:
        loss = ops.sum(x)
    gx, gu = tape.gradient(loss, [x, unused])
    np.testing.assert_array_equal(gx, [1, 1])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    with GradientTape() as tape:
        loss = ops.sum(ops.mul(x, x))
    assert tape.gradient(loss, [x])[0][0] == pytest.approx(6.0)


def test_nothing_recorded_without_tape_or_grad():
    with GradientTape() as tape:
        ops.relu(Tensor([1.0]))
    assert tape.records == []


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_sft1_round_trip(tmp_path, rng, dtype):
    t = Tensor(rng.standard_normal((1, 128, 24)).astype(dtype))
    save_tensor(t, tmp_path / "x.sft")
    back = load_tensor(tmp_path / "x.sft")
    assert back.dtype == dtype
    np.testing.assert_array_equal(back.data, t.data)


def test_sft1_layout():
    buf = tensor_to_bytes(Tensor(np.arange(3.0)))
    assert buf[:4] == b"SFT1"
    hlen = int.from_bytes(buf[4:8], "little")
    assert buf[8:8 + hlen] == b'{"shape": [3], "dtype": "f64"}'
    assert np.frombuffer(buf[8 + hlen:], "<f8").tolist() == [0.0, 1.0, 2.0]


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-1],
    lambda b: b[:6],
    lambda b: b[:8] + b"#" + b[9:],
])
def test_sft1_corruption_rejected(mutate):
    with pytest.raises(FormatError):
        tensor_from_bytes(mutate(tensor_to_bytes(Tensor(np.ones((2, 2))))))


def test_op_timer_attributes_exclusive_time():
    ticks = iter(range(0, 1000, 10))
    timer = OpTimer(clock=lambda: next(ticks))
    set_op_timer(timer)
    try:
        with span("outer", "other"):
            with span("inner", "core_arithmetic"):
                pass
    finally:
        set_op_timer(None)
    # outer spans 0..30, inner 10..20
    assert timer.totals == {"inner": 10, "outer": 20}
    assert timer.total_ns() == 30
