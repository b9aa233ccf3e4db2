"""End-to-end check of the Python bindings: train, verify, tamper."""

import vft


def main():
    assert vft.quantize(1.0) == 16384
    assert vft.quantize(-0.5) == -8192
    assert abs(vft.dequantize(vft.quantize(0.1234)) - 0.1234) <= 2.0**-15
    try:
        vft.quantize(1e9)
    except vft.VftError as e:
        assert "overflow" in str(e)
    else:
        raise AssertionError("out-of-range value quantized")

    p = vft.detection_probability(0.10, 200 * 25, 25, 2)
    assert p > 0.99, p

    run = vft.TinyRun()
    assert run.steps == 16
    c_d, h_0, h_pi = run.publics
    assert all(len(h) == 64 for h in (c_d, h_0, h_pi))
    assert vft.TinyRun().head == run.head, "runs are not reproducible"

    assert run.verify() == list(range(16))
    spot = run.verify(coverage=0.25, seed=1)
    assert len(spot) == 4 and spot == sorted(set(spot))

    private = vft.TinyRun(private=True)
    assert private.verify() == list(range(16))

    run.verify_step(5)
    run.tamper_lr(5)
    try:
        run.verify_step(5)
    except vft.VftError as e:
        assert str(e).startswith("ConstraintViolation"), e
    else:
        raise AssertionError("tampered learning rate accepted")
    # The rewritten link no longer feeds step 6.
    try:
        run.verify()
    except vft.VftError as e:
        assert "step 6" in str(e), e
    else:
        raise AssertionError("tampered run accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
