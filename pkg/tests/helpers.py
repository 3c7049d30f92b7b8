"""
Shared helpers for the test scripts: import path, exception checks,
small model factories and the __main__ runner.
"""

import os
import sys
import traceback

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np  # noqa: E402

import tensor_core as tc  # noqa: E402


def expect_raises(exc_type, fn, *args, **kwargs):
    """Call fn and return the exception it raises; fail when it does not raise exc_type"""
    try:
        fn(*args, **kwargs)
    except exc_type as e:
        return e
    raise AssertionError(f"expected {exc_type.__name__} from {getattr(fn, '__name__', fn)}")


def param(shape, rng, scale=1.0, name=None):
    """float64 trainable tensor for gradient checks"""
    return tc.Tensor(rng.normal(shape, scale), requires_grad=True, name=name, dtype=np.float64)


def unit_rows(shape, rng):
    values = rng.normal(shape)
    return values / np.linalg.norm(values, axis=-1, keepdims=True)


def run_tests(title, tests):
    """Run test functions in order and print a summary; returns the process exit code"""
    print(title)
    print("=" * 60)
    failed = []
    for test in tests:
        try:
            test()
        except Exception:
            failed.append(test.__name__)
            print(f"❌ {test.__name__} failed")
            traceback.print_exc()

    print("\n" + "=" * 60)
    print("📝 Test Summary:")
    for test in tests:
        mark = "❌" if test.__name__ in failed else "✅"
        print(f"  {mark} {test.__name__}")
    if failed:
        print(f"\n❌ {len(failed)} of {len(tests)} tests failed")
        return 1
    print(f"\n🎉 All {len(tests)} tests passed!")
    return 0
