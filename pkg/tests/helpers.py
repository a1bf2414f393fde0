"""Test-side helpers: finite-difference freezing and the acceptance report."""

import numpy as np

from commbias import autodiff as ad
from commbias.autodiff import Tensor

# (criterion number, passed, detail) lines printed at the end of the session
ACCEPTANCE: list[tuple[int, bool, str]] = []


def report(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE.append((number, bool(passed), detail))
    return bool(passed)


class KinkMargin:
    """Record how close relu inputs and pooling windows come to a kink."""

    def __init__(self):
        self.margin = np.inf

    def __enter__(self):
        self._relu, self._pool = ad.relu, ad.maxpool2d

        def relu(x):
            v = ad.as_tensor(x).values
            self.margin = min(self.margin, float(np.abs(v).min()))
            return self._relu(x)

        def pool(x):
            v = ad.as_tensor(x).values
            n, h, w, c = v.shape
            win = v[:, :h // 2 * 2, :w // 2 * 2].reshape(n, h // 2, 2, w // 2, 2, c)
            win = np.sort(win.transpose(0, 1, 3, 5, 2, 4).reshape(-1, 4), axis=1)
            self.margin = min(self.margin, float((win[:, -1] - win[:, -2]).min()))
            return self._pool(x)

        ad.relu, ad.maxpool2d = relu, pool
        return self

    def __exit__(self, *exc):
        ad.relu, ad.maxpool2d = self._relu, self._pool


class FrozenKinks:
    """Pin relu masks, abs signs and pooling winners to those seen on a recording call.

    Inside the context the network is the smooth function of its active linear
    piece, which is what a finite-difference check should see; with thousands
    of conv units a kink-free evaluation point is impractical to find.
    """

    def __enter__(self):
        self._relu, self._pool, self._abs = ad.relu, ad.maxpool2d, ad.abs
        self.masks, self.calls, self.recording = [], 0, False

        def absolute(x):
            x = ad.as_tensor(x)
            if self.recording:
                self.masks.append(np.where(x.values >= 0, 1.0, -1.0).astype(x.dtype))
            sign = self.masks[self.calls % len(self.masks)]
            self.calls += 1
            return ad.multiply(x, sign)

        def relu(x):
            x = ad.as_tensor(x)
            if self.recording:
                self.masks.append((x.values > 0).astype(x.dtype))
            mask = self.masks[self.calls % len(self.masks)]
            self.calls += 1
            return ad.multiply(x, mask)

        def pool(x):
            x = ad.as_tensor(x)
            if self.recording:
                v = x.values
                n, h, w, c = v.shape
                win = v.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
                arg = win.reshape(n, h // 2, w // 2, c, 4).argmax(-1)
                bonus = np.zeros((n, h // 2, w // 2, c, 4))
                np.put_along_axis(bonus, arg[..., None], 1e3, axis=-1)
                bonus = bonus.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
                self.masks.append(bonus.reshape(n, h, w, c))
            bonus = self.masks[self.calls % len(self.masks)]
            self.calls += 1
            return ad.subtract(self._pool(ad.add(x, bonus)), 1e3)

        ad.relu, ad.maxpool2d, ad.abs = relu, pool, absolute
        return self

    def record(self, fn, x):
        self.recording = True
        fn(Tensor(x))
        self.recording = False
        self.calls = 0

    def __exit__(self, *exc):
        ad.relu, ad.maxpool2d, ad.abs = self._relu, self._pool, self._abs


def smooth_enough(fn, x, h=1e-3, factor=2):
    """True when perturbations of size h cannot cross a relu/maxpool kink."""
    with KinkMargin() as km:
        fn(Tensor(x))
    return km.margin > factor * h


class FrozenStops:
    """Replace stop-gradient outputs by the values seen on a recording call.

    Finite differences perturb every path, including branches whose gradient
    is deliberately blocked; freezing those branches at the base point gives
    the reference the analytic gradient should match.
    """

    def __enter__(self):
        self._stop = ad.stop_gradient
        self.values, self.calls, self.recording = [], 0, False

        def stop(x):
            x = ad.as_tensor(x)
            if self.recording:
                self.values.append(x.values.copy())
            v = self.values[self.calls % len(self.values)]
            self.calls += 1
            return Tensor(v)

        ad.stop_gradient = stop
        return self

    def record(self, fn, x):
        self.recording = True
        fn(Tensor(x))
        self.recording = False
        self.calls = 0

    def __exit__(self, *exc):
        ad.stop_gradient = self._stop


class Frozen:
    """FrozenStops and FrozenKinks together, recorded from one call."""

    def __enter__(self):
        self.stops, self.kinks = FrozenStops(), FrozenKinks()
        self.stops.__enter__()
        self.kinks.__enter__()
        return self

    def record(self, fn, x):
        self.stops.recording = self.kinks.recording = True
        fn(Tensor(x))
        self.stops.recording = self.kinks.recording = False
        self.stops.calls = self.kinks.calls = 0

    def __exit__(self, *exc):
        self.kinks.__exit__(*exc)
        self.stops.__exit__(*exc)
