import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from voicetrack.dsp import Waveform  # noqa: E402


def tone(freq, seconds=1.0, fs=22050, amp=0.5, phase=0.0):
    t = np.arange(int(round(seconds * fs))) / fs
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), fs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
