import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tempofuse.audio_io import AudioClip
from tempofuse.data import SynthClass, synth_song

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SR = 22050


def click_track(bpm: float, duration: float = 30.0, seed=0, jitter: float = 0.0,
                timbre: str = "click") -> AudioClip:
    return synth_song(SynthClass(f"bpm{bpm:g}", bpm, timbre, jitter), duration, SR, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tone():
    def make(freq: float, duration: float = 1.0, sr: int = SR, amp: float = 0.5) -> AudioClip:
        t = np.arange(int(round(duration * sr))) / sr
        return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)
    return make
