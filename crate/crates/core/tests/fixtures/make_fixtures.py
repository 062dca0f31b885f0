"""Regenerates the WAV fixtures with Python's standard `wave` module."""
import struct
import wave
from pathlib import Path

here = Path(__file__).parent


def write(name, channels, width, frames):
    with wave.open(str(here / name), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(22050)
        w.writeframes(frames)


# Left ramps 0, 1000, ..., 7000; right holds -7.
write("stereo_pcm16.wav", 2, 2, b"".join(struct.pack("<hh", 1000 * i, -7) for i in range(8)))
write("mono_pcm8.wav", 1, 1, bytes([128] * 16))
write("three_channel.wav", 3, 2, b"".join(struct.pack("<hhh", 1, 2, 3) for _ in range(4)))
