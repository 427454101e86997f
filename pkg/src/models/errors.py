"""Exception types raised by the codec, the surrogate and the training loops."""

from typing import Optional


class QTuneError(Exception):
    """Base class for all qtune errors."""


class ImageFormatError(QTuneError):
    """Input image is unreadable, corrupt or in an unsupported layout."""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class EntropyCodingError(QTuneError):
    """A coefficient does not fit the baseline Huffman categories."""

    def __init__(self, channel: str, block: tuple[int, int], detail: str):
        self.channel = channel
        self.block = block
        super().__init__(f"channel {channel}, block {block}: {detail}")


class JfifParseError(QTuneError):
    """The byte stream is truncated or malformed."""

    def __init__(self, offset: int, detail: str):
        self.offset = offset
        super().__init__(f"at byte offset {offset}: {detail}")


class UnsupportedFeatureError(QTuneError):
    """The stream uses a JPEG feature outside the baseline subset we write."""


class NonFiniteError(QTuneError):
    """A NaN or infinity showed up in an intermediate tensor or gradient."""

    def __init__(self, where: str, index: Optional[tuple] = None):
        self.where = where
        self.index = index
        location = f" at {index}" if index is not None else ""
        super().__init__(f"non-finite value in {where}{location}")


class DivergenceError(QTuneError):
    """Training loss became non-finite."""

    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"training diverged at step {step} (loss={value})")
