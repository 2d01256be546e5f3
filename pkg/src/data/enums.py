from enum import Enum


class LayerKind(Enum):
    CONV1D = "conv1d"
    TCONV1D = "tconv1d"
    DENSE = "dense"
    LAYER_NORM = "layer_norm"
    LEAKY_RELU = "leaky_relu"
    ATTENTION_POOL = "attention_pool"
    GLOBAL_AVG_POOL = "global_avg_pool"
    FLATTEN = "flatten"
    UNFLATTEN = "unflatten"
    SOFTMAX = "softmax"

    @property
    def has_params(self) -> bool:
        return self in _PARAM_KINDS


_PARAM_KINDS = frozenset(
    {
        LayerKind.CONV1D,
        LayerKind.TCONV1D,
        LayerKind.DENSE,
        LayerKind.LAYER_NORM,
        LayerKind.ATTENTION_POOL,
    }
)


class SplitRole(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    CALIB = "calib"
    CALIB_VAL = "calib_val"
    ADAPT_TEST = "adapt_test"
    UNUSED = "unused"


class FreezePolicy(Enum):
    FINAL_DENSE_ONLY = "final_dense_only"
    FULL_HEAD = "full_head"
    NEW_OUTPUT_ONLY = "new_output_only"


class StopReason(Enum):
    EARLY_STOP = "early_stop"
    MAX_EPOCHS = "max_epochs"
    NO_EPOCHS = "no_epochs"


class MovementClass(Enum):
    """Movement labels in the fixed table row order."""

    HAND_CLOSE = 0
    THUMB = 1
    INDEX = 2
    MIDDLE = 3
    RING = 4
    LITTLE = 5
    THUMB_INDEX = 6
    THUMB_MIDDLE = 7
    THUMB_RING = 8
    THUMB_LITTLE = 9

    @property
    def id(self) -> int:
        return self.value

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    @classmethod
    def labels(cls, num_classes: int) -> list[str]:
        if not 2 <= num_classes <= len(cls):
            raise ValueError(f"num_classes must be between 2 and {len(cls)}")
        return [member.label for member in list(cls)[:num_classes]]
