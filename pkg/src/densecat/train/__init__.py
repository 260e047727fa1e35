from .augment import color_jitter, cutmix, mixup, one_hot, random_erase
from .data import DatasetError, DatasetHandle, ImageDataset, load_dataset, read_cifar_records
from .loop import (RunSummary, TrainConfig, TrainConfigError, evaluate, load_checkpoint,
                   save_checkpoint, train, write_run)
from .optim import SGD, AdamW, adamw_step, sgd_step
from .schedule import cosine_lr

__all__ = [
    "AdamW", "DatasetError", "DatasetHandle", "ImageDataset", "RunSummary", "SGD", "TrainConfig",
    "TrainConfigError", "adamw_step", "color_jitter", "cosine_lr", "cutmix", "evaluate",
    "load_checkpoint", "load_dataset", "mixup", "one_hot", "random_erase", "read_cifar_records",
    "save_checkpoint", "sgd_step", "train", "write_run",
]
