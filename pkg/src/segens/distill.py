"""Teacher-to-student knowledge transfer on unlabeled images.

The student is a single compact network trained to match the teacher's
per-pixel class probabilities with a binary cross-entropy applied per class
channel; the teacher is evaluated once up front and never receives
gradients.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .nets import ModelSpec, Network, build
from .ensemble import Teacher, TeacherPrediction, _one_hot
from .train import TrainConfig, fit, predict_batched
from .tensor import bce_loss, softmax_channels


@dataclass
class DistillConfig:
    student_spec: ModelSpec
    soft_targets: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)


def pseudo_label(teacher: Teacher, batch: np.ndarray, soft: bool = True) -> TeacherPrediction:
    """Teacher predictions for a batch; hard mode one-hots the class map."""
    pred = teacher.predict(batch)
    if not soft:
        return TeacherPrediction(_one_hot(pred.class_map, teacher.k), pred.class_map)
    return pred


def _student_class_map(student: Network, images: np.ndarray) -> np.ndarray:
    out = predict_batched(student, images)
    if student.spec.out_channels == 1:
        return (out[:, 0] >= 0.5).astype(np.int64)
    return out.argmax(axis=1)


def agreement(student: Network, teacher: Teacher, images: np.ndarray) -> float:
    """Fraction of pixels where student and teacher argmax classes coincide."""
    s = _student_class_map(student, images)
    t = teacher.predict(images).class_map
    return float((s == t).mean())


def distill_student(teacher: Teacher, images: np.ndarray, config: DistillConfig,
                    init_from: Network = None, holdout: np.ndarray = None):
    """Train a student against teacher pseudo-labels.

    Returns (student, history); history rows carry epoch, distill_loss,
    agreement (on the holdout when given, else the training images) and
    wall-clock seconds. Zero epochs returns the student untouched.
    """
    spec = config.student_spec
    if init_from is not None:
        if init_from.spec.arch != spec.arch or init_from.spec.out_channels != spec.out_channels:
            raise ValueError("init_from network does not match the student spec")
        student = init_from
    else:
        student = build(spec)
    if spec.out_channels not in (1, teacher.k):
        raise ValueError(f"student out_channels {spec.out_channels} must be 1 or match "
                         f"the teacher's {teacher.k} classes")
    if spec.out_channels == 1 and teacher.k != 2:
        raise ValueError("binary students need a 2-class teacher")

    # fixed pseudo-labels: the teacher never moves during distillation
    targets_full = pseudo_label(teacher, images, soft=config.soft_targets).class_probs
    if spec.out_channels == 1:
        targets = targets_full[:, 1:2]
    else:
        targets = targets_full

    eval_images = holdout if holdout is not None else images

    def make_loss(net, xb, yb):
        out = net.forward(xb)
        if spec.out_channels > 1:
            out = softmax_channels(out)
        return bce_loss(yb, out)

    t0 = time.perf_counter()

    def on_epoch(net, epoch):
        return {"agreement": agreement(net, teacher, eval_images),
                "seconds": time.perf_counter() - t0}

    history = fit(student, images, targets, make_loss, config.train, on_epoch=on_epoch)
    return student, history
