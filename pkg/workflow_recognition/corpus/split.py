"""Fine-tuning / evaluation split with cross-validation folds."""

import numpy as np

from ..models import CorpusSplit


class SplitError(ValueError):
    pass


def make_split(video_ids: list[str], finetune_fraction: float, folds: int, seed: int) -> CorpusSplit:
    if folds < 1:
        raise SplitError("folds must be >= 1")
    if not 0 <= finetune_fraction < 1:
        raise SplitError("finetune_fraction must lie in [0, 1)")
    if len(video_ids) < 2 * folds:
        raise SplitError(f"Need at least {2 * folds} videos for {folds} folds, got {len(video_ids)}")

    order = np.random.default_rng(seed).permutation(len(video_ids))
    shuffled = [video_ids[i] for i in order]
    n_finetune = int(round(len(shuffled) * finetune_fraction))
    finetune, evaluation = shuffled[:n_finetune], shuffled[n_finetune:]
    if len(evaluation) < folds:
        raise SplitError(f"Evaluation subset of {len(evaluation)} videos cannot fill {folds} folds")
    return CorpusSplit(
        finetune=finetune,
        evaluation=evaluation,
        folds=[list(fold) for fold in np.array_split(np.asarray(evaluation, dtype=object), folds)],
    )


def fold_of(split: CorpusSplit, video_id: str) -> int:
    for index, fold in enumerate(split.folds):
        if video_id in fold:
            return index
    raise SplitError(f"Video '{video_id}' is not in any evaluation fold")


def summarize_split(split: CorpusSplit) -> dict:
    return {"finetune": len(split.finetune), "evaluation": len(split.evaluation), "folds": [len(f) for f in split.folds]}
