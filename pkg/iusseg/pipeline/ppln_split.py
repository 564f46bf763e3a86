"""
Cross-validation split manifests.

Subjects are partitioned into n_folds test sets with a seeded K-fold shuffle
(test set sizes differ by at most one). Within each fold the remaining
subjects are split about 3:1 into training and validation subjects, which
with five folds approximates a 60/20/20 training/validation/test ratio of the
whole. Both steps are deterministic in the seed. The manifest records this
interpretation so that it travels with every run.
"""

import json
from dataclasses import dataclass
from typing import List, Sequence

from sklearn.model_selection import KFold, train_test_split

INTERPRETATION = ('%d test folds partition the subjects; per fold the remaining subjects are split '
                  '~3:1 into training and validation (approximating 60/20/20 overall)')


class SplitError(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Cannot split subjects: %s' % self.reason


@dataclass(frozen=True)
class Fold:
    fold_id: int
    test_subjects: List[str]
    validation_subjects: List[str]
    train_subjects: List[str]


@dataclass(frozen=True)
class SplitManifest:
    folds: List[Fold]
    seed: int
    subjects: List[str]

    def fold(self, fold_id: int) -> Fold:
        for f in self.folds:
            if f.fold_id == fold_id:
                return f
        raise SplitError('no fold %d in a manifest of %d folds' % (fold_id, len(self.folds)))

    def to_dict(self) -> dict:
        return {'seed': self.seed, 'subjects': list(self.subjects),
                'interpretation': INTERPRETATION % len(self.folds),
                'folds': [{'fold_id': f.fold_id, 'test_subjects': f.test_subjects,
                           'validation_subjects': f.validation_subjects, 'train_subjects': f.train_subjects}
                          for f in self.folds]}

    @staticmethod
    def from_dict(d: dict) -> 'SplitManifest':
        try:
            folds = [Fold(int(f['fold_id']), list(f['test_subjects']), list(f['validation_subjects']),
                          list(f['train_subjects'])) for f in d['folds']]
            return SplitManifest(folds, int(d['seed']), list(d['subjects']))
        except (KeyError, TypeError, ValueError) as e:
            raise SplitError('malformed split manifest (%s)' % e)


def validation_count(n_rest: int) -> int:
    """Validation subjects out of n_rest non-test subjects (one quarter,
    rounded, leaving at least one training subject)."""
    n_val = int(round(n_rest / 4.0))
    if n_rest - n_val < 1:
        return 0
    return n_val


def make_splits(subjects: Sequence[str], n_folds: int = 5, seed: int = 0) -> SplitManifest:
    """Split subjects into n_folds cross-validation folds.

    Raises:
        SplitError: for duplicate subjects, n_folds < 2 or fewer subjects
                    than folds
    """
    subjects = [str(s) for s in subjects]
    if len(set(subjects)) != len(subjects):
        duplicates = sorted({s for s in subjects if subjects.count(s) > 1})
        raise SplitError('duplicate subjects %s' % duplicates)
    if n_folds < 2:
        raise SplitError('n_folds must be >= 2, got %d' % n_folds)
    if len(subjects) < n_folds:
        raise SplitError('%d subjects cannot fill %d folds' % (len(subjects), n_folds))
    state = int(seed) % 2 ** 32
    kfold = KFold(n_splits=n_folds, shuffle=True, random_state=state)
    folds = []
    for fold_id, (rest_idx, test_idx) in enumerate(kfold.split(subjects)):
        test = [subjects[i] for i in test_idx]
        rest = [subjects[i] for i in rest_idx]
        n_val = validation_count(len(rest))
        if n_val > 0:
            train, validation = train_test_split(rest, test_size=n_val, shuffle=True,
                                                 random_state=(state + fold_id) % 2 ** 32)
        else:
            train, validation = rest, []
        folds.append(Fold(fold_id, test, list(validation), list(train)))
    return SplitManifest(folds, int(seed), subjects)


def save_split_manifest(manifest: SplitManifest, path: str) -> None:
    with open(path, 'w') as fw:
        json.dump(manifest.to_dict(), fw, indent=4)


def load_split_manifest(path: str) -> SplitManifest:
    try:
        with open(path, 'r') as fr:
            return SplitManifest.from_dict(json.load(fr))
    except (OSError, ValueError) as e:
        raise SplitError('cannot read %s (%s)' % (path, e))
