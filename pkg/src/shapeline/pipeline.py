"""Manifest rows to network inputs: WAV -> CQT -> reference-relative image pairs."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .audio import read_wav
from .cqt import CqtConfig, cqt, pair_images_from_specs


def _spectrogram_job(args):
    path, cfg = args
    return cqt(read_wav(path), cfg)


@dataclass
class PairPreprocessor:
    cqt_config: CqtConfig = CqtConfig()
    height: int = 64
    width: int = 64
    jobs: int = 1
    _specs: dict = field(default_factory=dict, repr=False)

    def spectrogram(self, path):
        key = str(path)
        if key not in self._specs:
            self._specs[key] = _spectrogram_job((path, self.cqt_config))
        return self._specs[key]

    def warm(self, paths):
        todo = sorted({str(p) for p in paths} - set(self._specs))
        if self.jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(self.jobs) as pool:
                specs = pool.map(_spectrogram_job, [(p, self.cqt_config) for p in todo], chunksize=8)
                self._specs.update(zip(todo, specs))
        else:
            for p in todo:
                self.spectrogram(p)

    def pair(self, reference_path, query_path):
        return pair_images_from_specs(self.spectrogram(reference_path), self.spectrogram(query_path),
                                      self.cqt_config.floor_db, self.height, self.width)

    def __call__(self, manifest):
        rows = manifest.rows
        self.warm([manifest.resolve(r.reference_path) for r in rows]
                  + [manifest.resolve(r.clip_path) for r in rows])
        shape = (len(rows), 3, self.height, self.width)
        refs, queries = np.empty(shape, np.float32), np.empty(shape, np.float32)
        for i, r in enumerate(rows):
            refs[i], queries[i] = self.pair(manifest.resolve(r.reference_path),
                                            manifest.resolve(r.clip_path))
        return refs, queries
