"""Step-stamped named scalars and their JSONL/CSV emission."""

import csv
import json
from dataclasses import asdict, dataclass


@dataclass
class MetricRecord:
    step: int
    stage: int
    name: str
    value: float


class MetricLog:
    """Append-only metric stream for one run."""

    def __init__(self, records=None):
        self.records = list(records) if records else []

    def record(self, step, stage, name, value):
        self.records.append(MetricRecord(int(step), int(stage), str(name), float(value)))

    def values(self, name):
        return [r.value for r in self.records if r.name == name]

    def steps(self, name):
        return [r.step for r in self.records if r.name == name]

    def series(self, name):
        return [(r.step, r.value) for r in self.records if r.name == name]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r)) + "\n")

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "stage", "name", "value"])
            for r in self.records:
                w.writerow([r.step, r.stage, r.name, repr(r.value)])

    @classmethod
    def read_jsonl(cls, path):
        log = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    log.records.append(MetricRecord(**json.loads(line)))
        return log
