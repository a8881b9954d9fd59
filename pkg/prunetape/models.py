import json
from typing import Any, Dict, cast

from peewee import (
    CharField,
    FloatField,
    ForeignKeyField,
    IntegerField,
    Model,
    TextField,
)

from prunetape.database import db_proxy


class BaseModel(Model):
    class Meta:
        database = db_proxy


class Run(BaseModel):
    """One training session: its name and the checksum of its initial weights."""

    name = cast(str, CharField(unique=True))
    initial_checksum = cast(str, CharField(default=""))
    created_at = cast(int, IntegerField(default=0))


class RunMetadata(BaseModel):
    """Free-form key/value facts about a run (config, data source, final scores)."""

    run = ForeignKeyField(Run, backref="metadata", on_delete="CASCADE")
    key = cast(str, CharField())
    value = cast(str, TextField())

    class Meta:
        indexes = ((("run", "key"), True),)


class MetricsRecord(BaseModel):
    """
    One MetricsRow. Scalar columns are stored as fields, the per-mask and
    per-layer columns as a JSON object in `extra`.
    """

    run = ForeignKeyField(Run, backref="records", on_delete="CASCADE")
    step = cast(int, IntegerField())
    phase = cast(str, CharField())
    lam = cast(float, FloatField())
    lr = cast(float, FloatField())
    task_loss = cast(float, FloatField())
    surrogate = cast(float, FloatField())
    exact_flops = cast(int, IntegerField())
    extra = cast(str, TextField(default="{}"))

    class Meta:
        indexes = ((("run", "step"), True),)

    def to_flat_dict(self) -> Dict[str, Any]:
        """Hydrates the CSV row (same columns as MetricsRow.as_flat_dict)."""
        row: Dict[str, Any] = {
            "step": self.step,
            "phase": self.phase,
            "lambda": self.lam,
            "lr": self.lr,
            "task_loss": self.task_loss,
            "surrogate": self.surrogate,
            "exact_flops": self.exact_flops,
        }
        row.update(json.loads(self.extra))
        return row
