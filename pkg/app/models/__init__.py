from app.models.run_record import RunRecord
from app.models.sweep_run import SweepRun

__all__ = ["RunRecord", "SweepRun"]
