from typing import Dict, Optional

from pydantic import BaseModel, Field, field_validator


class HorizonReport(BaseModel):
    """Position RMSE (meters) at whole-second horizons, keyed "1s".."5s"."""
    rmse: Dict[str, float]
    sample_count: int = Field(ge=0)
    samples_per_scene: int = Field(default=1, ge=1)
    seed: int = 0
    variant: str = "full"
    best_of: bool = False
    maneuver: Optional[str] = None
    config_hash: Optional[str] = None

    @field_validator("rmse")
    @classmethod
    def _non_negative(cls, v):
        bad = {k: x for k, x in v.items() if not x >= 0.0}
        if bad:
            raise ValueError(f"rmse must be non-negative, got {bad}")
        return v

    def to_text(self) -> str:
        """Flat key=value block, one entry per line."""
        lines = [f"rmse_{k}={v:.6f}" for k, v in self.rmse.items()]
        for key in ("sample_count", "samples_per_scene", "seed", "variant", "best_of", "maneuver", "config_hash"):
            value = getattr(self, key)
            if value is not None:
                lines.append(f"{key}={value}")
        return "\n".join(lines)
