//! Learning-rate schedules as pure functions of the step index.

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        base_lr: f64,
    },
    /// Linear ramp 0 -> base over `warmup_steps`, then linear decay to 0 at
    /// `total_steps`.
    LinearWarmup {
        base_lr: f64,
        warmup_steps: usize,
        total_steps: usize,
    },
    /// Short linear ramp to the peak at `cut = floor(cut_frac * total)`,
    /// then a long linear decay; the floor of the schedule is `base / ratio`.
    SlantedTriangular {
        base_lr: f64,
        cut_frac: f64,
        ratio: f64,
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn base_lr(&self) -> f64 {
        match *self {
            LrSchedule::Constant { base_lr }
            | LrSchedule::LinearWarmup { base_lr, .. }
            | LrSchedule::SlantedTriangular { base_lr, .. } => base_lr,
        }
    }

    /// Fill in `total_steps` when it was left at 0 (resolved late, once the
    /// run length is known).
    pub fn with_total_steps(self, total: usize) -> Self {
        match self {
            LrSchedule::LinearWarmup {
                base_lr,
                warmup_steps,
                total_steps,
            } => LrSchedule::LinearWarmup {
                base_lr,
                warmup_steps,
                total_steps: if total_steps == 0 { total } else { total_steps },
            },
            LrSchedule::SlantedTriangular {
                base_lr,
                cut_frac,
                ratio,
                total_steps,
            } => LrSchedule::SlantedTriangular {
                base_lr,
                cut_frac,
                ratio,
                total_steps: if total_steps == 0 { total } else { total_steps },
            },
            c => c,
        }
    }

    /// Resolve a warmup fraction into concrete warmup steps.
    pub fn warmup_from_fraction(base_lr: f64, fraction: f64, total_steps: usize) -> Self {
        LrSchedule::LinearWarmup {
            base_lr,
            warmup_steps: (fraction * total_steps as f64).floor() as usize,
            total_steps,
        }
    }

    /// Step index of the schedule peak (where the rate equals `base_lr`).
    pub fn peak_step(&self) -> usize {
        match *self {
            LrSchedule::Constant { .. } => 0,
            LrSchedule::LinearWarmup { warmup_steps, .. } => warmup_steps,
            LrSchedule::SlantedTriangular {
                cut_frac,
                total_steps,
                ..
            } => ((cut_frac * total_steps as f64).floor() as usize).max(1),
        }
    }

    pub fn lr_at_step(&self, step: usize) -> Result<f64, TrainError> {
        match *self {
            LrSchedule::Constant { base_lr } => Ok(base_lr),
            LrSchedule::LinearWarmup {
                base_lr,
                warmup_steps,
                total_steps,
            } => {
                if step > total_steps {
                    return Err(TrainError::StepOutOfRange {
                        step,
                        total: total_steps,
                    });
                }
                if step < warmup_steps {
                    Ok(base_lr * step as f64 / warmup_steps as f64)
                } else if total_steps == warmup_steps {
                    Ok(base_lr)
                } else {
                    Ok(base_lr * (total_steps - step) as f64 / (total_steps - warmup_steps) as f64)
                }
            }
            LrSchedule::SlantedTriangular {
                base_lr,
                cut_frac,
                ratio,
                total_steps,
            } => {
                if step > total_steps {
                    return Err(TrainError::StepOutOfRange {
                        step,
                        total: total_steps,
                    });
                }
                let cut = ((cut_frac * total_steps as f64).floor() as usize).max(1);
                let p = if step < cut {
                    step as f64 / cut as f64
                } else {
                    1.0 - (step - cut) as f64 / (cut as f64 * (1.0 / cut_frac - 1.0))
                };
                Ok(base_lr * (1.0 + p * (ratio - 1.0)) / ratio)
            }
        }
    }
}
