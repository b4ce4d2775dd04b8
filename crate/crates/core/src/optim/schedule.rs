use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Half-cosine decay to zero at `total_steps`. Callers that know the run
    /// length may leave `total_steps` unset and fill it in.
    Cosine {
        #[serde(default)]
        total_steps: Option<usize>,
    },
    #[default]
    Constant,
}

impl Schedule {
    pub fn with_total_steps(self, total: usize) -> Self {
        match self {
            Schedule::Cosine { total_steps: None } => Schedule::Cosine {
                total_steps: Some(total),
            },
            other => other,
        }
    }
}

pub fn lr_at(schedule: &Schedule, base_lr: f64, step: usize) -> Result<f64> {
    match *schedule {
        Schedule::Constant => Ok(base_lr),
        Schedule::Cosine { total_steps: None } => invalid("cosine schedule without total_steps"),
        Schedule::Cosine {
            total_steps: Some(total),
        } => {
            if total == 0 || step > total {
                return invalid(format!("step {step} outside [0, {total}]"));
            }
            let frac = step as f64 / total as f64;
            Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = Schedule::Cosine {
            total_steps: Some(100),
        };
        assert_eq!(lr_at(&s, 0.1, 0).unwrap(), 0.1);
        assert!(lr_at(&s, 0.1, 100).unwrap().abs() < 1e-17);
        assert!((lr_at(&s, 0.1, 50).unwrap() - 0.05).abs() < 1e-17);
        assert!(lr_at(&s, 0.1, 101).is_err());
        assert_eq!(lr_at(&Schedule::Constant, 0.3, 12345).unwrap(), 0.3);
    }

    #[test]
    fn fill_total_only_when_missing() {
        let s = Schedule::Cosine { total_steps: None }.with_total_steps(10);
        assert_eq!(s, Schedule::Cosine { total_steps: Some(10) });
        let s = Schedule::Cosine { total_steps: Some(3) }.with_total_steps(10);
        assert_eq!(s, Schedule::Cosine { total_steps: Some(3) });
    }
}
