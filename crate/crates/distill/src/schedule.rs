use std::f64::consts::PI;

/// Linear warmup to `peak`, then cosine decay reaching `min` on the last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    /// Learning rate applied by the update at `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(1).saturating_sub(self.warmup);
        if span == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min + (self.peak - self.min) * 0.5 * (1.0 + (PI * progress).cos())
    }
}
