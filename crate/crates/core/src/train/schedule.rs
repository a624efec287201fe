/// Learning rate for optimizer step `step` (0-based): linear warmup over
/// `warmup_epochs`, then cosine decay to 0 over the remaining steps.
pub fn lr_at(step: usize, steps_per_epoch: usize, epochs: usize, warmup_epochs: usize, lr_max: f64) -> f64 {
    let warmup = warmup_epochs * steps_per_epoch;
    if step < warmup {
        return lr_max * (step + 1) as f64 / warmup as f64;
    }
    let remaining = (epochs * steps_per_epoch).saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / remaining as f64).min(1.0);
    (lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}
