/// Constant `peak` through `warmup` steps, then `peak * sqrt(warmup / step)`.
/// Steps are 1-based.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    let warmup = warmup.max(1);
    if step <= warmup {
        peak
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    }
}
