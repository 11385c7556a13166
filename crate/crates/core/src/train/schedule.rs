use std::f64::consts::PI;

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to 0
/// at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * (1.0 + (PI * progress).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values() {
        assert_eq!(lr_schedule(0, 100, 10, 1e-3), 0.0);
        assert_eq!(lr_schedule(10, 100, 10, 1e-3), 1e-3);
        assert!((lr_schedule(55, 100, 10, 1e-3) - 5e-4).abs() < 1e-15);
        assert!(lr_schedule(100, 100, 10, 1e-3).abs() < 1e-18);
        assert_eq!(lr_schedule(5, 100, 10, 1e-3), 5e-4);
        assert_eq!(lr_schedule(0, 0, 0, 1.0), 1.0);
    }
}
