//! Scaling and roofline analytics over traffic reports.

use thiserror::Error;

use super::TrafficReport;

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("speedup {speedup} outside [1, {n}]")]
    SpeedupOutOfRange { speedup: f64, n: usize },
    #[error("need at least two parallel units, got {0}")]
    TooFewUnits(usize),
    #[error("report has zero read bytes")]
    ZeroReadBytes,
    #[error("report has zero cycles")]
    ZeroCycles,
}

/// Equivalent parallel fraction per Amdahl's law:
/// `f = (1 - 1/S) / (1 - 1/N)` for speedup `S` on `N` units.
pub fn amdahl_fraction(speedup: f64, n: usize) -> Result<f64, DomainError> {
    if n < 2 {
        return Err(DomainError::TooFewUnits(n));
    }
    if !(1.0..=n as f64).contains(&speedup) {
        return Err(DomainError::SpeedupOutOfRange { speedup, n });
    }
    Ok((1.0 - 1.0 / speedup) / (1.0 - 1.0 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RooflinePoint {
    /// Operational intensity: FLOPs per byte read from the shared memory.
    pub oi: f64,
    /// min(compute peak, oi * memory bandwidth), in GFLOPS.
    pub attainable_gflops: f64,
    pub achieved_gflops: f64,
    /// achieved / attainable.
    pub fraction: f64,
}

/// Places a run on the roofline. Rates are per cycle; the clock converts
/// them to GFLOPS (at 1 GHz one FLOP/cycle is one GFLOPS).
pub fn roofline_point(
    report: &TrafficReport,
    peak_flops_per_cycle: f64,
    llc_bytes_per_cycle: f64,
    clock_ghz: f64,
) -> Result<RooflinePoint, DomainError> {
    if report.llc_read_bytes == 0 {
        return Err(DomainError::ZeroReadBytes);
    }
    if report.cycles == 0 {
        return Err(DomainError::ZeroCycles);
    }
    let oi = report.flops as f64 / report.llc_read_bytes as f64;
    let attainable = peak_flops_per_cycle.min(oi * llc_bytes_per_cycle) * clock_ghz;
    let achieved = report.flops as f64 / report.cycles as f64 * clock_ghz;
    Ok(RooflinePoint {
        oi,
        attainable_gflops: attainable,
        achieved_gflops: achieved,
        fraction: achieved / attainable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amdahl_examples() {
        // Fig-style annotation: near-ideal scaling on 32 units.
        let f = amdahl_fraction(16.2, 32).unwrap();
        assert!((f - 0.9685).abs() < 0.0005, "{f}");
        assert_eq!(amdahl_fraction(32.0, 32), Ok(1.0));
        assert_eq!(amdahl_fraction(1.0, 32), Ok(0.0));
        assert!(matches!(
            amdahl_fraction(33.0, 32),
            Err(DomainError::SpeedupOutOfRange { .. })
        ));
    }

    #[test]
    fn amdahl_is_strictly_increasing_in_speedup() {
        let mut prev = 0.0;
        for s in 1..=32 {
            let f = amdahl_fraction(s as f64, 32).unwrap();
            if s > 1 {
                assert!(f > prev, "f({s}) = {f} <= f({}) = {prev}", s - 1);
            }
            prev = f;
        }
    }

    #[test]
    fn roofline_min_rule() {
        let report = TrafficReport {
            cycles: 1000,
            llc_read_bytes: 64_000,
            flops: 128_000,
            ..Default::default()
        };
        // oi = 2 FLOP/B; memory-bound at 64 B/cycle against a 512 peak.
        let p = roofline_point(&report, 512.0, 64.0, 1.0).unwrap();
        assert_eq!(p.oi, 2.0);
        assert_eq!(p.attainable_gflops, 128.0);
        assert_eq!(p.achieved_gflops, 128.0);
        assert_eq!(p.fraction, 1.0);

        // Compute-bound once oi * bandwidth exceeds the peak.
        let p = roofline_point(&report, 100.0, 64.0, 1.0).unwrap();
        assert_eq!(p.attainable_gflops, 100.0);

        let empty = TrafficReport::default();
        assert_eq!(
            roofline_point(&empty, 512.0, 64.0, 1.0),
            Err(DomainError::ZeroReadBytes)
        );
    }
}
