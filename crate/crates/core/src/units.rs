//! Power unit conversions. All interference arithmetic happens in milliwatts.

#[inline]
pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

#[inline]
pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

#[inline]
pub fn watts_to_dbm(w: f64) -> f64 {
    mw_to_dbm(w * 1e3)
}

#[inline]
pub fn dbm_to_watts(dbm: f64) -> f64 {
    dbm_to_mw(dbm) * 1e-3
}

/// Mean of dBm samples taken in the linear domain.
pub fn linear_mean_dbm<I: IntoIterator<Item = f64>>(samples: I) -> Option<f64> {
    let (sum, n) = samples.into_iter().fold((0.0, 0usize), |(s, n), x| (s + dbm_to_mw(x), n + 1));
    (n > 0).then(|| mw_to_dbm(sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_power_presets() {
        assert!((watts_to_dbm(0.200888) - 23.0295).abs() < 1e-4);
        assert!((watts_to_dbm(0.010072) - 10.0311).abs() < 1e-4);
    }

    #[test]
    fn linear_mean_is_max_dominated() {
        let m = linear_mean_dbm([-70.0, -72.0, -74.0]).unwrap();
        assert!((m - -71.698).abs() < 1e-3, "{m}");
        assert!(linear_mean_dbm(std::iter::empty()).is_none());
    }
}
