//! Problem instances: zones, travel data, demand, costs, crowd profiles,
//! turnover and strategic settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUNDLED: &str = include_str!("../data/grubhub18.inst");
const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("cannot parse instance: {0}")]
    Parse(String),
    #[error("invalid instance: {invariant} at {location}")]
    Validation { invariant: String, location: String },
    #[error("step {t} outside the horizon 0..={horizon}")]
    OutOfHorizon { t: usize, horizon: usize },
    #[error("cannot read instance file: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(invariant: impl Into<String>, location: impl Into<String>) -> InstanceError {
    InstanceError::Validation { invariant: invariant.into(), location: location.into() }
}

/// Total requests per hour as a function of the strategic step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DemandCurve {
    Constant {
        total: f64,
    },
    /// `total_at_horizon / growth^(T - t)`.
    Geometric {
        total_at_horizon: f64,
        growth: f64,
    },
    /// `base * (1 + amplitude * exp(-decay * (t - center)^2))`.
    Peak {
        base: f64,
        #[serde(default = "default_peak_amplitude")]
        amplitude: f64,
        #[serde(default = "default_peak_decay")]
        decay: f64,
        #[serde(default = "default_peak_center")]
        center: f64,
    },
}

fn default_peak_amplitude() -> f64 {
    0.5
}
fn default_peak_decay() -> f64 {
    0.1
}
fn default_peak_center() -> f64 {
    13.0
}

impl DemandCurve {
    pub fn total(&self, t: usize, horizon: usize) -> f64 {
        match *self {
            DemandCurve::Constant { total } => total,
            DemandCurve::Geometric { total_at_horizon, growth } => total_at_horizon / growth.powi((horizon - t.min(horizon)) as i32),
            DemandCurve::Peak { base, amplitude, decay, center } => {
                let d = t as f64 - center;
                base * (1.0 + amplitude * (-decay * d * d).exp())
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        match self {
            DemandCurve::Constant { total } => *total *= factor,
            DemandCurve::Geometric { total_at_horizon, .. } => *total_at_horizon *= factor,
            DemandCurve::Peak { base, .. } => *base *= factor,
        }
    }
}

/// How the relocation term of the fluid objective is priced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RelocationCost {
    /// `c_ij * mu_ij * n * e_ij`: per-km cost times the relocation trip rate ($/h).
    #[default]
    TravelRate,
    /// `c_ij * n * e_ij` taken literally.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub fd_per_km: f64,
    pub gw_per_km: f64,
    pub od_per_request: f64,
    pub penalty_per_request: f64,
    #[serde(default)]
    pub relocation: RelocationCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdProfile {
    /// Spatial arrival shares. Absent for GWs, whose intensity is the demand distribution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<Vec<f64>>,
    pub active_share: f64,
    /// Destination pattern. Absent for GWs, which accept any destination.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route_pattern: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnoverModel {
    pub p_fd: f64,
    pub p_gw: f64,
    pub p_od: f64,
    pub q_gw: f64,
    pub q_od: f64,
    #[serde(default)]
    pub matching_sensitive: bool,
    #[serde(default = "one")]
    pub p_high: f64,
    #[serde(default = "default_p_low")]
    pub p_low: f64,
}

fn one() -> f64 {
    1.0
}
fn default_p_low() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fleet {
    pub fd: u32,
    pub gw: u32,
    pub od: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategicConfig {
    pub horizon: usize,
    #[serde(default = "one")]
    pub gamma: f64,
    pub c_fix_per_hour: f64,
    pub ops_window_minutes: f64,
    #[serde(default = "one_u32")]
    pub k_horizons: u32,
    /// Layoffs are impossible (infinite severance).
    #[serde(default)]
    pub no_firing: bool,
    #[serde(default)]
    pub c_sev: f64,
    pub caps: Fleet,
    pub initial: Fleet,
}

fn one_u32() -> u32 {
    1
}

impl StrategicConfig {
    pub fn hours_per_ops_horizon(&self) -> f64 {
        self.ops_window_minutes / 60.0
    }

    /// FD wage per operational horizon.
    pub fn c_fix_per_horizon(&self) -> f64 {
        self.c_fix_per_hour * self.hours_per_ops_horizon()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub name: String,
    pub zones: usize,
    pub speed_kmh: f64,
    /// Rows or vectors whose sum is within this distance of 1 are renormalized on load.
    #[serde(default)]
    pub normalize_tolerance: f64,
    pub distance_km: Vec<Vec<f64>>,
    pub request_pattern: Vec<Vec<f64>>,
    pub demand_weights: Vec<f64>,
    pub demand: DemandCurve,
    pub costs: CostModel,
    pub gw: CdProfile,
    pub od: CdProfile,
    pub turnover: TurnoverModel,
    pub strategic: StrategicConfig,
}

/// Per-request cost matrices for the four delivery options.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrices {
    pub fd: Vec<Vec<f64>>,
    pub gw: Vec<Vec<f64>>,
    pub od: Vec<Vec<f64>>,
    pub penalty: Vec<Vec<f64>>,
}

impl Instance {
    /// Parses and validates an instance document.
    pub fn from_toml_str(text: &str) -> Result<Self, InstanceError> {
        let mut inst: Instance = toml::from_str(text).map_err(|e| InstanceError::Parse(e.to_string()))?;
        inst.normalize_and_validate()?;
        Ok(inst)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, InstanceError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("instance serializes to TOML")
    }

    /// Re-runs validation after programmatic edits.
    pub fn validate(&self) -> Result<(), InstanceError> {
        let mut copy = self.clone();
        copy.normalize_tolerance = 0.0;
        copy.normalize_and_validate()
    }

    fn normalize_and_validate(&mut self) -> Result<(), InstanceError> {
        let m = self.zones;
        if m == 0 {
            return Err(invalid("at least one zone", "zones"));
        }
        let tol = self.normalize_tolerance.max(0.0);
        check_matrix(&self.distance_km, m, "distance_km")?;
        for (i, row) in self.distance_km.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(invalid("distance must be positive", format!("distance_km[{i}][{j}]")));
                }
            }
        }
        if !(self.speed_kmh > 0.0 && self.speed_kmh.is_finite()) {
            return Err(invalid("speed must be positive", "speed_kmh"));
        }
        check_matrix(&self.request_pattern, m, "request_pattern")?;
        normalize_rows(&mut self.request_pattern, tol, "request_pattern")?;
        check_len(&self.demand_weights, m, "demand_weights")?;
        normalize_vector(&mut self.demand_weights, tol, "demand_weights")?;

        match self.demand {
            DemandCurve::Constant { total } => non_negative(total, "demand.total")?,
            DemandCurve::Geometric { total_at_horizon, growth } => {
                non_negative(total_at_horizon, "demand.total_at_horizon")?;
                if !(growth > 0.0 && growth.is_finite()) {
                    return Err(invalid("growth factor must be positive", "demand.growth"));
                }
            }
            DemandCurve::Peak { base, amplitude, decay, .. } => {
                non_negative(base, "demand.base")?;
                non_negative(amplitude, "demand.amplitude")?;
                non_negative(decay, "demand.decay")?;
            }
        }

        let c = &self.costs;
        for (v, name) in [
            (c.fd_per_km, "costs.fd_per_km"),
            (c.gw_per_km, "costs.gw_per_km"),
            (c.od_per_request, "costs.od_per_request"),
            (c.penalty_per_request, "costs.penalty_per_request"),
        ] {
            non_negative(v, name)?;
        }
        if c.fd_per_km >= c.gw_per_km {
            return Err(invalid("FD cost per km must be below GW cost per km", "costs.gw_per_km"));
        }
        let max_r = self.distance_km.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        if c.fd_per_km * max_r >= c.od_per_request {
            return Err(invalid("FD cost on the longest route must be below the OD payment", "costs.od_per_request"));
        }
        if c.fd_per_km * max_r >= c.penalty_per_request {
            return Err(invalid("FD cost on the longest route must be below the penalty", "costs.penalty_per_request"));
        }

        for (profile, name) in [(&mut self.gw, "gw"), (&mut self.od, "od")] {
            if !(profile.active_share > 0.0 && profile.active_share <= 1.0) {
                return Err(invalid("active share must lie in (0, 1]", format!("{name}.active_share")));
            }
            if let Some(v) = profile.intensity.as_mut() {
                check_len(v, m, &format!("{name}.intensity"))?;
                normalize_vector(v, tol, &format!("{name}.intensity"))?;
            }
            if let Some(p) = profile.route_pattern.as_mut() {
                check_matrix(p, m, &format!("{name}.route_pattern"))?;
                normalize_rows(p, tol, &format!("{name}.route_pattern"))?;
            }
        }
        if self.od.intensity.is_none() {
            return Err(invalid("OD intensity is required", "od.intensity"));
        }
        if self.od.route_pattern.is_none() {
            return Err(invalid("OD route pattern is required", "od.route_pattern"));
        }

        let tm = &self.turnover;
        for (v, name) in [
            (tm.p_fd, "turnover.p_fd"),
            (tm.p_gw, "turnover.p_gw"),
            (tm.p_od, "turnover.p_od"),
            (tm.q_gw, "turnover.q_gw"),
            (tm.q_od, "turnover.q_od"),
            (tm.p_high, "turnover.p_high"),
            (tm.p_low, "turnover.p_low"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid("probability must lie in [0, 1]", name));
            }
        }
        if tm.p_low > tm.p_high {
            return Err(invalid("p_low must not exceed p_high", "turnover.p_low"));
        }

        let s = &self.strategic;
        if s.horizon < 1 {
            return Err(invalid("horizon must be at least 1", "strategic.horizon"));
        }
        if s.k_horizons < 1 {
            return Err(invalid("k_horizons must be at least 1", "strategic.k_horizons"));
        }
        if !(s.gamma >= 0.0 && s.gamma <= 1.0) {
            return Err(invalid("gamma must lie in [0, 1]", "strategic.gamma"));
        }
        non_negative(s.c_fix_per_hour, "strategic.c_fix_per_hour")?;
        non_negative(s.c_sev, "strategic.c_sev")?;
        if !(s.ops_window_minutes > 0.0 && s.ops_window_minutes.is_finite()) {
            return Err(invalid("operational window must be positive", "strategic.ops_window_minutes"));
        }
        let (caps, init) = (s.caps, s.initial);
        if init.fd > caps.fd || init.gw > caps.gw || init.od > caps.od {
            return Err(invalid("initial fleet must respect the caps", "strategic.initial"));
        }
        Ok(())
    }

    /// Bundled 18-zone instance with the base-case parameters.
    pub fn builtin_grubhub() -> Self {
        Self::from_toml_str(BUNDLED).expect("bundled instance is valid")
    }

    /// Resolves `builtin:grubhub18` or a file path.
    pub fn resolve(spec: &str) -> Result<Self, InstanceError> {
        match spec {
            "builtin:grubhub18" => Ok(Self::builtin_grubhub()),
            other => Self::load(other),
        }
    }

    /// Travel rate `mu_ij = v / r_ij` (trips per hour).
    pub fn mu(&self, i: usize, j: usize) -> f64 {
        self.speed_kmh / self.distance_km[i][j]
    }

    pub fn demand_total(&self, t: usize) -> Result<f64, InstanceError> {
        let horizon = self.strategic.horizon;
        if t > horizon {
            return Err(InstanceError::OutOfHorizon { t, horizon });
        }
        Ok(self.demand.total(t, horizon))
    }

    /// Request arrival rates per zone at step `t` (requests per hour).
    pub fn demand_rates(&self, t: usize) -> Result<Vec<f64>, InstanceError> {
        let total = self.demand_total(t)?;
        Ok(self.demand_weights.iter().map(|w| total * w).collect())
    }

    pub fn gw_intensity(&self) -> &[f64] {
        self.gw.intensity.as_deref().unwrap_or(&self.demand_weights)
    }

    pub fn od_intensity(&self) -> &[f64] {
        self.od.intensity.as_deref().expect("validated instance has an OD intensity")
    }

    /// Destination pattern used for GW capacity; GWs mirror request destinations.
    pub fn gw_pattern(&self) -> &[Vec<f64>] {
        self.gw.route_pattern.as_deref().unwrap_or(&self.request_pattern)
    }

    pub fn od_pattern(&self) -> &[Vec<f64>] {
        self.od.route_pattern.as_deref().expect("validated instance has an OD route pattern")
    }

    /// Crowd arrival rates `n * zeta * I_i` for GWs and ODs.
    pub fn cd_arrival_rates(&self, n_gw: u32, n_od: u32) -> (Vec<f64>, Vec<f64>) {
        let g = n_gw as f64 * self.gw.active_share;
        let o = n_od as f64 * self.od.active_share;
        (self.gw_intensity().iter().map(|v| g * v).collect(), self.od_intensity().iter().map(|v| o * v).collect())
    }

    pub fn cost_matrices(&self) -> CostMatrices {
        let m = self.zones;
        let c = &self.costs;
        let by_km = |rate: f64| -> Vec<Vec<f64>> { self.distance_km.iter().map(|row| row.iter().map(|r| rate * r).collect()).collect() };
        CostMatrices {
            fd: by_km(c.fd_per_km),
            gw: by_km(c.gw_per_km),
            od: vec![vec![c.od_per_request; m]; m],
            penalty: vec![vec![c.penalty_per_request; m]; m],
        }
    }

    /// Copy with every demand level multiplied by `factor`.
    pub fn with_demand_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.demand.scale(factor);
        out
    }

    /// Single-zone instance: one route of length `r_km`, no crowd drivers by default.
    pub fn single_zone(demand: f64, r_km: f64) -> Self {
        Self {
            name: "single-zone".into(),
            zones: 1,
            speed_kmh: 19.0,
            normalize_tolerance: 0.0,
            distance_km: vec![vec![r_km]],
            request_pattern: vec![vec![1.0]],
            demand_weights: vec![1.0],
            demand: DemandCurve::Constant { total: demand },
            costs: CostModel {
                fd_per_km: 0.34,
                gw_per_km: 0.7,
                od_per_request: 5.0,
                penalty_per_request: 10.0,
                relocation: RelocationCost::TravelRate,
            },
            gw: CdProfile { intensity: None, active_share: 1.0, route_pattern: None },
            od: CdProfile { intensity: Some(vec![1.0]), active_share: 0.125, route_pattern: Some(vec![vec![1.0]]) },
            turnover: TurnoverModel {
                p_fd: 0.01,
                p_gw: 0.01,
                p_od: 0.01,
                q_gw: 0.09,
                q_od: 0.09,
                matching_sensitive: false,
                p_high: 1.0,
                p_low: 0.01,
            },
            strategic: StrategicConfig {
                horizon: 3,
                gamma: 1.0,
                c_fix_per_hour: 20.0,
                ops_window_minutes: 50.0,
                k_horizons: 1,
                no_firing: true,
                c_sev: 0.0,
                caps: Fleet { fd: 10, gw: 10, od: 10 },
                initial: Fleet { fd: 0, gw: 0, od: 0 },
            },
        }
    }
}

fn non_negative(v: f64, name: &str) -> Result<(), InstanceError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid("value must be finite and non-negative", name))
    }
}

fn check_len(v: &[f64], m: usize, name: &str) -> Result<(), InstanceError> {
    if v.len() != m {
        return Err(invalid(format!("expected {m} entries, found {}", v.len()), name));
    }
    if let Some(k) = v.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(invalid("entries must be finite and non-negative", format!("{name}[{k}]")));
    }
    Ok(())
}

fn check_matrix(mat: &[Vec<f64>], m: usize, name: &str) -> Result<(), InstanceError> {
    if mat.len() != m {
        return Err(invalid(format!("expected {m} rows, found {}", mat.len()), name));
    }
    for (i, row) in mat.iter().enumerate() {
        check_len(row, m, &format!("{name}[{i}]"))?;
    }
    Ok(())
}

fn normalize_vector(v: &mut [f64], tol: f64, name: &str) -> Result<(), InstanceError> {
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() <= STOCHASTIC_TOL {
        return Ok(());
    }
    if (sum - 1.0).abs() <= tol && sum > 0.0 {
        v.iter_mut().for_each(|x| *x /= sum);
        return Ok(());
    }
    Err(invalid(format!("entries must sum to 1 (sum is {sum})"), name))
}

fn normalize_rows(mat: &mut [Vec<f64>], tol: f64, name: &str) -> Result<(), InstanceError> {
    for (i, row) in mat.iter_mut().enumerate() {
        if row.iter().any(|&p| p > 1.0) {
            return Err(invalid("probabilities must not exceed 1", format!("{name} row {i}")));
        }
        normalize_vector(row, tol, &format!("{name} row {i}"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_instance_matches_published_values() {
        let inst = Instance::builtin_grubhub();
        assert_eq!(inst.zones, 18);
        assert_eq!(inst.request_pattern[0][0], 1.0);
        assert!(inst.request_pattern[0][1..].iter().all(|&p| p == 0.0));
        assert_eq!(inst.distance_km[0][1], 4.5);
        // Printed weights sum to 1.03; 0.15 survives renormalization at two decimals.
        assert_eq!((inst.demand_weights[12] * 100.0).round() / 100.0, 0.15);
        let s = &inst.strategic;
        assert_eq!(s.horizon, 26);
        assert!(s.no_firing);
        assert_eq!((s.initial.gw, s.initial.od), (500, 500));
        assert!((s.hours_per_ops_horizon() - 50.0 / 60.0).abs() < 1e-15);
        assert_eq!(inst.turnover.p_fd, 0.01);
        assert_eq!(inst.turnover.q_gw, 0.09);
        assert_eq!(inst.gw.active_share, 1.0);
        assert_eq!(inst.od.active_share, 0.125);
    }

    #[test]
    fn rows_are_stochastic_after_load() {
        let inst = Instance::builtin_grubhub();
        for row in inst.request_pattern.iter().chain(inst.od_pattern()) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!((inst.demand_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((inst.od_intensity().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn short_row_is_rejected_by_name() {
        let text = BUNDLED.replacen(
            "[1.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00]",
            "[0.90, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00]",
            1,
        );
        match Instance::from_toml_str(&text) {
            Err(InstanceError::Validation { location, .. }) => assert_eq!(location, "request_pattern row 0"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn cost_ordering_is_enforced() {
        let text = BUNDLED.replace("gw_per_km = 0.7", "gw_per_km = 0.3");
        match Instance::from_toml_str(&text) {
            Err(InstanceError::Validation { location, .. }) => assert_eq!(location, "costs.gw_per_km"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_document_is_a_parse_error() {
        assert!(matches!(Instance::from_toml_str("zones = ["), Err(InstanceError::Parse(_))));
    }

    #[test]
    fn demand_follows_the_growth_curve() {
        let inst = Instance::builtin_grubhub();
        let at_t = inst.demand_rates(26).unwrap().iter().sum::<f64>();
        assert!((at_t - 3000.0).abs() < 1e-6);
        let before = inst.demand_rates(25).unwrap().iter().sum::<f64>();
        assert!((before - 3000.0 / 1.006).abs() < 1e-6);
        assert!(matches!(inst.demand_rates(27), Err(InstanceError::OutOfHorizon { .. })));

        let flat = Instance::single_zone(10.0, 1.0);
        assert_eq!(flat.demand_rates(0).unwrap(), flat.demand_rates(3).unwrap());
    }

    #[test]
    fn peak_curve_tops_out_at_one_and_a_half() {
        let curve = DemandCurve::Peak { base: 150.0, amplitude: 0.5, decay: 0.1, center: 13.0 };
        assert!((curve.total(13, 26) - 225.0).abs() < 1e-12);
        assert!(curve.total(0, 26) < 151.0);
    }

    #[test]
    fn crowd_rates_scale_with_fleet() {
        let inst = Instance::builtin_grubhub();
        let (g, o) = inst.cd_arrival_rates(0, 0);
        assert!(g.iter().chain(&o).all(|&v| v == 0.0));
        let (_, o) = inst.cd_arrival_rates(0, 800);
        assert!((o.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        let (g, _) = inst.cd_arrival_rates(100, 0);
        for (gi, wi) in g.iter().zip(&inst.demand_weights) {
            assert!((gi - 100.0 * wi).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_matrix_entries() {
        let mut inst = Instance::single_zone(10.0, 1.0);
        inst.distance_km[0][0] = 1.0;
        let c = inst.cost_matrices();
        assert!((c.fd[0][0] - 0.34).abs() < 1e-15);
        assert!((c.gw[0][0] - 0.70).abs() < 1e-15);
        let c = Instance::builtin_grubhub().cost_matrices();
        assert!(c.od.iter().flatten().all(|&v| v == 5.0));
        assert!(c.penalty.iter().flatten().all(|&v| v == 10.0));
    }

    #[test]
    fn toml_round_trip() {
        let inst = Instance::builtin_grubhub();
        let back = Instance::from_toml_str(&inst.to_toml_string()).unwrap();
        assert_eq!(inst, back);
    }
}
