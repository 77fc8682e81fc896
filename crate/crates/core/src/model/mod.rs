//! Land-use mitigation planning model: sets, parameter tensors, scenario
//! data and solutions.

mod baseline;
mod build;
pub mod io;
mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{LpError, SolveStatus};

pub use baseline::synthesize_baseline;
pub use build::{build_lp, solve_scenario, ColKey, LandKind, RowKey, ScenarioLp};
pub use report::{abatement, tech_cost, total_cost, validate, Abatement, ConstraintEntry, ConstraintReport, SectorAbatement};

pub const FULL_FM_TECHS: [&str; 7] = [
    "FM01_SetAside",
    "FM02_TSA",
    "FM03_Spruce",
    "FM04_DouglasFir",
    "FM05_Beech",
    "FM06_Oak",
    "PC_Rewetting",
];

pub const FULL_AGRI_TECHS: [&str; 6] = [
    "Agri01_AGC",
    "Agri02_CoverCrops",
    "Agri03_SoilCarbon",
    "Agri04_Biochar",
    "Agri05_Agroforestry",
    "Agri06_Hedgerows",
];

pub const FULL_REGIONS: [&str; 16] = [
    "DE1", "DE2", "DE3", "DE4", "DE5", "DE6", "DE7", "DE8", "DE9", "DEA", "DEB", "DEC", "DED", "DEE", "DEF", "DEG",
];

pub const REWETTING: &str = "PC_Rewetting";
pub const AGC: &str = "Agri01_AGC";
pub const AGROFORESTRY: &str = "Agri05_Agroforestry";

/// Year the peatland target refers to.
pub const PEAT_YEAR: i32 = 2030;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tensor {tensor}: axis {axis} has length {found}, expected {expected}")]
    Shape { tensor: Param, axis: usize, expected: usize, found: usize },
    #[error("tensor {tensor}: {found} values for shape requiring {expected}")]
    Length { tensor: Param, expected: usize, found: usize },
    #[error("tensor {tensor} is missing")]
    MissingTensor { tensor: Param },
    #[error("tensor {tensor}: invalid value {value} at flat index {index}")]
    InvalidValue { tensor: Param, index: usize, value: f64 },
    #[error("invalid sets: {0}")]
    Sets(String),
    #[error("invalid scalar {name} = {value}")]
    Scalar { name: &'static str, value: f64 },
    #[error("unknown parameter name {0:?}")]
    UnknownParam(String),
    #[error("scenario {id}: solver finished with status {status:?}")]
    NotOptimal { id: String, status: SolveStatus },
    #[error("solution shape does not match the scenario sets: {0}")]
    SolutionShape(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sector {
    Fm,
    Agri,
}

impl Sector {
    pub fn as_str(self) -> &'static str {
        match self {
            Sector::Fm => "fm",
            Sector::Agri => "agri",
        }
    }
}

impl fmt::Display for Sector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sector {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fm" => Ok(Sector::Fm),
            "agri" => Ok(Sector::Agri),
            _ => Err(ModelError::Sets(format!("unknown bank {s:?}, expected fm or agri"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetsSpec {
    pub years: Vec<i32>,
    pub regions: Vec<String>,
    pub fm_techs: Vec<String>,
    pub agri_techs: Vec<String>,
}

impl SetsSpec {
    /// 2020..=2050, 16 regions, 7 FM and 6 Agri technologies.
    pub fn full() -> Self {
        SetsSpec {
            years: (2020..=2050).collect(),
            regions: FULL_REGIONS.iter().map(|s| s.to_string()).collect(),
            fm_techs: FULL_FM_TECHS.iter().map(|s| s.to_string()).collect(),
            agri_techs: FULL_AGRI_TECHS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Small configuration used for quick runs: 4 regions, 3 FM and 2 Agri
    /// technologies, 2025..=2030.
    pub fn desk() -> Self {
        SetsSpec {
            years: (2025..=2030).collect(),
            regions: ["DE1", "DE2", "DE3", "DE4"].iter().map(|s| s.to_string()).collect(),
            fm_techs: ["FM02_TSA", "FM04_DouglasFir", REWETTING].iter().map(|s| s.to_string()).collect(),
            agri_techs: [AGC, AGROFORESTRY].iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.years.is_empty() {
            return Err(ModelError::Sets("no years".into()));
        }
        if self.years.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(ModelError::Sets("years must be strictly increasing and contiguous".into()));
        }
        if self.regions.is_empty() {
            return Err(ModelError::Sets("no regions".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.regions.iter().chain(&self.fm_techs).chain(&self.agri_techs) {
            if !seen.insert(id.as_str()) {
                return Err(ModelError::Sets(format!("duplicate identifier {id}")));
            }
        }
        Ok(())
    }

    pub fn first_year(&self) -> i32 {
        self.years[0]
    }

    pub fn last_year(&self) -> i32 {
        *self.years.last().expect("non-empty years")
    }

    /// Index of the year the peatland row applies to: 2030 when on the
    /// horizon, otherwise the last year.
    pub fn peat_year_index(&self) -> usize {
        self.year_index(PEAT_YEAR).unwrap_or(self.years.len() - 1)
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        self.years.iter().position(|&y| y == year)
    }

    pub fn techs(&self, sector: Sector) -> &[String] {
        match sector {
            Sector::Fm => &self.fm_techs,
            Sector::Agri => &self.agri_techs,
        }
    }

    pub fn axis_len(&self, axis: Axis) -> usize {
        match axis {
            Axis::Year => self.years.len(),
            Axis::FmTech => self.fm_techs.len(),
            Axis::AgriTech => self.agri_techs.len(),
            Axis::Region => self.regions.len(),
        }
    }

    pub fn axis_labels(&self, axis: Axis) -> Vec<String> {
        match axis {
            Axis::Year => self.years.iter().map(|y| y.to_string()).collect(),
            Axis::FmTech => self.fm_techs.clone(),
            Axis::AgriTech => self.agri_techs.clone(),
            Axis::Region => self.regions.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Year,
    FmTech,
    AgriTech,
    Region,
}

macro_rules! params {
    ($($variant:ident => $name:literal, [$($axis:ident),*];)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum Param {
            $($variant,)*
        }

        impl Param {
            pub const ALL: &'static [Param] = &[$(Param::$variant,)*];

            pub fn name(self) -> &'static str {
                match self {
                    $(Param::$variant => $name,)*
                }
            }

            pub fn axes(self) -> &'static [Axis] {
                match self {
                    $(Param::$variant => &[$(Axis::$axis),*],)*
                }
            }
        }
    };
}

params! {
    CostInvLevelFms => "costInvLevelFMs", [Year, FmTech, Region];
    CostMargFms => "costMargFMs", [Year, FmTech, Region];
    CostInvFms => "costInvFMs", [Year, FmTech, Region];
    GhgFms => "ghgFMs", [Year, FmTech, Region];
    FmsGrowth => "FMsgrowth", [Year, FmTech, Region];
    Cap0Fms => "cap0FMs", [FmTech, Region];
    BeechArea0 => "BeechArea0", [Region];
    GrassArea0 => "GrassArea0", [Region];
    AgriArea0 => "Agriarea0", [Region];
    Co2Price => "CO2price", [Year];
    GhgTarget => "ghgTargetLULUCF", [Year];
    CostInvLevelAgri => "costInvLevelAgri", [Year, AgriTech, Region];
    CostMargAgri => "costMargAgri", [Year, AgriTech, Region];
    CostInvAgri => "costInvAgri", [Year, AgriTech, Region];
    GhgAgri => "ghgAgri", [Year, AgriTech, Region];
    AgriGrowth => "Agrigrowth", [Year, AgriTech, Region];
    PeatExtract => "PeatExtract", [Year, Region];
}

impl Param {
    pub fn sector_params(sector: Sector) -> [Param; 4] {
        match sector {
            Sector::Fm => [Param::CostInvLevelFms, Param::CostMargFms, Param::GhgFms, Param::FmsGrowth],
            Sector::Agri => [Param::CostInvLevelAgri, Param::CostMargAgri, Param::GhgAgri, Param::AgriGrowth],
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Param {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Param::ALL.iter().copied().find(|p| p.name() == s).ok_or_else(|| ModelError::UnknownParam(s.to_string()))
    }
}

impl Serialize for Param {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Param {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Dense row-major tensor over named axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    axes: Vec<Axis>,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(axes: &[Axis], shape: &[usize]) -> Self {
        assert_eq!(axes.len(), shape.len());
        Tensor { axes: axes.to_vec(), shape: shape.to_vec(), values: vec![0.0; shape.iter().product()] }
    }

    pub fn from_values(axes: &[Axis], shape: &[usize], values: Vec<f64>) -> Self {
        assert_eq!(axes.len(), shape.len());
        Tensor { axes: axes.to_vec(), shape: shape.to_vec(), values }
    }

    /// Fills every cell from its multi-index.
    pub fn from_fn(axes: &[Axis], shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Tensor::zeros(axes, shape);
        let mut idx = vec![0usize; shape.len()];
        for flat in 0..t.values.len() {
            t.values[flat] = f(&idx);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        t
    }

    /// Zero tensor shaped for `param` under `sets`.
    pub fn for_param(param: Param, sets: &SetsSpec) -> Self {
        let shape: Vec<usize> = param.axes().iter().map(|&a| sets.axis_len(a)).collect();
        Tensor::zeros(param.axes(), &shape)
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            debug_assert!(i < n);
            acc * n + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.values[o] = v;
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioData {
    pub scenario_id: String,
    pub sets: SetsSpec,
    /// Fraction of agricultural plus grassland area open to rewetting.
    pub alpha: f64,
    /// Markup of purchased credits over the domestic CO2 price.
    pub gamma: f64,
    /// Peatland rewetting target, tCO2eq.
    pub peat_target: f64,
    pub seed: Option<u64>,
    pub params: BTreeMap<Param, Tensor>,
}

impl ScenarioData {
    pub fn param(&self, p: Param) -> &Tensor {
        self.params.get(&p).unwrap_or_else(|| panic!("tensor {p} missing; call check() first"))
    }

    pub fn param_mut(&mut self, p: Param) -> &mut Tensor {
        self.params.get_mut(&p).unwrap_or_else(|| panic!("tensor {p} missing"))
    }

    /// Checks sets, scalar ranges, tensor shapes, finiteness and signs.
    pub fn check(&self) -> Result<(), ModelError> {
        self.sets.check()?;
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ModelError::Scalar { name: "alpha", value: self.alpha });
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(ModelError::Scalar { name: "gamma", value: self.gamma });
        }
        if !(self.peat_target.is_finite() && self.peat_target >= 0.0) {
            return Err(ModelError::Scalar { name: "peat_target", value: self.peat_target });
        }
        for &p in Param::ALL {
            let t = self.params.get(&p).ok_or(ModelError::MissingTensor { tensor: p })?;
            if t.axes() != p.axes() {
                return Err(ModelError::Sets(format!("tensor {p} has axes {:?}, expected {:?}", t.axes(), p.axes())));
            }
            for (axis, (&a, &n)) in p.axes().iter().zip(t.shape()).enumerate() {
                let expected = self.sets.axis_len(a);
                if n != expected {
                    return Err(ModelError::Shape { tensor: p, axis, expected, found: n });
                }
            }
            let expected: usize = t.shape().iter().product();
            if t.values().len() != expected {
                return Err(ModelError::Length { tensor: p, expected, found: t.values().len() });
            }
            // Cost parameters may in principle be negative (subsidies); everything
            // else is a quantity, factor or price.
            let signed = matches!(
                p,
                Param::CostInvLevelFms
                    | Param::CostMargFms
                    | Param::CostInvFms
                    | Param::CostInvLevelAgri
                    | Param::CostMargAgri
                    | Param::CostInvAgri
            );
            for (index, &value) in t.values().iter().enumerate() {
                if !value.is_finite() || (!signed && value < 0.0) {
                    return Err(ModelError::InvalidValue { tensor: p, index, value });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    /// Installed area per (year, FM tech, region), ha.
    pub cap_fms: Tensor,
    /// Installed area per (year, Agri tech, region), ha.
    pub cap_agri: Tensor,
    /// Purchased allowances per year, MtCO2eq.
    pub pur_co2: Vec<f64>,
    /// Shortfall against the peatland target, tCO2eq.
    pub co2_gap_rewt: f64,
    /// Million EUR.
    pub objective: f64,
}

impl Solution {
    pub fn zeros(sets: &SetsSpec) -> Self {
        Solution {
            cap_fms: Tensor::for_param(Param::GhgFms, sets),
            cap_agri: Tensor::for_param(Param::GhgAgri, sets),
            pur_co2: vec![0.0; sets.years.len()],
            co2_gap_rewt: 0.0,
            objective: 0.0,
        }
    }

    pub fn cap(&self, sector: Sector) -> &Tensor {
        match sector {
            Sector::Fm => &self.cap_fms,
            Sector::Agri => &self.cap_agri,
        }
    }

    pub fn cap_mut(&mut self, sector: Sector) -> &mut Tensor {
        match sector {
            Sector::Fm => &mut self.cap_fms,
            Sector::Agri => &mut self.cap_agri,
        }
    }

    pub(crate) fn check_shape(&self, sets: &SetsSpec) -> Result<(), ModelError> {
        let t = sets.years.len();
        let r = sets.regions.len();
        let want_fm = [t, sets.fm_techs.len(), r];
        let want_agri = [t, sets.agri_techs.len(), r];
        if self.cap_fms.shape() != want_fm || self.cap_agri.shape() != want_agri || self.pur_co2.len() != t {
            return Err(ModelError::SolutionShape(format!(
                "cap_fms {:?} (want {want_fm:?}), cap_agri {:?} (want {want_agri:?}), pur_co2 {} (want {t})",
                self.cap_fms.shape(),
                self.cap_agri.shape(),
                self.pur_co2.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sets_shape() {
        let s = SetsSpec::full();
        s.check().unwrap();
        assert_eq!(s.years.len(), 31);
        assert_eq!(s.regions.len(), 16);
        assert_eq!(s.regions.len() * s.fm_techs.len(), 112);
        assert_eq!(s.regions.len() * s.agri_techs.len(), 96);
    }

    #[test]
    fn desk_sets_reach_peat_year() {
        let s = SetsSpec::desk();
        s.check().unwrap();
        assert_eq!(s.years[s.peat_year_index()], PEAT_YEAR);
    }

    #[test]
    fn gaps_in_years_rejected() {
        let mut s = SetsSpec::desk();
        s.years = vec![2020, 2022];
        assert!(s.check().is_err());
    }

    #[test]
    fn param_names_round_trip() {
        for &p in Param::ALL {
            assert_eq!(p.name().parse::<Param>().unwrap(), p);
        }
        assert!("nope".parse::<Param>().is_err());
    }

    #[test]
    fn tensor_from_fn_is_row_major() {
        let t = Tensor::from_fn(&[Axis::Year, Axis::Region], &[2, 3], |i| (10 * i[0] + i[1]) as f64);
        assert_eq!(t.values(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.get(&[1, 2]), 12.0);
    }
}
