//! Post-hoc quantities computed directly from parameters and a solution,
//! independent of the LP encoding.

use serde::{Deserialize, Serialize};

use super::build::LandKind;
use super::{ModelError, Param, ScenarioData, Sector, Solution, Tensor, REWETTING};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorAbatement {
    /// tCO2eq per (year, tech, region).
    pub cells: Tensor,
    /// tCO2eq per year.
    pub annual: Vec<f64>,
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abatement {
    pub fm: SectorAbatement,
    pub agri: SectorAbatement,
}

impl Abatement {
    pub fn sector(&self, s: Sector) -> &SectorAbatement {
        match s {
            Sector::Fm => &self.fm,
            Sector::Agri => &self.agri,
        }
    }
}

fn sector_abatement(data: &ScenarioData, sol: &Solution, sector: Sector) -> SectorAbatement {
    let ghg = data.param(Param::sector_params(sector)[2]);
    let cap = sol.cap(sector);
    let values: Vec<f64> = ghg.values().iter().zip(cap.values()).map(|(g, c)| g * c).collect();
    let cells = Tensor::from_values(cap.axes(), cap.shape(), values);
    let per_year = cap.shape()[1] * cap.shape()[2];
    let annual: Vec<f64> = cells.values().chunks(per_year).map(|c| c.iter().sum()).collect();
    let cumulative = annual.iter().sum();
    SectorAbatement { cells, annual, cumulative }
}

pub fn abatement(data: &ScenarioData, sol: &Solution) -> Result<Abatement, ModelError> {
    sol.check_shape(&data.sets)?;
    Ok(Abatement { fm: sector_abatement(data, sol, Sector::Fm), agri: sector_abatement(data, sol, Sector::Agri) })
}

/// Annual technology cost `(costInvLevel + costMarg)·cap` per cell, EUR.
pub fn tech_cost(data: &ScenarioData, sol: &Solution, sector: Sector) -> Result<Tensor, ModelError> {
    sol.check_shape(&data.sets)?;
    let [inv_level, marg, _, _] = Param::sector_params(sector).map(|p| data.param(p).values());
    let cap = sol.cap(sector);
    let values = cap.values().iter().enumerate().map(|(o, c)| (inv_level[o] + marg[o]) * c).collect();
    Ok(Tensor::from_values(cap.axes(), cap.shape(), values))
}

/// Total system cost, million EUR.
pub fn total_cost(data: &ScenarioData, sol: &Solution) -> Result<f64, ModelError> {
    let price = data.param(Param::Co2Price).values();
    let mut total = 0.0;
    for sector in [Sector::Fm, Sector::Agri] {
        total += tech_cost(data, sol, sector)?.sum() / 1e6;
    }
    for (p, q) in price.iter().zip(&sol.pur_co2) {
        total += data.gamma * p * q;
    }
    total += data.gamma * price[data.sets.peat_year_index()] * sol.co2_gap_rewt / 1e6;
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEntry {
    pub family: String,
    pub index: Vec<String>,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub entries: Vec<ConstraintEntry>,
    pub max_violation: f64,
}

impl ConstraintReport {
    pub fn family(&self, name: &str) -> impl Iterator<Item = &ConstraintEntry> {
        let name = name.to_string();
        self.entries.iter().filter(move |e| e.family == name)
    }

    pub fn all_satisfied(&self) -> bool {
        self.entries.iter().all(|e| e.satisfied)
    }
}

/// Evaluates every constraint family as `lhs ≥ rhs` or `lhs ≤ rhs` and
/// reports the slack in the feasible direction.
pub fn validate(data: &ScenarioData, sol: &Solution, tol: f64) -> Result<ConstraintReport, ModelError> {
    sol.check_shape(&data.sets)?;
    let sets = &data.sets;
    let years = &sets.years;
    let ny = years.len();
    let nr = sets.regions.len();
    let abate = abatement(data, sol)?;
    let mut entries = Vec::new();
    let mut add = |family: &str, index: Vec<String>, lhs: f64, rhs: f64, at_least: bool| {
        let slack = if at_least { lhs - rhs } else { rhs - lhs };
        entries.push(ConstraintEntry { family: family.to_string(), index, lhs, rhs, slack, satisfied: slack >= -tol });
    };

    let target = data.param(Param::GhgTarget).values();
    for t in 0..ny {
        let lhs = abate.fm.annual[t] / 1e6 + abate.agri.annual[t] / 1e6 + sol.pur_co2[t];
        add("ghg_target", vec![years[t].to_string()], lhs, target[t], true);
    }

    let peat_t = sets.peat_year_index();
    let mut rewetted = 0.0;
    if let Some(k) = sets.fm_techs.iter().position(|f| f == REWETTING) {
        for r in 0..nr {
            rewetted += abate.fm.cells.get(&[peat_t, k, r]);
        }
    }
    add("peatland", vec![years[peat_t].to_string()], rewetted + sol.co2_gap_rewt, data.peat_target, true);

    for kind in LandKind::ALL {
        let sector = kind.sector();
        let techs = sets.techs(sector);
        if !techs.iter().any(|k| kind.covers(k)) {
            continue;
        }
        let cap = sol.cap(sector);
        for r in 0..nr {
            let lhs: f64 = (0..techs.len()).filter(|&k| kind.covers(&techs[k])).map(|k| cap.get(&[ny - 1, k, r])).sum();
            add(kind.name(), vec![sets.regions[r].clone()], lhs, kind.limit(data, r), false);
        }
    }

    for sector in [Sector::Fm, Sector::Agri] {
        let growth = data.param(Param::sector_params(sector)[3]);
        let cap = sol.cap(sector);
        let techs = sets.techs(sector);
        let family = format!("growth_{sector}");
        for t in 1..ny {
            for (k, tech) in techs.iter().enumerate() {
                for r in 0..nr {
                    let lhs = cap.get(&[t, k, r]) - cap.get(&[t - 1, k, r]);
                    let idx = vec![years[t].to_string(), tech.clone(), sets.regions[r].clone()];
                    add(&family, idx, lhs, growth.get(&[t - 1, k, r]), false);
                }
            }
        }
        let family = format!("anchor_{sector}");
        for (k, tech) in techs.iter().enumerate() {
            for r in 0..nr {
                let v = cap.get(&[0, k, r]);
                let idx = vec![years[0].to_string(), tech.clone(), sets.regions[r].clone()];
                add(&family, idx.clone(), v, 0.0, true);
                add(&family, idx, v, 0.0, false);
            }
        }
    }

    let mins = [
        ("nonneg_cap_fm", sol.cap_fms.values().iter().copied().fold(f64::INFINITY, f64::min)),
        ("nonneg_cap_agri", sol.cap_agri.values().iter().copied().fold(f64::INFINITY, f64::min)),
        ("nonneg_pur_co2", sol.pur_co2.iter().copied().fold(f64::INFINITY, f64::min)),
        ("nonneg_gap", sol.co2_gap_rewt),
    ];
    for (family, v) in mins {
        if v.is_finite() {
            add(family, Vec::new(), v, 0.0, true);
        }
    }

    let max_violation = entries.iter().map(|e| (-e.slack).max(0.0)).fold(0.0, f64::max);
    Ok(ConstraintReport { entries, max_violation })
}
