//! Assembly of the planning LP in `Ax ≥ b` form.

use serde::{Deserialize, Serialize};

use super::{ModelError, Param, ScenarioData, Sector, SetsSpec, Solution, AGC, AGROFORESTRY, REWETTING};
use crate::lp::{self, CsrMatrix, KeyIndex, SolveStatus, SolverOptions, StandardFormLp};

const MEGA: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColKey {
    Cap { sector: Sector, t: usize, k: usize, r: usize },
    PurCo2 { t: usize },
    GapRewt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LandKind {
    SetAside,
    Plantation,
    Rewetting,
    Agc,
    Agroforestry,
}

impl LandKind {
    pub const ALL: [LandKind; 5] =
        [LandKind::SetAside, LandKind::Plantation, LandKind::Rewetting, LandKind::Agc, LandKind::Agroforestry];

    pub fn sector(self) -> Sector {
        match self {
            LandKind::Agc | LandKind::Agroforestry => Sector::Agri,
            _ => Sector::Fm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LandKind::SetAside => "land_setaside",
            LandKind::Plantation => "land_plantation",
            LandKind::Rewetting => "land_rewetting",
            LandKind::Agc => "land_agc",
            LandKind::Agroforestry => "land_agroforestry",
        }
    }

    /// Whether technology `tech` of this kind's sector counts toward the row.
    pub fn covers(self, tech: &str) -> bool {
        match self {
            LandKind::SetAside => matches!(tech, "FM01_SetAside" | "FM02_TSA"),
            LandKind::Plantation => {
                matches!(tech, "FM03_Spruce" | "FM04_DouglasFir" | "FM05_Beech" | "FM06_Oak")
            }
            LandKind::Rewetting => tech == REWETTING,
            LandKind::Agc => tech == AGC,
            LandKind::Agroforestry => tech == AGROFORESTRY,
        }
    }

    /// Area available to the row in region `r`, ha.
    pub fn limit(self, data: &ScenarioData, r: usize) -> f64 {
        let beech = data.param(Param::BeechArea0).values()[r];
        let grass = data.param(Param::GrassArea0).values()[r];
        let agri = data.param(Param::AgriArea0).values()[r];
        match self {
            LandKind::SetAside => beech,
            LandKind::Plantation => 0.1 * grass,
            LandKind::Rewetting => data.alpha * (agri + grass),
            LandKind::Agc => 0.1 * agri,
            LandKind::Agroforestry => 0.1 * grass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKey {
    GhgTarget { t: usize },
    Peat,
    Land { kind: LandKind, r: usize },
    Growth { sector: Sector, t: usize, k: usize, r: usize },
    /// `upper` is the `−cap ≥ 0` half of the pair.
    Anchor { sector: Sector, k: usize, r: usize, upper: bool },
}

/// The assembled LP together with the scenario dimensions needed to map
/// columns back to model quantities.
#[derive(Debug, Clone)]
pub struct ScenarioLp {
    pub lp: StandardFormLp<ColKey, RowKey>,
    n_years: usize,
    n_fm: usize,
    n_agri: usize,
    n_regions: usize,
}

impl ScenarioLp {
    pub fn col(&self, key: ColKey) -> Option<usize> {
        self.lp.col_index.get(&key)
    }

    pub fn row(&self, key: RowKey) -> Option<usize> {
        self.lp.row_index.get(&key)
    }

    fn n_cap(&self, sector: Sector) -> usize {
        let k = match sector {
            Sector::Fm => self.n_fm,
            Sector::Agri => self.n_agri,
        };
        self.n_years * k * self.n_regions
    }

    /// Column vector for a model solution.
    pub fn x_from_solution(&self, sol: &Solution) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.lp.n_vars());
        x.extend_from_slice(sol.cap_fms.values());
        x.extend_from_slice(sol.cap_agri.values());
        x.extend_from_slice(&sol.pur_co2);
        x.push(sol.co2_gap_rewt);
        x
    }

    /// Model solution for a column vector; tiny negative round-off is clamped.
    pub fn solution_from_x(&self, sets: &SetsSpec, x: &[f64]) -> Solution {
        let mut sol = Solution::zeros(sets);
        let clamp = |v: f64| if v < 0.0 { 0.0 } else { v };
        let nf = self.n_cap(Sector::Fm);
        let na = self.n_cap(Sector::Agri);
        for (dst, &v) in sol.cap_fms.values_mut().iter_mut().zip(&x[..nf]) {
            *dst = clamp(v);
        }
        for (dst, &v) in sol.cap_agri.values_mut().iter_mut().zip(&x[nf..nf + na]) {
            *dst = clamp(v);
        }
        for (dst, &v) in sol.pur_co2.iter_mut().zip(&x[nf + na..nf + na + self.n_years]) {
            *dst = clamp(v);
        }
        sol.co2_gap_rewt = clamp(x[nf + na + self.n_years]);
        sol.objective = self.lp.objective_at(&self.x_from_solution(&sol));
        sol
    }
}

/// Builds `min cᵀx, Ax ≥ b, x ≥ 0` over cap (FM then Agri, year-major),
/// purchased allowances and the peatland gap.
pub fn build_lp(data: &ScenarioData) -> Result<ScenarioLp, ModelError> {
    data.check()?;
    let sets = &data.sets;
    let ny = sets.years.len();
    let nr = sets.regions.len();
    let nk = |s: Sector| sets.techs(s).len();
    let price = data.param(Param::Co2Price).values();
    let target = data.param(Param::GhgTarget).values();
    let peat_t = sets.peat_year_index();
    let last_t = ny - 1;

    let mut cols = Vec::new();
    let mut c = Vec::new();
    for sector in [Sector::Fm, Sector::Agri] {
        let [inv_level, marg, _, _] = Param::sector_params(sector).map(|p| data.param(p).values());
        for t in 0..ny {
            for k in 0..nk(sector) {
                for r in 0..nr {
                    let o = (t * nk(sector) + k) * nr + r;
                    cols.push(ColKey::Cap { sector, t, k, r });
                    c.push((inv_level[o] + marg[o]) / MEGA);
                }
            }
        }
    }
    for t in 0..ny {
        cols.push(ColKey::PurCo2 { t });
        c.push(data.gamma * price[t]);
    }
    cols.push(ColKey::GapRewt);
    c.push(data.gamma * price[peat_t] / MEGA);

    let col_index = KeyIndex::from_keys(cols, "column")?;
    let cap_col = |sector: Sector, t: usize, k: usize, r: usize| -> usize {
        let base = match sector {
            Sector::Fm => 0,
            Sector::Agri => ny * nk(Sector::Fm) * nr,
        };
        base + (t * nk(sector) + k) * nr + r
    };
    let pur_col = |t: usize| ny * (nk(Sector::Fm) + nk(Sector::Agri)) * nr + t;
    let gap_col = pur_col(ny);

    let mut a = CsrMatrix::empty(c.len());
    let mut b = Vec::new();
    let mut row_index = KeyIndex::new();
    let mut push = |key: RowKey, entries: &[(usize, f64)], rhs: f64| -> Result<(), ModelError> {
        if entries.iter().all(|&(_, v)| v == 0.0) {
            return Ok(());
        }
        a.push_row(entries);
        b.push(rhs);
        row_index.insert(key, "row")?;
        Ok(())
    };

    // Annual abatement target, MtCO2eq.
    let mut entries = Vec::new();
    for t in 0..ny {
        entries.clear();
        for sector in [Sector::Fm, Sector::Agri] {
            let ghg = data.param(Param::sector_params(sector)[2]).values();
            for k in 0..nk(sector) {
                for r in 0..nr {
                    let o = (t * nk(sector) + k) * nr + r;
                    entries.push((cap_col(sector, t, k, r), ghg[o] / MEGA));
                }
            }
        }
        entries.push((pur_col(t), 1.0));
        push(RowKey::GhgTarget { t }, &entries, target[t])?;
    }

    // Peatland rewetting target, tCO2eq.
    entries.clear();
    if let Some(k) = sets.fm_techs.iter().position(|f| f == REWETTING) {
        let ghg = data.param(Param::GhgFms);
        for r in 0..nr {
            entries.push((cap_col(Sector::Fm, peat_t, k, r), ghg.get(&[peat_t, k, r])));
        }
    }
    entries.push((gap_col, 1.0));
    push(RowKey::Peat, &entries, data.peat_target)?;

    // Land availability at the end of the horizon.
    for kind in LandKind::ALL {
        let sector = kind.sector();
        let members: Vec<usize> = (0..nk(sector)).filter(|&k| kind.covers(&sets.techs(sector)[k])).collect();
        if members.is_empty() {
            continue;
        }
        for r in 0..nr {
            let entries: Vec<(usize, f64)> = members.iter().map(|&k| (cap_col(sector, last_t, k, r), -1.0)).collect();
            push(RowKey::Land { kind, r }, &entries, -kind.limit(data, r))?;
        }
    }

    // Annual growth of installed area.
    for sector in [Sector::Fm, Sector::Agri] {
        let growth = data.param(Param::sector_params(sector)[3]);
        for t in 1..ny {
            for k in 0..nk(sector) {
                for r in 0..nr {
                    push(
                        RowKey::Growth { sector, t, k, r },
                        &[(cap_col(sector, t, k, r), -1.0), (cap_col(sector, t - 1, k, r), 1.0)],
                        -growth.get(&[t - 1, k, r]),
                    )?;
                }
            }
        }
    }

    // Nothing is installed in the first year.
    for sector in [Sector::Fm, Sector::Agri] {
        for k in 0..nk(sector) {
            for r in 0..nr {
                let col = cap_col(sector, 0, k, r);
                push(RowKey::Anchor { sector, k, r, upper: false }, &[(col, 1.0)], 0.0)?;
                push(RowKey::Anchor { sector, k, r, upper: true }, &[(col, -1.0)], 0.0)?;
            }
        }
    }

    let lp = StandardFormLp::new(c, a, b, col_index, row_index)?;
    Ok(ScenarioLp { lp, n_years: ny, n_fm: nk(Sector::Fm), n_agri: nk(Sector::Agri), n_regions: nr })
}

/// Builds and solves the scenario LP.
pub fn solve_scenario(data: &ScenarioData, opts: &SolverOptions) -> Result<(ScenarioLp, Solution), ModelError> {
    let slp = build_lp(data)?;
    let out = lp::solve_with(&slp.lp, opts)?;
    if out.status != SolveStatus::Optimal {
        return Err(ModelError::NotOptimal { id: data.scenario_id.clone(), status: out.status });
    }
    log::debug!(
        "scenario {}: {} columns, {} rows, {} iterations, objective {}",
        data.scenario_id,
        slp.lp.n_vars(),
        slp.lp.n_rows(),
        out.iterations,
        out.objective
    );
    let sol = slp.solution_from_x(&data.sets, &out.x);
    Ok((slp, sol))
}
