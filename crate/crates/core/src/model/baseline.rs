//! Seeded synthetic baseline scenario.
//!
//! Yearly parameters follow linear paths between 2020 and 2050 values (the
//! CO2 price is geometric). Two reference cells are pinned exactly: DE2 /
//! FM04_DouglasFir for forest management and DE3 / Agri01_AGC for
//! agriculture; everything else is jittered per (technology, region).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Axis, Param, ScenarioData, SetsSpec, Tensor};

const CO2_START: f64 = 20.0;
const CO2_END: f64 = 249.197564;
const TARGET_START: f64 = 1.92;
const TARGET_END: f64 = 51.0;
const BEECH_DE2: f64 = 423046.85;
const GRASS_DE2: f64 = 1199109.02;
const AGRIAREA_DE3: f64 = 4836.495;

const FM_ANCHOR: (&str, &str) = ("FM04_DouglasFir", "DE2");
const AGRI_ANCHOR: (&str, &str) = ("Agri01_AGC", "DE3");

/// 2020 and 2050 values of one yearly series.
#[derive(Clone, Copy)]
struct Path(f64, f64);

impl Path {
    fn at(self, year: i32) -> f64 {
        match year {
            2020 => self.0,
            2050 => self.1,
            _ => self.0 + (self.1 - self.0) * f64::from(year - 2020) / 30.0,
        }
    }
}

struct TechProfile {
    inv_level: Path,
    marg: Path,
    inv: Path,
    ghg: Path,
    growth: Path,
}

const fn profile(inv_level: (f64, f64), marg: (f64, f64), inv: (f64, f64), ghg: (f64, f64), growth: (f64, f64)) -> TechProfile {
    TechProfile {
        inv_level: Path(inv_level.0, inv_level.1),
        marg: Path(marg.0, marg.1),
        inv: Path(inv.0, inv.1),
        ghg: Path(ghg.0, ghg.1),
        growth: Path(growth.0, growth.1),
    }
}

fn fm_profile(tech: &str) -> TechProfile {
    match tech {
        "FM01_SetAside" => profile((150.0, 180.0), (20.0, 25.0), (1000.0, 1100.0), (3.0, 3.2), (3000.0, 3000.0)),
        "FM02_TSA" => profile((240.0, 260.0), (25.0, 30.0), (1500.0, 1600.0), (5.0, 5.0), (2500.0, 2500.0)),
        "FM03_Spruce" => profile((1500.0, 2000.0), (3.0, 4.0), (500.0, 650.0), (12.0, 13.0), (400.0, 400.0)),
        "FM04_DouglasFir" => profile(
            (5023.172313, 8052.6193),
            (2.272816, 2.914732),
            (1654.288462, 2121.512452),
            (11.52, 13.08),
            (10.461851, 10.461851),
        ),
        "FM05_Beech" => profile((2000.0, 2600.0), (3.0, 3.5), (700.0, 850.0), (9.0, 10.0), (300.0, 300.0)),
        "FM06_Oak" => profile((2600.0, 3200.0), (3.0, 3.5), (850.0, 1000.0), (8.0, 9.0), (200.0, 200.0)),
        "PC_Rewetting" => profile((600.0, 650.0), (100.0, 900.0), (3000.0, 3200.0), (20.0, 22.0), (1500.0, 1500.0)),
        _ => profile((1000.0, 1200.0), (10.0, 12.0), (800.0, 900.0), (6.0, 6.5), (500.0, 500.0)),
    }
}

fn agri_profile(tech: &str) -> TechProfile {
    match tech {
        "Agri01_AGC" => profile(
            (158.803346, 2.30019),
            (17.25154, 0.24988),
            (2476.190476, 35.866426),
            (1.8, 1.8),
            (20.62545, 21047.182701),
        ),
        "Agri02_CoverCrops" => profile((120.0, 60.0), (30.0, 20.0), (900.0, 450.0), (1.2, 1.3), (500.0, 4000.0)),
        "Agri03_SoilCarbon" => profile((90.0, 50.0), (25.0, 20.0), (700.0, 400.0), (0.9, 1.0), (800.0, 5000.0)),
        "Agri04_Biochar" => profile((400.0, 150.0), (60.0, 40.0), (3000.0, 1200.0), (2.5, 2.8), (100.0, 2000.0)),
        "Agri05_Agroforestry" => profile((120.0, 80.0), (15.0, 10.0), (1100.0, 700.0), (4.0, 4.5), (600.0, 3000.0)),
        "Agri06_Hedgerows" => profile((500.0, 300.0), (50.0, 40.0), (3500.0, 2200.0), (3.5, 3.8), (100.0, 1500.0)),
        _ => profile((200.0, 120.0), (30.0, 25.0), (1500.0, 900.0), (2.0, 2.2), (300.0, 2000.0)),
    }
}

fn co2_price(year: i32) -> f64 {
    match year {
        2020 => CO2_START,
        2050 => CO2_END,
        _ => CO2_START * (CO2_END / CO2_START).powf(f64::from(year - 2020) / 30.0),
    }
}

/// Stream id for a label so draws do not depend on which other
/// technologies or regions are configured.
fn stream(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100000001b3))
}

fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream(label));
    rng
}

/// Multiplicative jitter for the cost, GHG and growth series of one cell.
struct Jitter {
    cost: f64,
    ghg: f64,
    growth: f64,
}

fn jitter(seed: u64, tech: &str, region: &str, anchor: (&str, &str)) -> Jitter {
    if (tech, region) == anchor {
        return Jitter { cost: 1.0, ghg: 1.0, growth: 1.0 };
    }
    let mut rng = rng_for(seed, &format!("{tech}/{region}"));
    Jitter { cost: rng.gen_range(0.8..1.2), ghg: rng.gen_range(0.85..1.15), growth: rng.gen_range(0.6..1.4) }
}

pub fn synthesize_baseline(sets: &SetsSpec, seed: u64) -> ScenarioData {
    let years = &sets.years;
    let (ny, nr) = (years.len(), sets.regions.len());
    let mut params = BTreeMap::new();

    params.insert(Param::Co2Price, Tensor::from_fn(&[Axis::Year], &[ny], |i| co2_price(years[i[0]])));
    params.insert(
        Param::GhgTarget,
        Tensor::from_fn(&[Axis::Year], &[ny], |i| Path(TARGET_START, TARGET_END).at(years[i[0]])),
    );

    let mut beech = Vec::with_capacity(nr);
    let mut grass = Vec::with_capacity(nr);
    let mut agri = Vec::with_capacity(nr);
    let mut peat = Vec::with_capacity(nr);
    for region in &sets.regions {
        let mut rng = rng_for(seed, &format!("area/{region}"));
        let (b, g, a, p) = (rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.7..1.3));
        beech.push(if region == FM_ANCHOR.1 { BEECH_DE2 } else { BEECH_DE2 * b });
        grass.push(if region == FM_ANCHOR.1 { GRASS_DE2 } else { GRASS_DE2 * g });
        agri.push(if region == AGRI_ANCHOR.1 { AGRIAREA_DE3 } else { AGRIAREA_DE3 * a });
        peat.push(if region == AGRI_ANCHOR.1 { 1.0 } else { p });
    }
    params.insert(Param::BeechArea0, Tensor::from_values(&[Axis::Region], &[nr], beech));
    params.insert(Param::GrassArea0, Tensor::from_values(&[Axis::Region], &[nr], grass));
    params.insert(Param::AgriArea0, Tensor::from_values(&[Axis::Region], &[nr], agri));
    params.insert(
        Param::PeatExtract,
        Tensor::from_fn(&[Axis::Year, Axis::Region], &[ny, nr], |i| Path(0.03, 0.3).at(years[i[0]]) * peat[i[1]]),
    );
    params.insert(Param::Cap0Fms, Tensor::for_param(Param::Cap0Fms, sets));

    for (techs, axis, anchor, profile_of, names) in [
        (
            &sets.fm_techs,
            Axis::FmTech,
            FM_ANCHOR,
            fm_profile as fn(&str) -> TechProfile,
            [Param::CostInvLevelFms, Param::CostMargFms, Param::CostInvFms, Param::GhgFms, Param::FmsGrowth],
        ),
        (
            &sets.agri_techs,
            Axis::AgriTech,
            AGRI_ANCHOR,
            agri_profile as fn(&str) -> TechProfile,
            [Param::CostInvLevelAgri, Param::CostMargAgri, Param::CostInvAgri, Param::GhgAgri, Param::AgriGrowth],
        ),
    ] {
        let nk = techs.len();
        let profiles: Vec<TechProfile> = techs.iter().map(|t| profile_of(t)).collect();
        let jit: Vec<Vec<Jitter>> =
            techs.iter().map(|t| sets.regions.iter().map(|r| jitter(seed, t, r, anchor)).collect()).collect();
        let axes = [Axis::Year, axis, Axis::Region];
        let shape = [ny, nk, nr];
        let pick = |which: usize, prof: &TechProfile| match which {
            0 => prof.inv_level,
            1 => prof.marg,
            2 => prof.inv,
            3 => prof.ghg,
            _ => prof.growth,
        };
        for (which, &param) in names.iter().enumerate() {
            let tensor = Tensor::from_fn(&axes, &shape, |i| {
                let (t, k, r) = (i[0], i[1], i[2]);
                let j = &jit[k][r];
                let m = match which {
                    0..=2 => j.cost,
                    3 => j.ghg,
                    _ => j.growth,
                };
                pick(which, &profiles[k]).at(years[t]) * m
            });
            params.insert(param, tensor);
        }
    }

    ScenarioData {
        scenario_id: "baseline".to_string(),
        sets: sets.clone(),
        alpha: 0.05,
        gamma: 1.1,
        peat_target: 5e6,
        seed: Some(seed),
        params,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn price_path_endpoints_exact() {
        assert_eq!(co2_price(2020), 20.0);
        assert_eq!(co2_price(2050), 249.197564);
        assert!(co2_price(2035) > co2_price(2034));
    }

    #[test]
    fn anchored_cells() {
        let sets = SetsSpec::full();
        let d = synthesize_baseline(&sets, 11);
        d.check().unwrap();
        let f = sets.fm_techs.iter().position(|t| t == "FM04_DouglasFir").unwrap();
        let r = sets.regions.iter().position(|t| t == "DE2").unwrap();
        let last = sets.years.len() - 1;
        assert_eq!(d.param(Param::GhgFms).get(&[0, f, r]), 11.52);
        assert_eq!(d.param(Param::GhgFms).get(&[last, f, r]), 13.08);
        assert_eq!(d.param(Param::CostInvLevelFms).get(&[last, f, r]), 8052.6193);
        assert_eq!(d.param(Param::FmsGrowth).get(&[17, f, r]), 10.461851);
        assert_eq!(d.param(Param::BeechArea0).values()[r], 423046.85);
        assert_eq!(d.param(Param::GhgTarget).values()[0], 1.92);
        assert_eq!(d.param(Param::GhgTarget).values()[last], 51.0);
        let a = sets.agri_techs.iter().position(|t| t == "Agri01_AGC").unwrap();
        let r3 = sets.regions.iter().position(|t| t == "DE3").unwrap();
        assert_eq!(d.param(Param::AgriGrowth).get(&[last, a, r3]), 21047.182701);
        assert_eq!(d.param(Param::AgriArea0).values()[r3], 4836.495);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let sets = SetsSpec::desk();
        assert_eq!(synthesize_baseline(&sets, 3), synthesize_baseline(&sets, 3));
        assert_ne!(synthesize_baseline(&sets, 3), synthesize_baseline(&sets, 4));
    }

    #[test]
    fn subsets_share_cell_values() {
        let full = synthesize_baseline(&SetsSpec::full(), 5);
        let desk_sets = SetsSpec::desk();
        let desk = synthesize_baseline(&desk_sets, 5);
        let fs = &full.sets;
        for (k, tech) in desk_sets.fm_techs.iter().enumerate() {
            for (r, region) in desk_sets.regions.iter().enumerate() {
                let fk = fs.fm_techs.iter().position(|t| t == tech).unwrap();
                let fr = fs.regions.iter().position(|t| t == region).unwrap();
                let ft = fs.year_index(desk_sets.years[0]).unwrap();
                assert_eq!(
                    desk.param(Param::CostMargFms).get(&[0, k, r]),
                    full.param(Param::CostMargFms).get(&[ft, fk, fr])
                );
            }
        }
    }
}
