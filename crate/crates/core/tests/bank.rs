use std::collections::BTreeMap;
use std::fs;

use forge_core::bank::*;
use forge_core::model::{synthesize_baseline, Param, Sector, SetsSpec};

/// (scenario, parameter) -> percent, from a golden CSV.
fn golden(name: &str) -> BTreeMap<(String, String), i32> {
    let path = format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"));
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            ((r[0].to_string(), r[1].to_string()), r[2].parse().unwrap())
        })
        .collect()
}

fn check_against_golden(bank: Sector, name: &str) {
    let recipes = builtin_recipes(bank);
    let ids: Vec<String> = recipes.iter().map(|r| r.id.clone()).collect();
    let expect_ids: Vec<String> = (1..=26).map(|i| format!("S{i:02}")).collect();
    assert_eq!(ids, expect_ids);
    let g = golden(name);
    let mut got = BTreeMap::new();
    for r in &recipes {
        assert_eq!(r.bank, bank);
        for (p, &f) in &r.multipliers {
            let pct = ((f - 1.0) * 100.0).round() as i32;
            assert_eq!(f, (100 + pct) as f64 / 100.0, "{} {p}", r.id);
            got.insert((r.id.clone(), p.name().to_string()), pct);
        }
    }
    assert_eq!(got, g);
}

#[test]
fn fm_table_matches_golden() {
    check_against_golden(Sector::Fm, "fm_recipes.csv");
}

#[test]
fn agri_table_matches_golden() {
    check_against_golden(Sector::Agri, "agri_recipes.csv");
}

fn tensor_digest(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

#[test]
fn materialize_touches_only_named_tensors() {
    let sets = SetsSpec::full();
    let baseline = synthesize_baseline(&sets, 0);
    let base: BTreeMap<Param, String> =
        Param::ALL.iter().map(|&p| (p, tensor_digest(baseline.param(p).values()))).collect();
    let mut count = 0;
    for bank in [Sector::Fm, Sector::Agri] {
        for r in builtin_recipes(bank) {
            let s = materialize(&baseline, &r).unwrap();
            assert_eq!(s.scenario_id, r.id);
            for &p in Param::ALL {
                let f = r.factor(p);
                let digest = tensor_digest(s.param(p).values());
                if f == 1.0 {
                    assert_eq!(digest, base[&p], "{} {p}", r.id);
                } else {
                    if baseline.param(p).values().iter().any(|&v| v != 0.0) {
                        assert_ne!(digest, base[&p], "{} {p}", r.id);
                    }
                    for (a, b) in s.param(p).values().iter().zip(baseline.param(p).values()) {
                        assert_eq!(*a, b * f);
                    }
                }
            }
            count += 1;
        }
    }
    assert_eq!(count, 52);
}

#[test]
fn bad_factors_and_names_are_rejected() {
    let baseline = synthesize_baseline(&SetsSpec::desk(), 0);
    for f in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        let r = ScenarioRecipe::from_names("X", Sector::Fm, &[("CO2price", f)]).unwrap();
        assert!(matches!(materialize(&baseline, &r), Err(BankError::BadFactor { .. })));
    }
    assert!(matches!(
        ScenarioRecipe::from_names("X", Sector::Fm, &[("co2price", 1.2)]),
        Err(BankError::UnknownParam { .. })
    ));
}

#[test]
fn identity_recipe_is_bit_exact() {
    let baseline = synthesize_baseline(&SetsSpec::desk(), 3);
    let entries: Vec<(&str, f64)> = Param::ALL.iter().map(|p| (p.name(), 1.0)).collect();
    let r = ScenarioRecipe::from_names("ID", Sector::Fm, &entries).unwrap();
    let s = materialize(&baseline, &r).unwrap();
    for &p in Param::ALL {
        assert_eq!(s.param(p), baseline.param(p));
    }
}

#[test]
fn written_bank_reads_back_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let bank = ScenarioBank::builtin(Sector::Agri, &SetsSpec::desk(), 5).unwrap();
    let m = write_bank(dir.path(), &bank).unwrap();
    assert_eq!(m.recipes.len(), 26);
    assert_eq!(read_manifest(dir.path()).unwrap(), m);
    let back = read_bank(dir.path()).unwrap();
    assert_eq!(back.ids(), bank.ids());
    for id in bank.ids() {
        for &p in Param::ALL {
            assert_eq!(back.scenario(&id).unwrap().param(p), bank.scenario(&id).unwrap().param(p), "{id} {p}");
        }
    }
    // A second write is byte-identical.
    let dir2 = tempfile::tempdir().unwrap();
    let m2 = write_bank(dir2.path(), &bank).unwrap();
    assert_eq!(m.checksums, m2.checksums);

    let victim = m.checksums.keys().find(|k| k.starts_with("S07/inputs/")).unwrap().clone();
    let p = dir.path().join(&victim);
    let mut text = fs::read_to_string(&p).unwrap();
    text.push_str("\n");
    fs::write(&p, text).unwrap();
    assert!(matches!(read_bank(dir.path()), Err(BankError::Checksum(k)) if k == victim));
}

#[test]
fn desk_bank_solves_and_outputs_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bank = ScenarioBank::builtin(Sector::Fm, &SetsSpec::desk(), 0).unwrap();
    write_bank(dir.path(), &bank).unwrap();
    let sols = run_bank(&bank, 2).unwrap();
    assert_eq!(sols.len(), 26);
    write_outputs(dir.path(), &bank, &sols).unwrap();
    let back = read_outputs(dir.path(), &bank).unwrap();
    for (id, s) in &sols {
        let b = &back[id];
        for sector in [Sector::Fm, Sector::Agri] {
            for (x, y) in s.cap(sector).values().iter().zip(b.cap(sector).values()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }
}
