//! Patient and hospital data model for surgical registries.
//!
//! A [`Cohort`] is an ordered list of admissions plus the de-duplicated list
//! of hospitals in order of first appearance. Every model in this crate sees
//! patients through the fixed 18-column [`DesignVector`] layout.

mod io;
mod synth;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use io::{emit_csv, ingest_csv, parse_csv, write_csv, CSV_HEADER};
pub use synth::{
    population_expected_rate, synthesize_cohort, AgeConvention, CalibrationTargets,
    GeneratorMetadata, HospitalTarget, OutcomeModel, RiskFactorPrevalence, RiskModel,
    SynthesisOptions, TiltRecord,
};

pub const N_COVARIATES: usize = 18;

/// Design-vector column names, in column order.
pub const COVARIATE_NAMES: [&str; N_COVARIATES] = [
    "yrs_over_65",
    "male",
    "renal_failure",
    "diabetes",
    "hypertension",
    "pvd",
    "prior_pci",
    "shock",
    "iabp",
    "ef_lt30_or_missing",
    "ef_b30to39",
    "mi_le6h",
    "mi_h7to24",
    "mi_d1to7",
    "mi_d8to21",
    "mi_gt21d",
    "status_urgent",
    "status_emergent",
];

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("header mismatch: missing or misplaced column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: bad value `{value}` in column `{column}`")]
    BadEnumValue { line: u64, column: String, value: String },
    #[error("line {line}: yrs_over_65 must be a finite nonnegative number, got `{value}`")]
    NegativeAge { line: u64, value: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount { line: u64, expected: usize, found: usize },
    #[error("cohort has no records")]
    EmptyCohort,
    #[error("invalid calibration input: {0}")]
    InvalidTargets(String),
    #[error("hospital {hospital}: expected-rate target {target_pct:.3}% unattainable (closest {achieved_pct:.3}%)")]
    UnattainableTarget { hospital: String, target_pct: f64, achieved_pct: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HospitalId(pub String);

impl fmt::Display for HospitalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for HospitalId {
    fn from(s: String) -> Self {
        HospitalId(s)
    }
}

impl From<&str> for HospitalId {
    fn from(s: &str) -> Self {
        HospitalId(s.to_owned())
    }
}

macro_rules! csv_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($text => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }
        }
    };
}

csv_enum!(
    /// Ejection fraction category; `Ge40` is the reference level.
    EfCategory { Ge40 => "ge40", Lt30OrMissing => "lt30_or_missing", B30To39 => "b30to39" }
);
csv_enum!(
    /// Timing of prior myocardial infarction; `None` is the reference level.
    MiCategory {
        None => "none",
        Le6h => "le6h",
        H7To24 => "h7to24",
        D1To7 => "d1to7",
        D8To21 => "d8to21",
        Gt21d => "gt21d",
    }
);
csv_enum!(
    /// Surgical status; `Elective` is the reference level.
    Status { Elective => "elective", Urgent => "urgent", Emergent => "emergent" }
);

/// One surgical admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub hospital_id: HospitalId,
    pub death30: bool,
    pub yrs_over_65: f64,
    pub male: bool,
    pub renal_failure: bool,
    pub diabetes: bool,
    pub hypertension: bool,
    pub pvd: bool,
    pub prior_pci: bool,
    pub shock: bool,
    pub iabp: bool,
    pub ef_cat: EfCategory,
    pub mi_cat: MiCategory,
    pub status: Status,
}

/// Risk-factor values in the fixed column order of [`COVARIATE_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignVector(pub [f64; N_COVARIATES]);

impl DesignVector {
    pub fn values(&self) -> &[f64; N_COVARIATES] {
        &self.0
    }

    pub fn dot(&self, coef: &[f64]) -> f64 {
        self.0.iter().zip(coef).map(|(x, b)| x * b).sum()
    }
}

impl PatientRecord {
    pub fn design(&self) -> DesignVector {
        let b = |f: bool| if f { 1.0 } else { 0.0 };
        let mut v = [0.0; N_COVARIATES];
        v[0] = self.yrs_over_65;
        v[1] = b(self.male);
        v[2] = b(self.renal_failure);
        v[3] = b(self.diabetes);
        v[4] = b(self.hypertension);
        v[5] = b(self.pvd);
        v[6] = b(self.prior_pci);
        v[7] = b(self.shock);
        v[8] = b(self.iabp);
        match self.ef_cat {
            EfCategory::Ge40 => {}
            EfCategory::Lt30OrMissing => v[9] = 1.0,
            EfCategory::B30To39 => v[10] = 1.0,
        }
        match self.mi_cat {
            MiCategory::None => {}
            other => v[10 + other.index()] = 1.0,
        }
        match self.status {
            Status::Elective => {}
            other => v[15 + other.index()] = 1.0,
        }
        DesignVector(v)
    }
}

/// Validated, ordered collection of admissions.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    records: Vec<PatientRecord>,
    hospital_ids: Vec<HospitalId>,
    hospital_of: Vec<usize>,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>) -> Result<Self, RegistryError> {
        if records.is_empty() {
            return Err(RegistryError::EmptyCohort);
        }
        let mut index: HashMap<HospitalId, usize> = HashMap::new();
        let mut hospital_ids = Vec::new();
        let mut hospital_of = Vec::with_capacity(records.len());
        for r in &records {
            let next = hospital_ids.len();
            let h = *index.entry(r.hospital_id.clone()).or_insert_with(|| {
                hospital_ids.push(r.hospital_id.clone());
                next
            });
            hospital_of.push(h);
        }
        Ok(Cohort { records, hospital_ids, hospital_of })
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn hospital_ids(&self) -> &[HospitalId] {
        &self.hospital_ids
    }

    pub fn n_hospitals(&self) -> usize {
        self.hospital_ids.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Hospital index (into [`Cohort::hospital_ids`]) of every record.
    pub fn hospital_of(&self) -> &[usize] {
        &self.hospital_of
    }

    pub fn hospital_index(&self, id: &HospitalId) -> Option<usize> {
        self.hospital_ids.iter().position(|h| h == id)
    }

    /// Record indices grouped by hospital.
    pub fn rows_by_hospital(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n_hospitals()];
        for (j, &h) in self.hospital_of.iter().enumerate() {
            rows[h].push(j);
        }
        rows
    }

    pub fn designs(&self) -> Vec<DesignVector> {
        self.records.iter().map(PatientRecord::design).collect()
    }

    pub fn outcomes(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.death30).collect()
    }

    pub fn deaths(&self) -> usize {
        self.records.iter().filter(|r| r.death30).count()
    }

    pub fn crude_rate(&self) -> f64 {
        self.deaths() as f64 / self.len() as f64
    }

    /// Cohort restricted to the records of hospitals for which `keep` is true.
    pub fn filter_hospitals(&self, keep: impl Fn(&HospitalId) -> bool) -> Result<Cohort, RegistryError> {
        Cohort::new(self.records.iter().filter(|r| keep(&r.hospital_id)).cloned().collect())
    }

    /// Records regrouped hospital by hospital in id order, each hospital
    /// keeping its own record order. Fits on this view do not depend on how
    /// hospitals were interleaved in the input.
    pub fn canonical(&self) -> Cohort {
        let mut order: Vec<usize> = (0..self.n_hospitals()).collect();
        order.sort_by(|&a, &b| self.hospital_ids[a].cmp(&self.hospital_ids[b]));
        let rows = self.rows_by_hospital();
        let records = order.iter().flat_map(|&h| rows[h].iter().map(|&j| self.records[j].clone())).collect();
        Cohort::new(records).expect("nonempty")
    }

    pub fn without_hospital(&self, id: &HospitalId) -> Result<Cohort, RegistryError> {
        self.filter_hospitals(|h| h != id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HospitalSummary {
    pub hospital_id: HospitalId,
    pub n: usize,
    pub deaths: usize,
    pub crude_rate_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub hospitals: Vec<HospitalSummary>,
    pub total: HospitalSummary,
}

/// Per-hospital volumes, deaths and crude rates, with a totals row.
pub fn summarize(cohort: &Cohort) -> CohortSummary {
    let mut n = vec![0usize; cohort.n_hospitals()];
    let mut d = vec![0usize; cohort.n_hospitals()];
    for (r, &h) in cohort.records().iter().zip(cohort.hospital_of()) {
        n[h] += 1;
        d[h] += usize::from(r.death30);
    }
    let row = |id: HospitalId, n: usize, deaths: usize| HospitalSummary {
        hospital_id: id,
        n,
        deaths,
        crude_rate_pct: 100.0 * deaths as f64 / n as f64,
    };
    let hospitals = cohort
        .hospital_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| row(id.clone(), n[i], d[i]))
        .collect();
    CohortSummary {
        hospitals,
        total: row(HospitalId("All".into()), n.iter().sum(), d.iter().sum()),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn patient(hospital: &str, death: bool) -> PatientRecord {
        PatientRecord {
            hospital_id: hospital.into(),
            death30: death,
            yrs_over_65: 0.0,
            male: false,
            renal_failure: false,
            diabetes: false,
            hypertension: false,
            pvd: false,
            prior_pci: false,
            shock: false,
            iabp: false,
            ef_cat: EfCategory::Ge40,
            mi_cat: MiCategory::None,
            status: Status::Elective,
        }
    }

    #[test]
    fn reference_levels_contribute_zero() {
        let p = patient("a", false);
        assert_eq!(p.design().0, [0.0; N_COVARIATES]);
    }

    #[test]
    fn dummy_groups_are_one_hot() {
        let mut p = patient("a", false);
        p.yrs_over_65 = 3.5;
        p.shock = true;
        for &ef in EfCategory::ALL {
            for &mi in MiCategory::ALL {
                for &st in Status::ALL {
                    p.ef_cat = ef;
                    p.mi_cat = mi;
                    p.status = st;
                    let v = p.design().0;
                    assert_eq!(v[0], 3.5);
                    assert_eq!(v[7], 1.0);
                    let ef_sum: f64 = v[9..11].iter().sum();
                    let mi_sum: f64 = v[11..16].iter().sum();
                    let st_sum: f64 = v[16..18].iter().sum();
                    assert_eq!(ef_sum, if ef == EfCategory::Ge40 { 0.0 } else { 1.0 });
                    assert_eq!(mi_sum, if mi == MiCategory::None { 0.0 } else { 1.0 });
                    assert_eq!(st_sum, if st == Status::Elective { 0.0 } else { 1.0 });
                }
            }
        }
        p.mi_cat = MiCategory::Le6h;
        assert_eq!(p.design().0[11], 1.0);
        p.status = Status::Emergent;
        assert_eq!(p.design().0[17], 1.0);
    }

    #[test]
    fn summary_rates_and_totals() {
        let mut recs = vec![patient("1", true), patient("2", false)];
        let c = Cohort::new(recs.clone()).unwrap();
        let s = summarize(&c);
        assert_eq!(s.hospitals[0].crude_rate_pct, 100.0);
        assert_eq!(s.hospitals[1].crude_rate_pct, 0.0);

        recs.clear();
        recs.extend((0..508).map(|j| patient("1", j < 11)));
        recs.extend((0..40).map(|_| patient("2", false)));
        let s = summarize(&Cohort::new(recs).unwrap());
        assert!((s.hospitals[0].crude_rate_pct - 2.165).abs() < 0.005);
        assert_eq!(s.hospitals[1].crude_rate_pct, 0.0);
        assert_eq!(s.total.n, s.hospitals.iter().map(|h| h.n).sum::<usize>());
        assert_eq!(s.total.deaths, s.hospitals.iter().map(|h| h.deaths).sum::<usize>());
    }

    #[test]
    fn hospitals_listed_in_first_appearance_order() {
        let c = Cohort::new(vec![patient("b", false), patient("a", true), patient("b", true)]).unwrap();
        assert_eq!(c.hospital_ids(), &[HospitalId::from("b"), HospitalId::from("a")]);
        assert_eq!(c.hospital_of(), &[0, 1, 0]);
        assert_eq!(c.rows_by_hospital(), vec![vec![0, 2], vec![1]]);
        assert!(matches!(Cohort::new(vec![]), Err(RegistryError::EmptyCohort)));
    }
}
