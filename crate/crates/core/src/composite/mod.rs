//! Composite scores over several process measures: pooled and all-or-none
//! rates, and latent quality from item response models.

mod irt;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

pub use irt::{fit_irt, icc_csv, icc_data, irt_log_likelihood, IccCurve, IrtFit, IrtKind, IrtModel, IrtParams, IrtState};

use crate::csv_field;
use crate::registry::HospitalId;
use crate::sampler::SamplerError;

#[derive(Debug, thiserror::Error)]
pub enum CompositeError {
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("hospital {0} has no eligible patients on any measure")]
    AllEligibleZero(HospitalId),
    #[error("degenerate panel: {0}")]
    DegeneratePanel(String),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// Counts of patients receiving (`y`) and eligible for (`n`) each measure,
/// indexed `[hospital][measure]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurePanel {
    hospitals: Vec<HospitalId>,
    measures: Vec<String>,
    y: Vec<Vec<u64>>,
    n: Vec<Vec<u64>>,
}

impl MeasurePanel {
    pub fn new(hospitals: Vec<HospitalId>, measures: Vec<String>, y: Vec<Vec<u64>>, n: Vec<Vec<u64>>) -> Result<Self, CompositeError> {
        let bad = |m: String| Err(CompositeError::InvalidPanel(m));
        if hospitals.is_empty() || measures.is_empty() {
            return bad("panel needs at least one hospital and one measure".into());
        }
        if y.len() != hospitals.len() || n.len() != hospitals.len() {
            return bad(format!("{} hospitals but {} / {} count rows", hospitals.len(), y.len(), n.len()));
        }
        if hospitals.iter().collect::<BTreeSet<_>>().len() != hospitals.len() {
            return bad("duplicate hospital id".into());
        }
        if measures.iter().collect::<BTreeSet<_>>().len() != measures.len() {
            return bad("duplicate measure id".into());
        }
        for (i, h) in hospitals.iter().enumerate() {
            if y[i].len() != measures.len() || n[i].len() != measures.len() {
                return bad(format!("hospital {h}: expected {} measures", measures.len()));
            }
            for k in 0..measures.len() {
                if y[i][k] > n[i][k] {
                    return bad(format!("hospital {h}, measure {}: {} > {}", measures[k], y[i][k], n[i][k]));
                }
            }
            if n[i].iter().all(|&c| c == 0) {
                return Err(CompositeError::AllEligibleZero(h.clone()));
            }
        }
        Ok(MeasurePanel { hospitals, measures, y, n })
    }

    pub fn hospitals(&self) -> &[HospitalId] {
        &self.hospitals
    }

    pub fn measures(&self) -> &[String] {
        &self.measures
    }

    pub fn y(&self, i: usize, k: usize) -> u64 {
        self.y[i][k]
    }

    pub fn n(&self, i: usize, k: usize) -> u64 {
        self.n[i][k]
    }

    pub fn n_hospitals(&self) -> usize {
        self.hospitals.len()
    }

    pub fn n_measures(&self) -> usize {
        self.measures.len()
    }

    /// Panel restricted to the measures at `keep`.
    pub fn select_measures(&self, keep: &[usize]) -> Result<Self, CompositeError> {
        MeasurePanel::new(
            self.hospitals.clone(),
            keep.iter().map(|&k| self.measures[k].clone()).collect(),
            self.y.iter().map(|r| keep.iter().map(|&k| r[k]).collect()).collect(),
            self.n.iter().map(|r| keep.iter().map(|&k| r[k]).collect()).collect(),
        )
    }

    /// `hospital_id,measure_id,numerator,denominator`, one line per cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("hospital_id,measure_id,numerator,denominator\n");
        for (i, h) in self.hospitals.iter().enumerate() {
            for (k, m) in self.measures.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", csv_field(&h.0), csv_field(m), self.y[i][k], self.n[i][k]);
            }
        }
        s
    }
}

#[derive(Debug, Deserialize)]
struct PanelRow {
    hospital_id: String,
    measure_id: String,
    numerator: u64,
    denominator: u64,
}

fn csv_err(e: csv::Error) -> CompositeError {
    CompositeError::Csv { line: e.position().map_or(0, |p| p.line()), message: e.to_string() }
}

/// Panel from `hospital_id,measure_id,numerator,denominator` rows. Hospitals
/// and measures keep first-appearance order; missing cells count as 0/0.
pub fn parse_panel_csv(reader: impl Read) -> Result<MeasurePanel, CompositeError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut hospitals: Vec<HospitalId> = Vec::new();
    let mut measures: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), (u64, u64)> = BTreeMap::new();
    for row in rdr.deserialize::<PanelRow>() {
        let row = row.map_err(csv_err)?;
        let h = position_or_push(&mut hospitals, HospitalId(row.hospital_id));
        let k = position_or_push(&mut measures, row.measure_id);
        if cells.insert((h, k), (row.numerator, row.denominator)).is_some() {
            return Err(CompositeError::InvalidPanel(format!("repeated cell {} / {}", hospitals[h], measures[k])));
        }
    }
    let grid = |f: fn(&(u64, u64)) -> u64| -> Vec<Vec<u64>> {
        (0..hospitals.len())
            .map(|h| (0..measures.len()).map(|k| cells.get(&(h, k)).map_or(0, f)).collect())
            .collect()
    };
    let y = grid(|c| c.0);
    let n = grid(|c| c.1);
    MeasurePanel::new(hospitals, measures, y, n)
}

fn position_or_push<T: PartialEq>(v: &mut Vec<T>, x: T) -> usize {
    match v.iter().position(|e| *e == x) {
        Some(i) => i,
        None => {
            v.push(x);
            v.len() - 1
        }
    }
}

/// Nearest-rank percentile: the smallest value with at least `q` of the
/// sample at or below it.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledScore {
    pub hospital_id: HospitalId,
    pub successes: u64,
    pub eligible: u64,
    pub rate: f64,
    /// At or above the 90th percentile of all hospitals' rates.
    pub top_decile: bool,
}

/// Pooled rate `sum_k y_ik / sum_k n_ik` of every hospital.
pub fn pooled_composite(panel: &MeasurePanel) -> Result<Vec<PooledScore>, CompositeError> {
    let mut scores = Vec::with_capacity(panel.n_hospitals());
    for (i, h) in panel.hospitals.iter().enumerate() {
        let successes: u64 = panel.y[i].iter().sum();
        let eligible: u64 = panel.n[i].iter().sum();
        if eligible == 0 {
            return Err(CompositeError::AllEligibleZero(h.clone()));
        }
        scores.push(PooledScore {
            hospital_id: h.clone(),
            successes,
            eligible,
            rate: successes as f64 / eligible as f64,
            top_decile: false,
        });
    }
    let mut rates: Vec<f64> = scores.iter().map(|s| s.rate).collect();
    rates.sort_by(f64::total_cmp);
    let cut = nearest_rank(&rates, 0.9);
    for s in &mut scores {
        s.top_decile = s.rate >= cut;
    }
    Ok(scores)
}

/// Measures one patient was eligible for and received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientMeasures {
    pub hospital_id: HospitalId,
    pub patient_id: String,
    pub eligible: BTreeSet<String>,
    pub received: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllOrNoneScore {
    pub hospital_id: HospitalId,
    /// Patients eligible for at least one measure.
    pub patients: usize,
    pub successes: usize,
    /// `None` when no patient was eligible for anything.
    pub rate: Option<f64>,
}

/// A patient succeeds only when every measure they were eligible for was
/// delivered; patients eligible for nothing are left out.
pub fn all_or_none(patients: &[PatientMeasures]) -> Result<Vec<AllOrNoneScore>, CompositeError> {
    let mut order: Vec<HospitalId> = Vec::new();
    let mut tally: BTreeMap<HospitalId, (usize, usize)> = BTreeMap::new();
    for p in patients {
        if !p.received.is_subset(&p.eligible) {
            return Err(CompositeError::InvalidPanel(format!(
                "patient {} at {} received a measure they were not eligible for",
                p.patient_id, p.hospital_id
            )));
        }
        let t = tally.entry(p.hospital_id.clone()).or_insert_with(|| {
            order.push(p.hospital_id.clone());
            (0, 0)
        });
        if !p.eligible.is_empty() {
            t.0 += 1;
            t.1 += usize::from(p.received == p.eligible);
        }
    }
    Ok(order
        .into_iter()
        .map(|h| {
            let (n, s) = tally[&h];
            AllOrNoneScore { hospital_id: h, patients: n, successes: s, rate: (n > 0).then(|| s as f64 / n as f64) }
        })
        .collect())
}

/// Per-measure counts implied by patient-level records.
pub fn panel_from_patients(patients: &[PatientMeasures]) -> Result<MeasurePanel, CompositeError> {
    let mut hospitals: Vec<HospitalId> = Vec::new();
    let mut measures: Vec<String> = Vec::new();
    for p in patients {
        position_or_push(&mut hospitals, p.hospital_id.clone());
        for m in &p.eligible {
            position_or_push(&mut measures, m.clone());
        }
    }
    let mut y = vec![vec![0; measures.len()]; hospitals.len()];
    let mut n = vec![vec![0; measures.len()]; hospitals.len()];
    for p in patients {
        let h = hospitals.iter().position(|x| *x == p.hospital_id).expect("seen");
        for m in &p.eligible {
            let k = measures.iter().position(|x| x == m).expect("seen");
            n[h][k] += 1;
            y[h][k] += u64::from(p.received.contains(m));
        }
    }
    MeasurePanel::new(hospitals, measures, y, n)
}

#[derive(Debug, Deserialize)]
struct PatientRow {
    hospital_id: String,
    patient_id: String,
    measure_id: String,
    eligible: u8,
    received: u8,
}

/// Patients from `hospital_id,patient_id,measure_id,eligible,received` rows
/// with 0/1 flags.
pub fn parse_patient_csv(reader: impl Read) -> Result<Vec<PatientMeasures>, CompositeError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut patients: Vec<PatientMeasures> = Vec::new();
    let mut index: BTreeMap<(String, String), usize> = BTreeMap::new();
    for row in rdr.deserialize::<PatientRow>() {
        let row = row.map_err(csv_err)?;
        if row.eligible > 1 || row.received > 1 {
            return Err(CompositeError::InvalidPanel(format!("patient {}: flags must be 0 or 1", row.patient_id)));
        }
        let key = (row.hospital_id.clone(), row.patient_id.clone());
        let at = *index.entry(key).or_insert_with(|| {
            patients.push(PatientMeasures {
                hospital_id: HospitalId(row.hospital_id.clone()),
                patient_id: row.patient_id.clone(),
                eligible: BTreeSet::new(),
                received: BTreeSet::new(),
            });
            patients.len() - 1
        });
        if row.eligible == 1 {
            patients[at].eligible.insert(row.measure_id.clone());
        }
        if row.received == 1 {
            patients[at].received.insert(row.measure_id);
        }
    }
    if patients.is_empty() {
        return Err(CompositeError::InvalidPanel("no patient rows".into()));
    }
    Ok(patients)
}
