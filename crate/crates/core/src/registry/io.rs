use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use super::{Cohort, EfCategory, MiCategory, PatientRecord, RegistryError, Status};

/// Exact header of a registry file.
pub const CSV_HEADER: [&str; 14] = [
    "hospital_id",
    "death30",
    "yrs_over_65",
    "male",
    "renal_failure",
    "diabetes",
    "hypertension",
    "pvd",
    "prior_pci",
    "shock",
    "iabp",
    "ef_cat",
    "mi_cat",
    "status",
];

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Cohort, RegistryError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|source| RegistryError::Io { path: path.display().to_string(), source })?;
    parse_csv(file)
}

/// Parses and validates a registry CSV. Malformed rows are rejected, never coerced.
pub fn parse_csv(reader: impl Read) -> Result<Cohort, RegistryError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut rows = rdr.records();

    let header = match rows.next() {
        Some(h) => h.map_err(csv_err)?,
        None => return Err(RegistryError::MissingColumn(CSV_HEADER[0].into())),
    };
    for (i, &want) in CSV_HEADER.iter().enumerate() {
        if header.get(i).map(str::trim) != Some(want) {
            return Err(RegistryError::MissingColumn(want.into()));
        }
    }
    if header.len() != CSV_HEADER.len() {
        return Err(RegistryError::MissingColumn(
            header.get(CSV_HEADER.len()).unwrap_or_default().to_owned(),
        ));
    }

    let mut records = Vec::new();
    for row in rows {
        let row = row.map_err(csv_err)?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != CSV_HEADER.len() {
            return Err(RegistryError::FieldCount { line, expected: CSV_HEADER.len(), found: row.len() });
        }
        records.push(parse_row(&row, line)?);
    }
    Cohort::new(records)
}

fn csv_err(e: csv::Error) -> RegistryError {
    let line = e.position().map_or(0, |p| p.line());
    RegistryError::Csv { line, message: e.to_string() }
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<PatientRecord, RegistryError> {
    let field = |i: usize| row[i].trim();
    let bad = |i: usize| RegistryError::BadEnumValue {
        line,
        column: CSV_HEADER[i].to_owned(),
        value: row[i].to_owned(),
    };
    let flag = |i: usize| match field(i) {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(bad(i)),
    };

    let hospital_id = field(0);
    if hospital_id.is_empty() {
        return Err(bad(0));
    }
    let yrs: f64 = field(2).parse().map_err(|_| bad(2))?;
    if !(yrs.is_finite() && yrs >= 0.0) {
        return Err(RegistryError::NegativeAge { line, value: row[2].to_owned() });
    }
    Ok(PatientRecord {
        hospital_id: hospital_id.into(),
        death30: flag(1)?,
        yrs_over_65: yrs,
        male: flag(3)?,
        renal_failure: flag(4)?,
        diabetes: flag(5)?,
        hypertension: flag(6)?,
        pvd: flag(7)?,
        prior_pci: flag(8)?,
        shock: flag(9)?,
        iabp: flag(10)?,
        ef_cat: EfCategory::parse(field(11)).ok_or_else(|| bad(11))?,
        mi_cat: MiCategory::parse(field(12)).ok_or_else(|| bad(12))?,
        status: Status::parse(field(13)).ok_or_else(|| bad(13))?,
    })
}

/// Serializes a cohort in the registry CSV layout. Reals use shortest
/// round-trip formatting, so `parse_csv(emit_csv(c)) == c`.
pub fn emit_csv(cohort: &Cohort) -> String {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    let b = |f: bool| if f { '1' } else { '0' };
    for r in cohort.records() {
        let id = crate::csv_field(&r.hospital_id.0);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            id,
            b(r.death30),
            r.yrs_over_65,
            b(r.male),
            b(r.renal_failure),
            b(r.diabetes),
            b(r.hypertension),
            b(r.pvd),
            b(r.prior_pci),
            b(r.shock),
            b(r.iabp),
            r.ef_cat.as_str(),
            r.mi_cat.as_str(),
            r.status.as_str(),
        );
    }
    out
}

pub fn write_csv(cohort: &Cohort, path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, emit_csv(cohort))
}
