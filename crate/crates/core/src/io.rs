//! On-disk formats: CSV tables (UTF-8, header row, `.` decimals, empty cell
//! = absent) and pretty-printed JSON documents.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use csv::StringRecord;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::datamodel::DyadRecord;
use crate::fpca::LongitudinalSeries;
use crate::multiframe::FrameWeights;
use crate::workflow::EstimatorOutput;
use crate::{Error, Result};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn name(path: &Path) -> String {
    path.display().to_string()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { file: name(path), row: e.line(), message: e.to_string() })
}

/// A parsed CSV table with column lookup by name.
pub struct Table {
    file: String,
    columns: HashMap<String, usize>,
    pub headers: Vec<String>,
    /// `(line number, record)`; the header is line 1.
    pub rows: Vec<(usize, StringRecord)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let headers: Vec<String> =
            reader.headers().map_err(|e| csv_err(path, e))?.iter().map(|h| h.trim().to_string()).collect();
        let mut columns = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            if columns.insert(h.clone(), i).is_some() {
                return Err(Error::Schema { file: name(path), column: h.clone(), message: "duplicate column".into() });
            }
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            rows.push((line, rec));
        }
        Ok(Table { file: name(path), columns, headers, rows })
    }

    pub fn has(&self, column: &str) -> bool {
        self.columns.contains_key(column)
    }

    pub fn require(&self, column: &str) -> Result<usize> {
        self.columns.get(column).copied().ok_or_else(|| Error::Schema {
            file: self.file.clone(),
            column: column.to_string(),
            message: "required column is missing".into(),
        })
    }

    fn parse_err(&self, line: usize, column: &str, value: &str, what: &str) -> Error {
        Error::Parse { file: self.file.clone(), row: line, message: format!("column `{column}`: `{value}` is not {what}") }
    }

    fn cell<'a>(&self, rec: &'a StringRecord, column: &str) -> Option<&'a str> {
        self.columns.get(column).and_then(|&i| rec.get(i)).map(str::trim).filter(|s| !s.is_empty())
    }

    pub fn opt_f64(&self, line: usize, rec: &StringRecord, column: &str) -> Result<Option<f64>> {
        self.cell(rec, column)
            .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| self.parse_err(line, column, s, "a finite number")))
            .transpose()
    }

    pub fn f64(&self, line: usize, rec: &StringRecord, column: &str) -> Result<f64> {
        self.opt_f64(line, rec, column)?.ok_or_else(|| self.parse_err(line, column, "", "a finite number"))
    }

    pub fn opt_bool(&self, line: usize, rec: &StringRecord, column: &str) -> Result<Option<bool>> {
        self.cell(rec, column)
            .map(|s| match s {
                "1" | "true" | "TRUE" => Ok(true),
                "0" | "false" | "FALSE" => Ok(false),
                _ => Err(self.parse_err(line, column, s, "0/1")),
            })
            .transpose()
    }

    pub fn bool(&self, line: usize, rec: &StringRecord, column: &str) -> Result<bool> {
        self.opt_bool(line, rec, column)?.ok_or_else(|| self.parse_err(line, column, "", "0/1"))
    }

    pub fn opt_u32(&self, line: usize, rec: &StringRecord, column: &str) -> Result<Option<u32>> {
        self.cell(rec, column)
            .map(|s| s.parse::<u32>().map_err(|_| self.parse_err(line, column, s, "a non-negative integer")))
            .transpose()
    }

    pub fn string(&self, line: usize, rec: &StringRecord, column: &str) -> Result<String> {
        self.cell(rec, column).map(str::to_string).ok_or_else(|| self.parse_err(line, column, "", "a non-empty string"))
    }

    /// Number of columns named `prefix0`, `prefix1`, ... without gaps.
    fn indexed(&self, prefix: &str) -> usize {
        (0..).take_while(|j| self.has(&format!("{prefix}{j}"))).count()
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        kind => Error::Parse { file: name(path), row, message: format!("{kind:?}") },
    }
}

struct Writer {
    path: std::path::PathBuf,
    out: csv::Writer<Vec<u8>>,
}

impl Writer {
    fn new(path: &Path, headers: &[String]) -> Result<Writer> {
        let mut out = csv::Writer::from_writer(Vec::new());
        out.write_record(headers).map_err(|e| csv_err(path, e))?;
        Ok(Writer { path: path.to_path_buf(), out })
    }

    fn row(&mut self, cells: &[String]) -> Result<()> {
        self.out.write_record(cells).map_err(|e| csv_err(&self.path, e))
    }

    fn finish(self) -> Result<()> {
        let bytes = self.out.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        write_text(&self.path, &String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))?)
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

/// Writes `dyads.csv`. Phase-2 columns are always present and left empty for
/// records without validated values.
pub fn write_dyads(path: &Path, records: &[DyadRecord]) -> Result<()> {
    let q = records.iter().map(|r| r.z_star.len()).max().unwrap_or(0);
    let a = records.iter().map(|r| r.aux.len()).max().unwrap_or(0);
    let mut headers: Vec<String> = ["id", "y_star", "delta_star", "x_star"].map(String::from).to_vec();
    headers.extend((0..q).map(|j| format!("z_star{j}")));
    headers.extend((0..a).map(|j| format!("aux{j}")));
    headers.extend(["in_asthma_frame", "asthma_star", "validated", "wave_sampled", "y", "delta", "x"].map(String::from));
    headers.extend((0..q).map(|j| format!("z{j}")));
    headers.extend(["asthma", "gestation_days"].map(String::from));
    let mut w = Writer::new(path, &headers)?;
    for r in records {
        let mut cells = vec![r.id.clone(), num(r.y_star), flag(r.delta_star), num(r.x_star)];
        cells.extend((0..q).map(|j| opt(r.z_star.get(j).copied(), num)));
        cells.extend((0..a).map(|j| opt(r.aux.get(j).copied(), num)));
        cells.push(flag(r.in_asthma_frame));
        cells.push(opt(r.asthma_star, flag));
        cells.push(flag(r.validated));
        cells.push(opt(r.wave_sampled, |w| w.to_string()));
        cells.push(opt(r.y, num));
        cells.push(opt(r.delta, flag));
        cells.push(opt(r.x, num));
        cells.extend((0..q).map(|j| opt(r.z.as_ref().and_then(|z| z.get(j).copied()), num)));
        cells.push(opt(r.asthma, flag));
        cells.push(opt(r.gestation_days, num));
        w.row(&cells)?;
    }
    w.finish()
}

/// Reads `dyads.csv`. Only `id`, `y_star`, `delta_star` and `x_star` are
/// required; missing phase-2 columns mean nothing is validated yet.
pub fn read_dyads(path: &Path) -> Result<Vec<DyadRecord>> {
    let t = Table::read(path)?;
    for c in ["id", "y_star", "delta_star", "x_star"] {
        t.require(c)?;
    }
    let q = t.indexed("z_star");
    let a = t.indexed("aux");
    let mut out = Vec::with_capacity(t.rows.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (line, rec) in &t.rows {
        let line = *line;
        let id = t.string(line, rec, "id")?;
        if let Some(prev) = seen.insert(id.clone(), line) {
            return Err(Error::Parse { file: t.file.clone(), row: line, message: format!("duplicate id `{id}` (first on row {prev})") });
        }
        let z_star = (0..q).map(|j| t.f64(line, rec, &format!("z_star{j}"))).collect::<Result<Vec<_>>>()?;
        let mut r = DyadRecord::phase1(id, t.f64(line, rec, "y_star")?, t.bool(line, rec, "delta_star")?, t.f64(line, rec, "x_star")?, z_star);
        r.aux = (0..a).map(|j| t.f64(line, rec, &format!("aux{j}"))).collect::<Result<_>>()?;
        r.in_asthma_frame = t.opt_bool(line, rec, "in_asthma_frame")?.unwrap_or(false);
        r.asthma_star = t.opt_bool(line, rec, "asthma_star")?;
        r.wave_sampled = t.opt_u32(line, rec, "wave_sampled")?;
        r.y = t.opt_f64(line, rec, "y")?;
        r.delta = t.opt_bool(line, rec, "delta")?;
        r.x = t.opt_f64(line, rec, "x")?;
        let z: Vec<Option<f64>> = (0..q).map(|j| t.opt_f64(line, rec, &format!("z{j}"))).collect::<Result<_>>()?;
        r.z = if q > 0 && z.iter().all(Option::is_some) { Some(z.into_iter().flatten().collect()) } else { None };
        r.asthma = t.opt_bool(line, rec, "asthma")?;
        r.gestation_days = t.opt_f64(line, rec, "gestation_days")?;
        r.validated = t.opt_bool(line, rec, "validated")?.unwrap_or(false);
        r.check().map_err(|e| Error::Parse { file: t.file.clone(), row: line, message: e.to_string() })?;
        out.push(r);
    }
    Ok(out)
}

/// Writes `measurements.csv` (`subject_id,t_days,weight_kg`).
pub fn write_measurements(path: &Path, series: &[LongitudinalSeries]) -> Result<()> {
    let mut w = Writer::new(path, &["subject_id", "t_days", "weight_kg"].map(String::from))?;
    for s in series {
        for (t, v) in s.times.iter().zip(&s.values) {
            w.row(&[s.subject.clone(), num(*t), num(*v)])?;
        }
    }
    w.finish()
}

/// Reads `measurements.csv`; subjects keep their order of first appearance
/// and observations are sorted by time.
pub fn read_measurements(path: &Path) -> Result<Vec<LongitudinalSeries>> {
    let t = Table::read(path)?;
    for c in ["subject_id", "t_days", "weight_kg"] {
        t.require(c)?;
    }
    let mut order: Vec<String> = Vec::new();
    let mut obs: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for (line, rec) in &t.rows {
        let id = t.string(*line, rec, "subject_id")?;
        let point = (t.f64(*line, rec, "t_days")?, t.f64(*line, rec, "weight_kg")?);
        obs.entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push(point);
    }
    order
        .into_iter()
        .map(|id| {
            let mut pts = obs.remove(&id).unwrap_or_default();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (times, values) = pts.into_iter().unzip();
            LongitudinalSeries::new(id, times, values).map_err(Error::from)
        })
        .collect()
}

/// Writes a two-column `id,<value>` table.
pub fn write_values(path: &Path, value_column: &str, values: &BTreeMap<String, f64>) -> Result<()> {
    let mut w = Writer::new(path, &["id".to_string(), value_column.to_string()])?;
    for (id, v) in values {
        w.row(&[id.clone(), num(*v)])?;
    }
    w.finish()
}

pub fn read_values(path: &Path, value_column: &str) -> Result<BTreeMap<String, f64>> {
    let t = Table::read(path)?;
    t.require("id")?;
    t.require(value_column)?;
    let mut out = BTreeMap::new();
    for (line, rec) in &t.rows {
        let id = t.string(*line, rec, "id")?;
        if out.insert(id.clone(), t.f64(*line, rec, value_column)?).is_some() {
            return Err(Error::Parse { file: t.file.clone(), row: *line, message: format!("duplicate id `{id}`") });
        }
    }
    Ok(out)
}

/// Writes `combined_weights.csv`.
pub fn write_weights(path: &Path, w: &FrameWeights) -> Result<()> {
    let headers = ["record", "frame", "weight", "stratum", "cluster", "duplicated"].map(String::from);
    let mut out = Writer::new(path, &headers)?;
    for r in &w.rows {
        out.row(&[r.record.clone(), r.frame.tag().to_string(), num(r.weight), r.stratum.clone(), r.cluster.clone(), flag(r.duplicated)])?;
    }
    out.finish()
}

/// Coefficient table: one row per estimator and coefficient.
pub fn write_estimates(path: &Path, names: &[String], rows: &[EstimatorOutput]) -> Result<()> {
    let headers = ["estimator", "coefficient", "beta", "se", "rows"].map(String::from);
    let mut w = Writer::new(path, &headers)?;
    for o in rows {
        for (j, n) in names.iter().enumerate() {
            w.row(&[o.estimator.name().to_string(), n.clone(), num(o.coefficients[j]), num(o.se[j]), o.rows.to_string()])?;
        }
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Phase2Values;

    fn records() -> Vec<DyadRecord> {
        let mut a = DyadRecord::phase1("d1", 2.5, true, 0.123456789012345, vec![5.1, 1.0]);
        a.in_asthma_frame = true;
        a.asthma_star = Some(false);
        a.mark_validated(
            3,
            &Phase2Values { y: 2.25, delta: true, x: 0.1 + 0.2, z: vec![5.0, 1.0], asthma: Some(true), gestation_days: 266.0 },
        );
        let b = DyadRecord::phase1("d2", 6.0, false, -0.5e-7, vec![4.9, 0.0]);
        vec![a, b]
    }

    #[test]
    fn dyads_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dyads.csv");
        write_dyads(&p, &records()).unwrap();
        assert_eq!(read_dyads(&p).unwrap(), records());
    }

    #[test]
    fn phase2_columns_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "id,y_star,delta_star,x_star,z_star0\na,1.5,0,0.2,3\n").unwrap();
        let r = read_dyads(&p).unwrap();
        assert_eq!(r[0].z_star, vec![3.0]);
        assert!(!r[0].validated && r[0].y.is_none());
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "id,y_star,delta_star,x_star\na,1.5,0,0.2\nb,abc,1,0.3\n").unwrap();
        let e = read_dyads(&p).unwrap_err();
        assert!(matches!(e, Error::Parse { row: 3, .. }), "{e}");
        assert!(e.to_string().contains("y_star"));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "id,y_star,x_star\na,1.5,0.2\n").unwrap();
        match read_dyads(&p).unwrap_err() {
            Error::Schema { column, .. } => assert_eq!(column, "delta_star"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn measurements_round_trip_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "subject_id,t_days,weight_kg\nb,10,70\na,5,60\nb,-3,69.5\n").unwrap();
        let s = read_measurements(&p).unwrap();
        assert_eq!(s[0].subject, "b");
        assert_eq!(s[0].times, vec![-3.0, 10.0]);
        let q = dir.path().join("m2.csv");
        write_measurements(&q, &s).unwrap();
        assert_eq!(read_measurements(&q).unwrap(), s);
    }

    #[test]
    fn values_round_trip_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let v: BTreeMap<String, f64> = [("a".to_string(), 1.0 / 3.0), ("b".to_string(), -2.5e-300)].into();
        write_values(&p, "h", &v).unwrap();
        assert_eq!(read_values(&p, "h").unwrap(), v);
    }
}
