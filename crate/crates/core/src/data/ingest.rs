//! Reading and writing the on-disk stay format.
//!
//! ```text
//! <dir>/stays/index.csv        stay_id, admission_id, file
//! <dir>/stays/<file>           Hours, <feature columns...>
//! <dir>/notes.csv              admission_id, note_type, timestamp, text
//! <dir>/labels.csv             stay_id, ihm, <25 phenotype columns>
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::schema::IngestSchema;
use super::synthetic::PHENOTYPE_NAMES;
use super::{Labels, Note, NoteType, StayId, StayRecord, NUM_PHENOTYPES};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::substrate::Tensor;

pub const TIME_COLUMN: &str = "Hours";

/// Per-feature z-normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean/std over every timestep of `records`; a zero std becomes 1.
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a StayRecord> + Clone, num_features: usize) -> Result<Self> {
        let mut sum = vec![0.0; num_features];
        let mut n = 0usize;
        for r in records.clone() {
            for t in 0..r.timesteps() {
                for (f, v) in r.values.row(t).iter().enumerate() {
                    sum[f] += v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("cannot fit normalization on zero timesteps".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; num_features];
        for r in records {
            for t in 0..r.timesteps() {
                for (f, v) in r.values.row(t).iter().enumerate() {
                    sq[f] += (v - mean[f]) * (v - mean[f]);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, values: &mut Tensor) {
        let f = values.cols();
        for row in values.data_mut().chunks_mut(f) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Normalization {
    None,
    /// Fit on every ingested stay.
    FitAll,
    /// Fit on the listed stays only (the training split).
    FitOn(Vec<StayId>),
    Fixed(NormStats),
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub schema: IngestSchema,
    pub normalization: Normalization,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            schema: IngestSchema::benchmark(),
            normalization: Normalization::FitAll,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub records: Vec<StayRecord>,
    pub stats: Option<NormStats>,
    pub skipped_empty: usize,
}

#[derive(Debug, Deserialize)]
struct IndexRow {
    stay_id: u64,
    admission_id: u64,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct NoteRow {
    admission_id: u64,
    note_type: String,
    timestamp: f64,
    text: String,
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().flexible(false).from_reader(file))
}

/// Reads one stay table and resamples it onto the schema's uniform grid with
/// forward-fill imputation. Returns `None` for a table without rows.
fn read_stay(path: &Path, schema: &IngestSchema) -> Result<Option<(Vec<f64>, Tensor)>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut missing = Vec::new();
    let time_col = col(TIME_COLUMN);
    if time_col.is_none() {
        missing.push(TIME_COLUMN.to_string());
    }
    let feat_cols: Vec<Option<usize>> = schema.features.iter().map(|f| col(&f.name)).collect();
    for (f, c) in schema.features.iter().zip(&feat_cols) {
        if c.is_none() {
            missing.push(f.name.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Schema {
            file: path.display().to_string(),
            missing,
        });
    }
    let time_col = time_col.expect("checked above");

    let mut rows: Vec<(f64, Vec<Option<f64>>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let t: f64 = rec
            .get(time_col)
            .and_then(|s| s.trim().parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::Data(format!("{}: bad timestamp in row {:?}", path.display(), rec)))?;
        let cells = schema
            .features
            .iter()
            .zip(&feat_cols)
            .map(|(spec, c)| spec.encode(rec.get(c.expect("checked above")).unwrap_or("")))
            .collect();
        rows.push((t, cells));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let interval = schema.interval_hours;
    let bin = |t: f64| (t / interval).floor() as i64;
    let first = bin(rows[0].0);
    let last = bin(rows[rows.len() - 1].0);
    let n_bins = (last - first + 1) as usize;
    let nf = schema.num_features();
    let mut grid: Vec<Vec<Option<f64>>> = vec![vec![None; nf]; n_bins];
    for (t, cells) in &rows {
        let b = (bin(*t) - first) as usize;
        for (slot, v) in grid[b].iter_mut().zip(cells) {
            if v.is_some() {
                *slot = *v;
            }
        }
    }
    let mut prev: Vec<f64> = schema
        .features
        .iter()
        .map(|f| f.encode(&f.normal_value).expect("schema validated"))
        .collect();
    let mut data = Vec::with_capacity(n_bins * nf);
    for row in &grid {
        for (p, v) in prev.iter_mut().zip(row) {
            if let Some(v) = v {
                *p = *v;
            }
        }
        data.extend_from_slice(&prev);
    }
    let timestamps = (0..n_bins).map(|i| (first + i as i64) as f64 * interval).collect();
    Ok(Some((timestamps, Tensor::new(vec![n_bins, nf], data)?)))
}

fn read_labels(path: &Path) -> Result<HashMap<u64, Labels>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("stay_id") || headers.get(1).map(str::trim) != Some("ihm") {
        let missing = ["stay_id", "ihm"]
            .iter()
            .filter(|c| !headers.iter().any(|h| h.trim() == **c))
            .map(|c| c.to_string())
            .collect();
        return Err(Error::Schema {
            file: path.display().to_string(),
            missing,
        });
    }
    let parse_bool = |s: &str| -> Result<Option<bool>> {
        match s.trim() {
            "" => Ok(None),
            "0" => Ok(Some(false)),
            "1" => Ok(Some(true)),
            other => Err(Error::Data(format!("label value {other:?} is not 0/1"))),
        }
    };
    for rec in rdr.records() {
        let rec = rec?;
        let stay: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("bad stay_id {:?}", &rec[0])))?;
        let ihm = parse_bool(&rec[1])?;
        let ph: Vec<Option<bool>> = (2..rec.len()).map(|i| parse_bool(&rec[i])).collect::<Result<_>>()?;
        let phenotypes = if ph.len() == NUM_PHENOTYPES && ph.iter().all(Option::is_some) {
            Some(ph.into_iter().map(|v| v.expect("all present")).collect())
        } else {
            None
        };
        out.insert(stay, Labels { ihm, phenotypes });
    }
    Ok(out)
}

/// Loads every stay under `dir`, attaches notes by admission id and labels by
/// stay id, then normalizes. Output is sorted by stay id.
pub fn ingest(dir: &Path, opts: &IngestOptions) -> Result<Ingested> {
    opts.schema.validate()?;
    let stays_dir = dir.join("stays");
    let mut index: Vec<IndexRow> = Vec::new();
    for row in open_csv(&stays_dir.join("index.csv"))?.deserialize() {
        index.push(row?);
    }
    index.sort_by_key(|r| r.stay_id);
    for w in index.windows(2) {
        if w[0].stay_id == w[1].stay_id {
            return Err(Error::Data(format!("duplicate stay_id {}", w[0].stay_id)));
        }
    }

    let mut notes_by_adm: BTreeMap<u64, Vec<Note>> = BTreeMap::new();
    let notes_path = dir.join("notes.csv");
    if notes_path.exists() {
        for row in open_csv(&notes_path)?.deserialize() {
            let row: NoteRow = row?;
            notes_by_adm.entry(row.admission_id).or_default().push(Note {
                note_type: NoteType::parse(&row.note_type),
                timestamp: row.timestamp,
                text: row.text,
            });
        }
    }
    for notes in notes_by_adm.values_mut() {
        notes.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    let labels = read_labels(&dir.join("labels.csv"))?;

    let mut records = Vec::with_capacity(index.len());
    let mut skipped_empty = 0;
    for row in &index {
        match read_stay(&stays_dir.join(&row.file), &opts.schema)? {
            None => skipped_empty += 1,
            Some((timestamps, values)) => records.push(StayRecord {
                stay_id: StayId(row.stay_id),
                admission_id: row.admission_id,
                timestamps,
                values,
                notes: notes_by_adm.get(&row.admission_id).cloned().unwrap_or_default(),
                labels: labels.get(&row.stay_id).cloned().unwrap_or_default(),
            }),
        }
    }
    if skipped_empty > 0 {
        log::warn!("skipped {skipped_empty} stays without measurement rows");
    }

    let nf = opts.schema.num_features();
    let stats = match &opts.normalization {
        Normalization::None => None,
        Normalization::FitAll => Some(NormStats::fit(&records, nf)?),
        Normalization::FitOn(ids) => {
            let set: std::collections::HashSet<_> = ids.iter().collect();
            Some(NormStats::fit(records.iter().filter(|r| set.contains(&r.stay_id)), nf)?)
        }
        Normalization::Fixed(s) => Some(s.clone()),
    };
    if let Some(s) = &stats {
        if s.mean.len() != nf {
            return Err(Error::Config(format!("normalization has {} features, schema {nf}", s.mean.len())));
        }
        for r in &mut records {
            s.apply(&mut r.values);
        }
    }
    Ok(Ingested {
        records,
        stats,
        skipped_empty,
    })
}

/// Writes records in the on-disk format. Each measurement cell is blanked
/// with probability `missing_rate` (the first row is always complete).
pub fn write_dataset(
    dir: &Path,
    records: &[StayRecord],
    schema: &IngestSchema,
    missing_rate: f64,
    rng: &mut Rng,
) -> Result<()> {
    let stays_dir = dir.join("stays");
    std::fs::create_dir_all(&stays_dir).map_err(|e| Error::io(&stays_dir, e))?;
    let csv_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&p, io),
            other => Error::Data(format!("{}: {other:?}", p.display())),
        }
    };

    let index_path = stays_dir.join("index.csv");
    let mut index = csv::Writer::from_path(&index_path).map_err(csv_err(&index_path))?;
    index.write_record(["stay_id", "admission_id", "file"])?;
    for r in records {
        let file = format!("{}.csv", r.stay_id);
        index.write_record([r.stay_id.to_string(), r.admission_id.to_string(), file.clone()])?;
        let path = stays_dir.join(&file);
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        let mut header = vec![TIME_COLUMN.to_string()];
        header.extend(schema.features.iter().map(|f| f.name.clone()));
        w.write_record(&header)?;
        for t in 0..r.timesteps() {
            let mut row = vec![format!("{}", r.timestamps[t])];
            for (spec, &v) in schema.features.iter().zip(r.values.row(t)) {
                let blank = t > 0 && missing_rate > 0.0 && rng.gen::<f64>() < missing_rate;
                row.push(if blank { String::new() } else { spec.decode(v) });
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;

    let notes_path = dir.join("notes.csv");
    let mut w = csv::Writer::from_path(&notes_path).map_err(csv_err(&notes_path))?;
    for r in records {
        for n in &r.notes {
            w.serialize(NoteRow {
                admission_id: r.admission_id,
                note_type: n.note_type.to_string(),
                timestamp: n.timestamp,
                text: n.text.clone(),
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(&notes_path, e))?;

    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path).map_err(csv_err(&labels_path))?;
    let mut header = vec!["stay_id".to_string(), "ihm".to_string()];
    header.extend(PHENOTYPE_NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    let b = |v: Option<bool>| v.map(|x| if x { "1" } else { "0" }).unwrap_or("").to_string();
    for r in records {
        let mut row = vec![r.stay_id.to_string(), b(r.labels.ihm)];
        match &r.labels.phenotypes {
            Some(p) => row.extend(p.iter().map(|&x| b(Some(x)))),
            None => row.extend(std::iter::repeat(String::new()).take(NUM_PHENOTYPES)),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::seed;

    fn small_schema() -> IngestSchema {
        IngestSchema::from_toml_str(
            r#"
interval_hours = 1.0
[[features]]
name = "Heart Rate"
kind = "continuous"
normal_value = "86"
[[features]]
name = "Glascow coma scale eye opening"
kind = "categorical"
categories = ["1 No Response", "2 To pain", "3 To speech", "4 Spontaneously"]
normal_value = "4 Spontaneously"
"#,
        )
        .unwrap()
    }

    fn write(dir: &Path, stay_csv: &str) {
        std::fs::create_dir_all(dir.join("stays")).unwrap();
        std::fs::write(dir.join("stays/index.csv"), "stay_id,admission_id,file\n5,50,5.csv\n6,60,6.csv\n").unwrap();
        std::fs::write(dir.join("stays/5.csv"), stay_csv).unwrap();
        std::fs::write(dir.join("stays/6.csv"), "Hours,Heart Rate,Glascow coma scale eye opening\n").unwrap();
        std::fs::write(
            dir.join("notes.csv"),
            "admission_id,note_type,timestamp,text\n50,Nursing,2.0,late\n50,Echo,0.5,\"early, with comma\"\n",
        )
        .unwrap();
    }

    #[test]
    fn forward_fill_and_normal_fallback() {
        let dir = tempfile::tempdir().unwrap();
        // hour 1 is absent; eye opening is never observed
        write(dir.path(), "Hours,Heart Rate,Glascow coma scale eye opening\n0.2,90,\n2.7,110,\n0.9,95,\n");
        let opts = IngestOptions { schema: small_schema(), normalization: Normalization::None };
        let out = ingest(dir.path(), &opts).unwrap();
        assert_eq!(out.skipped_empty, 1);
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert_eq!(r.timestamps, vec![0.0, 1.0, 2.0]);
        // last value within a bin wins (0.9 after 0.2); gap takes the previous row
        assert_eq!(r.values.data(), &[95.0, 3.0, 95.0, 3.0, 110.0, 3.0]);
        assert_eq!(r.notes.iter().map(|n| n.timestamp).collect::<Vec<_>>(), vec![0.5, 2.0]);
        assert_eq!(r.notes[0].text, "early, with comma");

        let out = ingest(dir.path(), &IngestOptions { schema: small_schema(), normalization: Normalization::FitAll })
            .unwrap();
        let v = &out.records[0].values;
        // constant (imputed) column normalizes to exactly zero
        assert!((0..3).all(|t| v.row(t)[1] == 0.0));
    }

    #[test]
    fn missing_columns_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "Hours,Heart Rate\n0,90\n");
        let err = ingest(dir.path(), &IngestOptions { schema: small_schema(), normalization: Normalization::None })
            .unwrap_err();
        match err {
            Error::Schema { missing, .. } => assert_eq!(missing, vec!["Glascow coma scale eye opening".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ingesting_normalized_output_is_idempotent() {
        let mut rng = seed::stream(11, "ingest", 0);
        let raw = generate_synthetic(6, &mut rng, &SyntheticConfig::default()).unwrap();
        let schema = IngestSchema::benchmark();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &raw, &schema, 0.2, &mut rng).unwrap();
        let first = ingest(dir.path(), &IngestOptions::default()).unwrap();

        let again = tempfile::tempdir().unwrap();
        write_dataset(again.path(), &first.records, &schema, 0.0, &mut rng).unwrap();
        let opts = IngestOptions { schema, normalization: Normalization::None };
        let second = ingest(again.path(), &opts).unwrap();
        assert_eq!(second.records, first.records);
    }
}
