//! NSL-KDD record parsing and feature encoding.
//!
//! Each line of `KDDTrain+.txt` / `KDDTest+.txt` holds 41 connection features,
//! the attack label and a difficulty score. Symbolic features are one-hot
//! encoded against categories seen at fit time; numeric features are min-max
//! scaled with the fitted ranges.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub const FEATURE_COUNT: usize = 41;
pub const FIELD_COUNT: usize = FEATURE_COUNT + 2;
pub const SYMBOLIC_POSITIONS: [usize; 3] = [1, 2, 3];
pub const NUMERIC_COUNT: usize = FEATURE_COUNT - SYMBOLIC_POSITIONS.len();
pub const PREPROCESSOR_FORMAT_VERSION: u32 = 1;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "duration",
    "protocol_type",
    "service",
    "flag",
    "src_bytes",
    "dst_bytes",
    "land",
    "wrong_fragment",
    "urgent",
    "hot",
    "num_failed_logins",
    "logged_in",
    "num_compromised",
    "root_shell",
    "su_attempted",
    "num_root",
    "num_file_creations",
    "num_shells",
    "num_access_files",
    "num_outbound_cmds",
    "is_host_login",
    "is_guest_login",
    "count",
    "srv_count",
    "serror_rate",
    "srv_serror_rate",
    "rerror_rate",
    "srv_rerror_rate",
    "same_srv_rate",
    "diff_srv_rate",
    "srv_diff_host_rate",
    "dst_host_count",
    "dst_host_srv_count",
    "dst_host_same_srv_rate",
    "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate",
    "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate",
    "dst_host_srv_serror_rate",
    "dst_host_rerror_rate",
    "dst_host_srv_rerror_rate",
];

fn is_symbolic(position: usize) -> bool {
    SYMBOLIC_POSITIONS.contains(&position)
}

/// One parsed NSL-KDD line.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    /// protocol_type, service, flag
    pub symbolic: [String; 3],
    /// The 38 numeric features in schema order.
    pub numeric: Vec<f64>,
    pub attack_label: String,
    pub difficulty: i64,
}

impl RawRecord {
    pub fn label(&self) -> u8 {
        binarize_label(&self.attack_label)
    }
}

/// 0 for `"normal"`, 1 for anything else.
pub fn binarize_label(attack_label: &str) -> u8 {
    u8::from(attack_label != "normal")
}

fn parse_line(line: &str, line_no: usize) -> Result<RawRecord> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != FIELD_COUNT {
        return Err(Error::Schema {
            line: line_no,
            expected: FIELD_COUNT,
            found: fields.len(),
        });
    }
    let mut symbolic: [String; 3] = Default::default();
    let mut numeric = Vec::with_capacity(NUMERIC_COUNT);
    let mut slot = 0;
    for (pos, raw) in fields[..FEATURE_COUNT].iter().enumerate() {
        if is_symbolic(pos) {
            if raw.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("empty symbolic field {}", FEATURE_NAMES[pos]),
                });
            }
            symbolic[slot] = raw.to_string();
            slot += 1;
        } else {
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("field {} is not numeric: {raw:?}", FEATURE_NAMES[pos]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("field {} is not finite", FEATURE_NAMES[pos]),
                });
            }
            numeric.push(v);
        }
    }
    let difficulty = fields[FEATURE_COUNT + 1]
        .parse()
        .map_err(|_| Error::Parse {
            line: line_no,
            message: format!(
                "difficulty is not an integer: {:?}",
                fields[FEATURE_COUNT + 1]
            ),
        })?;
    Ok(RawRecord {
        symbolic,
        numeric,
        attack_label: fields[FEATURE_COUNT].to_string(),
        difficulty,
    })
}

/// Parses comma-separated records, one per non-empty line. Line numbers in
/// errors are 1-based.
pub fn parse_records<R: BufRead>(source: R) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, idx + 1)?);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<RawRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub feature: String,
    /// Category names; the position is the one-hot index.
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericRange {
    pub min: f64,
    pub max: f64,
}

impl NumericRange {
    pub fn scale(&self, v: f64) -> f64 {
        let span = self.max - self.min;
        if span == 0.0 {
            0.0
        } else {
            (v - self.min) / span
        }
    }
}

/// Encoding state fitted on training records and reused at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessorState {
    pub format_version: u32,
    pub category_maps: Vec<CategoryMap>,
    pub numeric_features: Vec<String>,
    pub numeric_ranges: Vec<NumericRange>,
}

/// Encoded design matrix plus binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub x: Matrix,
    pub y: Vec<u8>,
    pub feature_names: Vec<String>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Rows with label 0.
    pub fn normals_only(&self) -> EncodedDataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.y[i] == 0).collect();
        EncodedDataset {
            x: self.x.select_rows(&idx),
            y: vec![0; idx.len()],
            feature_names: self.feature_names.clone(),
        }
    }
}

pub fn fit_preprocessor(train: &[RawRecord]) -> Result<PreprocessorState> {
    if train.is_empty() {
        return Err(Error::Empty("fit_preprocessor needs at least one record"));
    }
    let mut category_maps: Vec<CategoryMap> = SYMBOLIC_POSITIONS
        .iter()
        .map(|&p| CategoryMap {
            feature: FEATURE_NAMES[p].to_string(),
            categories: Vec::new(),
        })
        .collect();
    let mut seen: Vec<HashMap<&str, usize>> = vec![HashMap::new(); SYMBOLIC_POSITIONS.len()];
    let mut ranges = vec![
        NumericRange {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        };
        NUMERIC_COUNT
    ];
    for rec in train {
        for (k, value) in rec.symbolic.iter().enumerate() {
            let next = seen[k].len();
            if let std::collections::hash_map::Entry::Vacant(e) = seen[k].entry(value.as_str()) {
                e.insert(next);
                category_maps[k].categories.push(value.clone());
            }
        }
        for (r, &v) in ranges.iter_mut().zip(&rec.numeric) {
            r.min = r.min.min(v);
            r.max = r.max.max(v);
        }
    }
    let numeric_features = (0..FEATURE_COUNT)
        .filter(|&p| !is_symbolic(p))
        .map(|p| FEATURE_NAMES[p].to_string())
        .collect();
    Ok(PreprocessorState {
        format_version: PREPROCESSOR_FORMAT_VERSION,
        category_maps,
        numeric_features,
        numeric_ranges: ranges,
    })
}

impl PreprocessorState {
    /// Width of the encoded matrix.
    pub fn output_dim(&self) -> usize {
        self.category_maps
            .iter()
            .map(|m| m.categories.len())
            .sum::<usize>()
            + self.numeric_ranges.len()
    }

    /// Output column names, in schema order with one-hot blocks expanded in place.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.output_dim());
        let (mut sym, mut num) = (0, 0);
        for pos in 0..FEATURE_COUNT {
            if is_symbolic(pos) {
                let map = &self.category_maps[sym];
                names.extend(
                    map.categories
                        .iter()
                        .map(|c| format!("{}={}", map.feature, c)),
                );
                sym += 1;
            } else {
                names.push(self.numeric_features[num].clone());
                num += 1;
            }
        }
        names
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != PREPROCESSOR_FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "preprocessor format version {} (expected {PREPROCESSOR_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.category_maps.len() != SYMBOLIC_POSITIONS.len()
            || self.numeric_ranges.len() != NUMERIC_COUNT
            || self.numeric_features.len() != NUMERIC_COUNT
        {
            return Err(Error::Compatibility(
                "preprocessor does not match the NSL-KDD schema".into(),
            ));
        }
        if let Some(r) = self.numeric_ranges.iter().find(|r| !(r.min <= r.max)) {
            return Err(Error::Compatibility(format!(
                "numeric range with min > max: {r:?}"
            )));
        }
        Ok(())
    }

    pub fn transform(&self, records: &[RawRecord]) -> EncodedDataset {
        let lookups: Vec<HashMap<&str, usize>> = self
            .category_maps
            .iter()
            .map(|m| {
                m.categories
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (c.as_str(), i))
                    .collect()
            })
            .collect();
        let dim = self.output_dim();
        let mut x = Matrix::zeros(records.len(), dim);
        for (i, rec) in records.iter().enumerate() {
            let row = x.row_mut(i);
            let mut col = 0;
            let (mut sym, mut num) = (0, 0);
            for pos in 0..FEATURE_COUNT {
                if is_symbolic(pos) {
                    let width = self.category_maps[sym].categories.len();
                    // unseen category leaves the block at zero
                    if let Some(&k) = lookups[sym].get(rec.symbolic[sym].as_str()) {
                        row[col + k] = 1.0;
                    }
                    col += width;
                    sym += 1;
                } else {
                    row[col] = self.numeric_ranges[num].scale(rec.numeric[num]);
                    col += 1;
                    num += 1;
                }
            }
        }
        EncodedDataset {
            x,
            y: records.iter().map(RawRecord::label).collect(),
            feature_names: self.feature_names(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let state: PreprocessorState = serde_json::from_reader(BufReader::new(file))?;
        state.validate()?;
        Ok(state)
    }
}

pub fn transform(records: &[RawRecord], state: &PreprocessorState) -> EncodedDataset {
    state.transform(records)
}

/// Fraction of intrusion (label 1) and normal (label 0) rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub intrusion: f64,
    pub normal: f64,
}

pub fn dataset_stats(ds: &EncodedDataset) -> Result<ClassBalance> {
    class_balance(&ds.y)
}

pub fn class_balance(labels: &[u8]) -> Result<ClassBalance> {
    if labels.is_empty() {
        return Err(Error::Empty("dataset_stats on an empty dataset"));
    }
    let n = labels.len();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok(ClassBalance {
        intrusion: pos as f64 / n as f64,
        normal: (n - pos) as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "0,tcp,ftp_data,SF,491,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,0,2,2,0.00,0.00,0.00,0.00,1.00,0.00,0.00,150,25,0.17,0.03,0.17,0.00,0.00,0.00,0.05,0.00,normal,20";

    fn line_with(proto: &str, service: &str, duration: f64, label: &str) -> String {
        SAMPLE
            .replacen(
                "0,tcp,ftp_data",
                &format!("{duration},{proto},{service}"),
                1,
            )
            .replace("normal,20", &format!("{label},20"))
    }

    fn parse(text: &str) -> Vec<RawRecord> {
        parse_records(text.as_bytes()).unwrap()
    }

    #[test]
    fn parses_a_train_line() {
        let recs = parse(SAMPLE);
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(
            r.symbolic,
            ["tcp".to_string(), "ftp_data".into(), "SF".into()]
        );
        assert_eq!(r.numeric.len(), NUMERIC_COUNT);
        assert_eq!(r.numeric[1], 491.0);
        assert_eq!(r.attack_label, "normal");
        assert_eq!(r.difficulty, 20);
    }

    #[test]
    fn wrong_field_count_is_a_schema_error() {
        let short: String = SAMPLE.split(',').take(40).collect::<Vec<_>>().join(",");
        let text = format!("{SAMPLE}\n\n{short}\n");
        match parse_records(text.as_bytes()) {
            Err(Error::Schema { line, found, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(found, 40);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_is_a_parse_error_with_line() {
        let bad = SAMPLE.replacen("491", "4x1", 1);
        match parse_records(format!("{SAMPLE}\n{bad}").as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("src_bytes"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_binarization() {
        assert_eq!(binarize_label("normal"), 0);
        assert_eq!(binarize_label("neptune"), 1);
        assert_eq!(binarize_label(""), 1);
        assert_eq!(binarize_label("Normal"), 1);
    }

    #[test]
    fn fit_collects_categories_in_first_seen_order() {
        let text = [
            line_with("udp", "private", 0.0, "normal"),
            line_with("tcp", "http", 10.0, "neptune"),
            line_with("icmp", "ecr_i", 5.0, "smurf"),
            line_with("tcp", "http", 3.0, "normal"),
        ]
        .join("\n");
        let state = fit_preprocessor(&parse(&text)).unwrap();
        assert_eq!(
            state.category_maps[0].categories,
            vec!["udp", "tcp", "icmp"]
        );
        assert_eq!(
            state.numeric_ranges[0],
            NumericRange {
                min: 0.0,
                max: 10.0
            }
        );
        assert_eq!(state.output_dim(), 3 + 3 + 1 + NUMERIC_COUNT);
        assert!(fit_preprocessor(&[]).is_err());
    }

    #[test]
    fn transform_encodes_and_scales() {
        let train = parse(
            &[
                line_with("tcp", "http", 0.0, "normal"),
                line_with("udp", "private", 10.0, "neptune"),
            ]
            .join("\n"),
        );
        let state = fit_preprocessor(&train).unwrap();
        let ds = state.transform(&train);
        assert_eq!(ds.y, vec![0, 1]);
        let names = ds.feature_names.clone();
        assert_eq!(names[0], "duration");
        assert_eq!(names[1], "protocol_type=tcp");
        let col = |n: &str| names.iter().position(|x| x == n).unwrap();
        assert_eq!(ds.x[(0, col("duration"))], 0.0);
        assert_eq!(ds.x[(1, col("duration"))], 1.0);
        assert_eq!(ds.x[(1, col("protocol_type=udp"))], 1.0);
        // constant feature collapses to 0
        assert_eq!(ds.x[(1, col("src_bytes"))], 0.0);

        let test = parse(&line_with("tcp", "telnet", 20.0, "guess_passwd"));
        let t = state.transform(&test);
        assert_eq!(t.x.cols(), ds.x.cols());
        assert_eq!(t.x[(0, col("service=http"))], 0.0);
        assert_eq!(t.x[(0, col("service=private"))], 0.0);
        assert_eq!(t.x[(0, col("duration"))], 2.0);
    }

    #[test]
    fn stats_of_single_normal_record() {
        let state = fit_preprocessor(&parse(SAMPLE)).unwrap();
        let ds = state.transform(&parse(SAMPLE));
        assert_eq!(
            dataset_stats(&ds).unwrap(),
            ClassBalance {
                intrusion: 0.0,
                normal: 1.0
            }
        );
        assert!(class_balance(&[]).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let state = fit_preprocessor(&parse(SAMPLE)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.json");
        state.save(&path).unwrap();
        assert_eq!(PreprocessorState::load(&path).unwrap(), state);

        let mut bad = state.clone();
        bad.format_version = 99;
        assert!(matches!(bad.validate(), Err(Error::Compatibility(_))));
    }
}
