//! Per-source CSV parsing, alignment on (country, commodity, month), and
//! warning-label files. A row survives the join only when every source has a
//! value for its key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default feature layout: monthly table of seven columns.
pub const DEFAULT_FEATURES: [&str; 7] = [
    "proteus_index",
    "local_price",
    "global_price_index",
    "harvest_quantity",
    "outlook_demand",
    "futures_price",
    "ifs_indicator",
];

/// The two columns windowing treats as time-series histories.
pub const PRICE_COLUMN: &str = "local_price";
pub const FUTURES_COLUMN: &str = "futures_price";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("column {column:?} missing from {file} header")]
    MissingColumn { file: String, column: String },
    #[error("{file} row {row}: unparseable date {cell:?}")]
    BadDate {
        file: String,
        row: usize,
        cell: String,
    },
    #[error("{file} row {row}: unparseable number {cell:?}")]
    BadNumber {
        file: String,
        row: usize,
        cell: String,
    },
    #[error("{file} row {row}: duplicate key {key}")]
    DuplicateKey {
        file: String,
        row: usize,
        key: ObservationKey,
    },
    #[error("{file} row {row}: {reason}")]
    BadKey {
        file: String,
        row: usize,
        reason: String,
    },
    #[error("no overlap across sources; per-source key counts: {0:?}")]
    NoOverlap(Vec<(String, usize)>),
    #[error("{given} sources given for {expected} feature names")]
    SourceCountMismatch { given: usize, expected: usize },
    #[error("{file} row {row}: unknown severity {cell:?} (expected none/moderate/high)")]
    UnknownSeverity {
        file: String,
        row: usize,
        cell: String,
    },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("duplicate feature name {0:?}")]
    DuplicateFeature(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Calendar month with validated fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Month {
    pub year: i32,
    pub month: u8,
}

impl Month {
    pub fn new(year: i32, month: u8) -> Result<Self, String> {
        if !(1..=12).contains(&month) {
            return Err(format!("month-of-year {month} out of 1..12"));
        }
        if !(1900..=2100).contains(&year) {
            return Err(format!("year {year} out of 1900..2100"));
        }
        Ok(Self { year, month })
    }

    /// Months elapsed since 1900-01; total ordering and arithmetic basis.
    pub fn index(&self) -> i64 {
        (self.year as i64) * 12 + (self.month as i64 - 1)
    }

    pub fn plus(&self, months: i64) -> Result<Month, String> {
        let idx = self.index() + months;
        let year = idx.div_euclid(12);
        let month = idx.rem_euclid(12) + 1;
        Month::new(year as i32, month as u8)
    }

    pub fn months_since(&self, earlier: Month) -> i64 {
        self.index() - earlier.index()
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Accepted date spellings for source files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DateFormat {
    #[serde(rename = "YYYY-MM")]
    YearMonth,
    #[serde(rename = "YYYY-MM-DD")]
    YearMonthDay,
    #[serde(rename = "MM/YYYY")]
    MonthSlashYear,
}

impl DateFormat {
    pub fn parse(&self, cell: &str) -> Option<Month> {
        let cell = cell.trim();
        let (y, m) = match self {
            DateFormat::YearMonth => {
                let (y, m) = cell.split_once('-')?;
                (y, m)
            }
            DateFormat::YearMonthDay => {
                let mut it = cell.splitn(3, '-');
                let y = it.next()?;
                let m = it.next()?;
                let d = it.next()?;
                if d.is_empty() {
                    return None;
                }
                (y, m)
            }
            DateFormat::MonthSlashYear => {
                let (m, y) = cell.split_once('/')?;
                (y, m)
            }
        };
        Month::new(y.parse().ok()?, m.parse().ok()?).ok()
    }

    /// Try all accepted spellings in order; used where the format is not
    /// declared (warning-label files).
    pub fn parse_any(cell: &str) -> Option<Month> {
        [
            DateFormat::YearMonth,
            DateFormat::YearMonthDay,
            DateFormat::MonthSlashYear,
        ]
        .iter()
        .find_map(|f| f.parse(cell))
    }
}

/// (country, commodity, month) triple identifying one observation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObservationKey {
    pub country: String,
    pub commodity: String,
    pub month: Month,
}

impl ObservationKey {
    pub fn new(country: &str, commodity: &str, month: Month) -> Result<Self, String> {
        let country = country.trim().to_uppercase();
        let commodity = commodity.trim().to_uppercase();
        if country.is_empty() {
            return Err("empty country".into());
        }
        if commodity.is_empty() {
            return Err("empty commodity".into());
        }
        Ok(Self {
            country,
            commodity,
            month,
        })
    }

    /// Same series, shifted in time.
    pub fn at(&self, month: Month) -> ObservationKey {
        ObservationKey {
            country: self.country.clone(),
            commodity: self.commodity.clone(),
            month,
        }
    }
}

impl fmt::Display for ObservationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.country, self.commodity, self.month)
    }
}

/// Cadence of a source; annual values are forward-filled across the months
/// of their year before joining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    #[default]
    Monthly,
    Annual,
}

/// Column mapping for one CSV source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceSchema {
    pub source_name: String,
    pub country_column: String,
    pub commodity_column: String,
    pub date_column: String,
    pub value_column: String,
    pub date_format: DateFormat,
    #[serde(default)]
    pub frequency: Frequency,
}

impl SourceSchema {
    pub fn validate(&self) -> Result<(), IngestError> {
        let keys = [
            &self.country_column,
            &self.commodity_column,
            &self.date_column,
        ];
        if keys.contains(&&self.value_column) {
            return Err(IngestError::InvalidSchema(format!(
                "value column {:?} collides with a key column",
                self.value_column
            )));
        }
        Ok(())
    }
}

/// One source's points after parsing; keys unique, values finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub source_name: String,
    pub points: BTreeMap<ObservationKey, f64>,
}

impl RawSeries {
    /// Canonical CSV dump (country,commodity,month,value); loading it back
    /// under a matching schema reproduces the point set.
    pub fn write_csv(&self, path: &Path) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["country", "commodity", "month", "value"])?;
        for (key, value) in &self.points {
            w.write_record([
                key.country.as_str(),
                key.commodity.as_str(),
                &key.month.to_string(),
                &value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn canonical_schema(name: &str) -> SourceSchema {
        SourceSchema {
            source_name: name.to_string(),
            country_column: "country".into(),
            commodity_column: "commodity".into(),
            date_column: "month".into(),
            value_column: "value".into(),
            date_format: DateFormat::YearMonth,
            frequency: Frequency::Monthly,
        }
    }
}

/// Aligned monthly rows of n feature columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub feature_names: Vec<String>,
    pub rows: BTreeMap<ObservationKey, Vec<f64>>,
}

impl FeatureTable {
    pub fn width(&self) -> usize {
        self.feature_names.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Distinct (country, commodity) pairs in row order.
    pub fn series_keys(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for key in self.rows.keys() {
            let pair = (key.country.clone(), key.commodity.clone());
            if out.last() != Some(&pair) {
                out.push(pair);
            }
        }
        out.dedup();
        out
    }

    /// Months and values of one column for one series, in time order.
    pub fn series_column(&self, country: &str, commodity: &str, col: usize) -> Vec<(Month, f64)> {
        self.rows
            .iter()
            .filter(|(k, _)| k.country == country && k.commodity == commodity)
            .map(|(k, v)| (k.month, v[col]))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["country".to_string(), "commodity".into(), "month".into()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for (key, values) in &self.rows {
            let mut record = vec![
                key.country.clone(),
                key.commodity.clone(),
                key.month.to_string(),
            ];
            record.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read back a table written by `write_csv`.
    pub fn read_csv(path: &Path) -> Result<FeatureTable, IngestError> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let cols: Vec<String> = header.iter().map(str::to_string).collect();
        if cols.len() < 4 || cols[0] != "country" || cols[1] != "commodity" || cols[2] != "month" {
            return Err(IngestError::InvalidSchema(
                "table CSV must start with country,commodity,month".into(),
            ));
        }
        let feature_names: Vec<String> = cols[3..].to_vec();
        let source = path.display().to_string();
        let mut rows = BTreeMap::new();
        for (i, record) in r.records().enumerate() {
            let record = record?;
            let row = i + 2;
            let month = DateFormat::parse_any(&record[2]).ok_or_else(|| IngestError::BadDate {
                file: source.clone(),
                row,
                cell: record[2].to_string(),
            })?;
            let key = ObservationKey::new(&record[0], &record[1], month).map_err(|reason| {
                IngestError::BadKey {
                    file: source.clone(),
                    row,
                    reason,
                }
            })?;
            let mut values = Vec::with_capacity(feature_names.len());
            for cell in record.iter().skip(3) {
                values.push(parse_finite(cell).ok_or_else(|| IngestError::BadNumber {
                    file: source.clone(),
                    row,
                    cell: cell.to_string(),
                })?);
            }
            if rows.insert(key.clone(), values).is_some() {
                return Err(IngestError::DuplicateKey {
                    file: source,
                    row,
                    key,
                });
            }
        }
        Ok(FeatureTable {
            feature_names,
            rows,
        })
    }
}

/// Warning severity of one observation month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarningLabel {
    None,
    Moderate,
    High,
}

impl WarningLabel {
    pub const ALL: [WarningLabel; 3] = [
        WarningLabel::None,
        WarningLabel::Moderate,
        WarningLabel::High,
    ];

    pub fn class_index(&self) -> usize {
        match self {
            WarningLabel::None => 0,
            WarningLabel::Moderate => 1,
            WarningLabel::High => 2,
        }
    }

    pub fn from_class_index(idx: usize) -> Option<WarningLabel> {
        Self::ALL.get(idx).copied()
    }

    pub fn parse(s: &str) -> Option<WarningLabel> {
        match s.trim().to_lowercase().as_str() {
            "none" => Some(WarningLabel::None),
            "moderate" => Some(WarningLabel::Moderate),
            "high" => Some(WarningLabel::High),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WarningLabel::None => "none",
            WarningLabel::Moderate => "moderate",
            WarningLabel::High => "high",
        }
    }
}

impl fmt::Display for WarningLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labels keyed by observation; absent keys mean `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WarningLabelSet {
    pub labels: BTreeMap<ObservationKey, WarningLabel>,
}

impl WarningLabelSet {
    pub fn get(&self, key: &ObservationKey) -> WarningLabel {
        self.labels.get(key).copied().unwrap_or(WarningLabel::None)
    }

    pub fn insert(&mut self, key: ObservationKey, label: WarningLabel) {
        if label == WarningLabel::None {
            self.labels.remove(&key);
        } else {
            self.labels.insert(key, label);
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["country", "commodity", "month", "severity"])?;
        for (key, label) in &self.labels {
            w.write_record([
                key.country.as_str(),
                key.commodity.as_str(),
                &key.month.to_string(),
                label.as_str(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_finite(cell: &str) -> Option<f64> {
    let v: f64 = cell.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

/// Parse one CSV source under its schema. Annual sources are forward-filled
/// to the months of their observation year after parsing.
pub fn load_source(path: &Path, schema: &SourceSchema) -> Result<RawSeries, IngestError> {
    schema.validate()?;
    let file = File::open(path)?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, IngestError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn {
                file: schema.source_name.clone(),
                column: name.to_string(),
            })
    };
    let c_country = col(&schema.country_column)?;
    let c_commodity = col(&schema.commodity_column)?;
    let c_date = col(&schema.date_column)?;
    let c_value = col(&schema.value_column)?;

    let mut points = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2; // 1-based, after the header
        let date_cell = record.get(c_date).unwrap_or("");
        let month = schema
            .date_format
            .parse(date_cell)
            .ok_or_else(|| IngestError::BadDate {
                file: schema.source_name.clone(),
                row,
                cell: date_cell.to_string(),
            })?;
        let key = ObservationKey::new(
            record.get(c_country).unwrap_or(""),
            record.get(c_commodity).unwrap_or(""),
            month,
        )
        .map_err(|reason| IngestError::BadKey {
            file: schema.source_name.clone(),
            row,
            reason,
        })?;
        let value_cell = record.get(c_value).unwrap_or("");
        let value = parse_finite(value_cell).ok_or_else(|| IngestError::BadNumber {
            file: schema.source_name.clone(),
            row,
            cell: value_cell.to_string(),
        })?;
        if points.insert(key.clone(), value).is_some() {
            return Err(IngestError::DuplicateKey {
                file: schema.source_name.clone(),
                row,
                key,
            });
        }
    }

    let points = match schema.frequency {
        Frequency::Monthly => points,
        Frequency::Annual => forward_fill_within_year(points),
    };
    Ok(RawSeries {
        source_name: schema.source_name.clone(),
        points,
    })
}

/// For each (series, year): carry every observation forward to the months of
/// that year until the next observation.
fn forward_fill_within_year(
    points: BTreeMap<ObservationKey, f64>,
) -> BTreeMap<ObservationKey, f64> {
    let mut filled = BTreeMap::new();
    // ascending key order means a later observation in the same year
    // overwrites the earlier fill from its month onward
    for (key, value) in points {
        for m in key.month.month..=12 {
            let month = Month::new(key.month.year, m).expect("valid month range");
            filled.insert(key.at(month), value);
        }
    }
    filled
}

/// Keep exactly the keys present in every source; column order follows
/// `feature_names`.
pub fn join_complete(
    sources: &[RawSeries],
    feature_names: &[String],
) -> Result<FeatureTable, IngestError> {
    if sources.len() != feature_names.len() || sources.is_empty() {
        return Err(IngestError::SourceCountMismatch {
            given: sources.len(),
            expected: feature_names.len(),
        });
    }
    let mut seen = BTreeSet::new();
    for name in feature_names {
        if !seen.insert(name) {
            return Err(IngestError::DuplicateFeature(name.clone()));
        }
    }

    let mut common: BTreeSet<ObservationKey> = sources[0].points.keys().cloned().collect();
    for source in &sources[1..] {
        common.retain(|k| source.points.contains_key(k));
    }
    if common.is_empty() {
        return Err(IngestError::NoOverlap(
            sources
                .iter()
                .map(|s| (s.source_name.clone(), s.points.len()))
                .collect(),
        ));
    }

    let mut rows = BTreeMap::new();
    for key in common {
        let values: Vec<f64> = sources.iter().map(|s| s.points[&key]).collect();
        rows.insert(key, values);
    }
    Ok(FeatureTable {
        feature_names: feature_names.to_vec(),
        rows,
    })
}

/// Parse a warning-label CSV with columns country,commodity,month,severity.
pub fn load_warnings(path: &Path) -> Result<WarningLabelSet, IngestError> {
    let source = path.display().to_string();
    let file = File::open(path)?;
    let mut reader = csv::Reader::from_reader(file);
    let header = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, IngestError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn {
                file: source.clone(),
                column: name.to_string(),
            })
    };
    let c_country = col("country")?;
    let c_commodity = col("commodity")?;
    let c_month = col("month")?;
    let c_severity = col("severity")?;

    let mut set = WarningLabelSet::default();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let month_cell = record.get(c_month).unwrap_or("");
        let month = DateFormat::parse_any(month_cell).ok_or_else(|| IngestError::BadDate {
            file: source.clone(),
            row,
            cell: month_cell.to_string(),
        })?;
        let key = ObservationKey::new(
            record.get(c_country).unwrap_or(""),
            record.get(c_commodity).unwrap_or(""),
            month,
        )
        .map_err(|reason| IngestError::BadKey {
            file: source.clone(),
            row,
            reason,
        })?;
        let sev_cell = record.get(c_severity).unwrap_or("");
        let label = WarningLabel::parse(sev_cell).ok_or_else(|| IngestError::UnknownSeverity {
            file: source.clone(),
            row,
            cell: sev_cell.to_string(),
        })?;
        set.insert(key, label);
    }
    Ok(set)
}

/// Emit a one-line description of the overlap failure, with key counts.
pub fn describe_no_overlap(counts: &[(String, usize)]) -> String {
    let parts: Vec<String> = counts.iter().map(|(n, c)| format!("{n}={c}")).collect();
    format!("no complete samples across sources ({})", parts.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;
    use tempfile::NamedTempFile;

    fn write_temp(contents: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn schema(name: &str) -> SourceSchema {
        RawSeries::canonical_schema(name)
    }

    fn key(country: &str, commodity: &str, year: i32, month: u8) -> ObservationKey {
        ObservationKey::new(country, commodity, Month::new(year, month).unwrap()).unwrap()
    }

    #[test]
    fn load_source_maps_rows_directly() {
        let f = write_temp("country,commodity,month,value\nNGA,MAIZE,2020-03,152.4\n");
        let series = load_source(f.path(), &schema("prices")).unwrap();
        assert_eq!(series.points.len(), 1);
        assert_eq!(series.points[&key("NGA", "MAIZE", 2020, 3)], 152.4);
    }

    #[test]
    fn load_source_header_only_is_empty() {
        let f = write_temp("country,commodity,month,value\n");
        let series = load_source(f.path(), &schema("prices")).unwrap();
        assert!(series.points.is_empty());
    }

    #[test]
    fn load_source_rejects_month_13() {
        let f = write_temp("country,commodity,month,value\nNGA,MAIZE,2020-13,1.0\n");
        assert!(matches!(
            load_source(f.path(), &schema("prices")),
            Err(IngestError::BadDate { .. })
        ));
    }

    #[test]
    fn load_source_rejects_missing_column_bad_number_duplicate() {
        let f = write_temp("country,commodity,when,value\nNGA,MAIZE,2020-01,1\n");
        assert!(matches!(
            load_source(f.path(), &schema("prices")),
            Err(IngestError::MissingColumn { .. })
        ));

        let f = write_temp("country,commodity,month,value\nNGA,MAIZE,2020-01,abc\n");
        assert!(matches!(
            load_source(f.path(), &schema("prices")),
            Err(IngestError::BadNumber { .. })
        ));

        let f = write_temp("country,commodity,month,value\nNGA,MAIZE,2020-01,NaN\n");
        assert!(matches!(
            load_source(f.path(), &schema("prices")),
            Err(IngestError::BadNumber { .. })
        ));

        let f =
            write_temp("country,commodity,month,value\nNGA,MAIZE,2020-01,1\nnga,maize,2020-01,2\n");
        assert!(matches!(
            load_source(f.path(), &schema("prices")),
            Err(IngestError::DuplicateKey { .. })
        ));
    }

    #[test]
    fn load_source_parses_all_date_formats_and_quoting() {
        let mut s = schema("a");
        s.date_format = DateFormat::YearMonthDay;
        let f = write_temp("country,commodity,month,value\n\"NGA\",\"MA,IZE\",2020-03-15,7\n");
        let series = load_source(f.path(), &s).unwrap();
        assert_eq!(series.points[&key("NGA", "MA,IZE", 2020, 3)], 7.0);

        let mut s = schema("b");
        s.date_format = DateFormat::MonthSlashYear;
        let f = write_temp("country,commodity,month,value\nNGA,MAIZE,03/2020,8\n");
        let series = load_source(f.path(), &s).unwrap();
        assert_eq!(series.points[&key("NGA", "MAIZE", 2020, 3)], 8.0);
    }

    #[test]
    fn annual_sources_forward_fill_their_year() {
        let mut s = schema("harvest");
        s.frequency = Frequency::Annual;
        let f = write_temp(
            "country,commodity,month,value\nNGA,MAIZE,2020-01,10\nNGA,MAIZE,2020-07,20\n",
        );
        let series = load_source(f.path(), &s).unwrap();
        assert_eq!(series.points.len(), 12);
        assert_eq!(series.points[&key("NGA", "MAIZE", 2020, 1)], 10.0);
        assert_eq!(series.points[&key("NGA", "MAIZE", 2020, 6)], 10.0);
        assert_eq!(series.points[&key("NGA", "MAIZE", 2020, 7)], 20.0);
        assert_eq!(series.points[&key("NGA", "MAIZE", 2020, 12)], 20.0);
    }

    #[test]
    fn join_keeps_exact_intersection() {
        let mk = |name: &str, months: &[u8]| RawSeries {
            source_name: name.to_string(),
            points: months
                .iter()
                .map(|&m| (key("NGA", "MAIZE", 2020, m), m as f64))
                .collect(),
        };
        let a = mk("a", &[1, 2, 3]);
        let b = mk("b", &[2, 3, 4]);
        let table = join_complete(&[a, b], &["fa".to_string(), "fb".to_string()]).unwrap();
        let months: Vec<u8> = table.rows.keys().map(|k| k.month.month).collect();
        assert_eq!(months, vec![2, 3]);
        for row in table.rows.values() {
            assert_eq!(row.len(), 2);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn join_with_empty_source_is_no_overlap() {
        let a = RawSeries {
            source_name: "a".into(),
            points: [(key("NGA", "MAIZE", 2020, 1), 1.0)].into_iter().collect(),
        };
        let b = RawSeries {
            source_name: "b".into(),
            points: BTreeMap::new(),
        };
        let err = join_complete(&[a, b], &["fa".to_string(), "fb".to_string()]).unwrap_err();
        match err {
            IngestError::NoOverlap(counts) => {
                assert_eq!(counts, vec![("a".to_string(), 1), ("b".to_string(), 0)]);
            }
            other => panic!("expected NoOverlap, got {other:?}"),
        }
    }

    #[test]
    fn join_matches_brute_force_intersection_on_random_fixtures() {
        // 7 sources over 2015-01..2024-12 with random deletions, checked
        // against an independent set-intersection oracle
        let mut rng = crate::numerics::RandomSource::new(20240915);
        for trial in 0..100 {
            let all_months: Vec<Month> = (0..120)
                .map(|i| Month::new(2015 + i / 12, (i % 12 + 1) as u8).unwrap())
                .collect();
            let deletions = 3 + (trial % 5);
            let mut sources = Vec::new();
            let mut names = Vec::new();
            let mut oracle_sets: Vec<BTreeSet<ObservationKey>> = Vec::new();
            for s in 0..7 {
                let mut months = all_months.clone();
                for _ in 0..deletions {
                    if !months.is_empty() {
                        let idx = rng.below(months.len());
                        months.remove(idx);
                    }
                }
                let points: BTreeMap<ObservationKey, f64> = months
                    .iter()
                    .map(|&m| (key("NGA", "MAIZE", m.year, m.month), 1.0))
                    .collect();
                oracle_sets.push(points.keys().cloned().collect());
                sources.push(RawSeries {
                    source_name: format!("s{s}"),
                    points,
                });
                names.push(format!("f{s}"));
            }
            let mut expected = oracle_sets[0].clone();
            for set in &oracle_sets[1..] {
                expected = expected.intersection(set).cloned().collect();
            }
            match join_complete(&sources, &names) {
                Ok(table) => {
                    let got: BTreeSet<ObservationKey> = table.rows.keys().cloned().collect();
                    assert_eq!(got, expected, "trial {trial}");
                }
                Err(IngestError::NoOverlap(_)) => assert!(expected.is_empty(), "trial {trial}"),
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
    }

    #[test]
    fn raw_series_csv_roundtrip_is_identity() {
        let mut rng = crate::numerics::RandomSource::new(7);
        let mut points = BTreeMap::new();
        for i in 0..50 {
            let m = Month::new(2015 + (i % 9), (i % 12 + 1) as u8).unwrap();
            points.insert(
                key(&format!("C{}", i % 4), "WHEAT", m.year, m.month),
                rng.normal() * 100.0,
            );
        }
        let series = RawSeries {
            source_name: "x".into(),
            points,
        };
        let f = NamedTempFile::new().unwrap();
        series.write_csv(f.path()).unwrap();
        let loaded = load_source(f.path(), &schema("x")).unwrap();
        assert_eq!(loaded.points, series.points);
    }

    #[test]
    fn warnings_parse_and_default_to_none() {
        let f = write_temp(
            "country,commodity,month,severity\nNGA,MAIZE,2021-06,high\nNGA,MAIZE,2021-07,MODERATE\n",
        );
        let set = load_warnings(f.path()).unwrap();
        assert_eq!(set.get(&key("NGA", "MAIZE", 2021, 6)), WarningLabel::High);
        assert_eq!(
            set.get(&key("NGA", "MAIZE", 2021, 7)),
            WarningLabel::Moderate
        );
        assert_eq!(set.get(&key("NGA", "MAIZE", 2021, 8)), WarningLabel::None);
    }

    #[test]
    fn warnings_reject_unknown_severity() {
        let f = write_temp("country,commodity,month,severity\nNGA,MAIZE,2021-06,critical\n");
        assert!(matches!(
            load_warnings(f.path()),
            Err(IngestError::UnknownSeverity { .. })
        ));
    }

    #[test]
    fn month_arithmetic_and_bounds() {
        assert!(Month::new(2020, 0).is_err());
        assert!(Month::new(2020, 13).is_err());
        assert!(Month::new(1899, 6).is_err());
        let m = Month::new(2020, 11).unwrap();
        assert_eq!(m.plus(3).unwrap(), Month::new(2021, 2).unwrap());
        assert_eq!(m.plus(3).unwrap().months_since(m), 3);
        assert_eq!(m.to_string(), "2020-11");
    }

    #[test]
    fn observation_key_normalizes_case() {
        let k = key("nga", "maize", 2020, 1);
        assert_eq!(k.country, "NGA");
        assert_eq!(k.commodity, "MAIZE");
        assert!(ObservationKey::new(" ", "MAIZE", Month::new(2020, 1).unwrap()).is_err());
    }
}
