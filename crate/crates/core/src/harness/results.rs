//! Per-seed tables, their aggregation, and CSV emission.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::metrics::{mean, std_dev};

/// How a table's cells are printed in CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFormat {
    /// Fractions printed as percentages with one decimal.
    Percent,
    /// Fractions printed with three decimals.
    Fraction,
    /// Scientific notation, four significant digits.
    Scientific,
}

impl CellFormat {
    pub fn format(self, v: f64) -> String {
        match self {
            CellFormat::Percent => format!("{:.1}", 100.0 * v),
            CellFormat::Fraction => format!("{v:.3}"),
            CellFormat::Scientific => format!("{v:.4e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    /// `None` where a method has no value for a column.
    pub values: Vec<Option<f64>>,
}

/// One seed's values for one output table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub format: CellFormat,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn new(name: &str, columns: Vec<String>, format: CellFormat) -> Self {
        Self {
            name: name.into(),
            columns,
            format,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, method: &str, values: Vec<Option<f64>>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push(TableRow {
            method: method.into(),
            values,
        });
    }

    pub fn get(&self, method: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.method == method)?.values[c]
    }
}

/// Target ages of the hard set before and after the game, split by class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgeTrace {
    pub ad_before: Vec<f64>,
    pub ad_after: Vec<f64>,
    pub cn_before: Vec<f64>,
    pub cn_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub encoder_seed: Option<u64>,
    pub tables: Vec<Table>,
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ages: Option<AgeTrace>,
}

impl SeedResult {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggRow {
    pub method: String,
    pub mean: Vec<Option<f64>>,
    pub std: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggTable {
    pub name: String,
    pub columns: Vec<String>,
    pub format: CellFormat,
    pub rows: Vec<AggRow>,
}

impl AggTable {
    pub fn mean(&self, method: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.method == method)?.mean[c]
    }

    /// Method with the highest mean per column; ties keep the first row.
    pub fn best_per_column(&self) -> Vec<(String, Option<String>)> {
        self.columns
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let mut best: Option<(&str, f64)> = None;
                for r in &self.rows {
                    if let Some(v) = r.mean[c] {
                        if best.map_or(true, |(_, b)| v > b) {
                            best = Some((&r.method, v));
                        }
                    }
                }
                (name.clone(), best.map(|(m, _)| m.to_string()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub kind: String,
    pub seeds: Vec<u64>,
    pub tables: Vec<AggTable>,
    pub scalars: BTreeMap<String, Stat>,
}

impl Summary {
    pub fn table(&self, name: &str) -> Option<&AggTable> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).map(|s| s.mean)
    }
}

fn stat(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() || values.iter().any(Option::is_none) {
        return (None, None);
    }
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (Some(mean(&v)), Some(std_dev(&v)))
}

/// Mean and sample standard deviation over seeds, cell by cell. A cell missing
/// for any seed is missing in the aggregate. All seeds must share table shapes.
pub fn aggregate(name: &str, kind: &str, results: &[SeedResult]) -> Result<Summary> {
    let first = results.first().ok_or(Error::Empty("seed results"))?;
    let mut tables = Vec::with_capacity(first.tables.len());
    for t in &first.tables {
        let per_seed: Vec<&Table> = results
            .iter()
            .map(|r| {
                r.table(&t.name)
                    .filter(|x| x.columns == t.columns && x.rows.len() == t.rows.len())
                    .ok_or_else(|| Error::Inconsistent(format!("seed {} table {} differs in shape", r.seed, t.name)))
            })
            .collect::<Result<_>>()?;
        let rows = t
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let (mean, std) = (0..t.columns.len())
                    .map(|c| stat(&per_seed.iter().map(|x| x.rows[i].values[c]).collect::<Vec<_>>()))
                    .unzip();
                AggRow {
                    method: row.method.clone(),
                    mean,
                    std,
                }
            })
            .collect();
        tables.push(AggTable {
            name: t.name.clone(),
            columns: t.columns.clone(),
            format: t.format,
            rows,
        });
    }
    let mut scalars = BTreeMap::new();
    for key in first.scalars.keys() {
        let values = results
            .iter()
            .map(|r| {
                r.scalars
                    .get(key)
                    .copied()
                    .ok_or_else(|| Error::Inconsistent(format!("seed {} lacks scalar {key}", r.seed)))
            })
            .collect::<Result<Vec<f64>>>()?;
        scalars.insert(
            key.clone(),
            Stat {
                mean: mean(&values),
                std: std_dev(&values),
                values,
            },
        );
    }
    Ok(Summary {
        name: name.into(),
        kind: kind.into(),
        seeds: results.iter().map(|r| r.seed).collect(),
        tables,
        scalars,
    })
}

fn csv_bytes(table: &AggTable, pick: impl Fn(&AggRow) -> &Vec<Option<f64>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["Method".to_string()];
    header.extend(table.columns.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for r in &table.rows {
        let mut rec = vec![r.method.clone()];
        rec.extend(
            pick(r)
                .iter()
                .map(|v| v.map_or_else(|| "N/A".into(), |x| table.format.format(x))),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// Writes `<name>.csv` (means) and `<name>_std.csv`.
pub fn write_table_csv(dir: &Path, table: &AggTable) -> Result<()> {
    write_atomic(
        &dir.join(format!("{}.csv", table.name)),
        &csv_bytes(table, |r| &r.mean)?,
    )?;
    write_atomic(
        &dir.join(format!("{}_std.csv", table.name)),
        &csv_bytes(table, |r| &r.std)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seed(seed: u64, a: f64, b: Option<f64>) -> SeedResult {
        let mut t = Table::new("acc", vec!["x".into(), "y".into()], CellFormat::Percent);
        t.push("Naive", vec![Some(a), b]);
        t.push("Proposed", vec![Some(a + 0.1), Some(0.5)]);
        SeedResult {
            seed,
            dataset_fingerprint: String::new(),
            encoder_seed: None,
            tables: vec![t],
            scalars: BTreeMap::from([("s".to_string(), a)]),
            ages: None,
        }
    }

    #[test]
    fn aggregation_and_csv() {
        let rs = vec![seed(0, 0.8, Some(0.2)), seed(1, 0.9, None)];
        let s = aggregate("main", "main", &rs).unwrap();
        let t = s.table("acc").unwrap();
        assert!((t.mean("Naive", "x").unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(t.mean("Naive", "y"), None);
        let sd = t.rows[0].std[0].unwrap();
        assert!((sd - (0.005f64).sqrt()).abs() < 1e-12);
        assert!((s.scalar("s").unwrap() - 0.85).abs() < 1e-12);
        let best = t.best_per_column();
        assert_eq!(best[0].1.as_deref(), Some("Proposed"));
        let text = String::from_utf8(csv_bytes(t, |r| &r.mean).unwrap()).unwrap();
        assert_eq!(text, "Method,x,y\nNaive,85.0,N/A\nProposed,95.0,50.0\n");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut b = seed(1, 0.9, None);
        b.tables[0].columns.pop();
        assert!(aggregate("m", "main", &[seed(0, 0.8, None), b]).is_err());
        assert!(aggregate("m", "main", &[]).is_err());
    }

    proptest! {
        #[test]
        fn mean_matches_direct_recomputation(values in prop::collection::vec(0.0f64..1.0, 1..8)) {
            let rs: Vec<SeedResult> = values.iter().enumerate().map(|(i, &v)| seed(i as u64, v, Some(v))).collect();
            let s = aggregate("m", "main", &rs).unwrap();
            let t = s.table("acc").unwrap();
            let direct = values.iter().sum::<f64>() / values.len() as f64;
            prop_assert!((t.mean("Naive", "x").unwrap() - direct).abs() < 1e-12);
            let var = if values.len() < 2 { 0.0 } else {
                values.iter().map(|v| (v - direct).powi(2)).sum::<f64>() / (values.len() - 1) as f64
            };
            prop_assert!((t.rows[0].std[0].unwrap() - var.sqrt()).abs() < 1e-9);
        }
    }
}
