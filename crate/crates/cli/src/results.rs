//! Per-seed measurements gathered into labelled tables.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Measure {
    Count { successes: u64, trials: u64 },
    Value { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    /// `None` for seed-independent experiments.
    pub seed: Option<u64>,
    pub measure: Measure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub column: String,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub failures: Vec<SeedFailure>,
    pub tables: Vec<Table>,
}

/// One measurement destined for `table / row / column`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub table: String,
    pub row: String,
    pub column: String,
    pub measure: Measure,
}

/// Collects records in first-seen order of tables, rows and columns.
#[derive(Debug, Default)]
pub struct Recorder {
    pub records: Vec<Record>,
}

impl Recorder {
    pub fn count(&mut self, table: &str, row: &str, column: &str, successes: u64, trials: u64) {
        self.push(table, row, column, Measure::Count { successes, trials });
    }

    pub fn value(&mut self, table: &str, row: &str, column: &str, value: f64) {
        self.push(table, row, column, Measure::Value { value });
    }

    fn push(&mut self, table: &str, row: &str, column: &str, measure: Measure) {
        self.records.push(Record {
            table: table.to_owned(),
            row: row.to_owned(),
            column: column.to_owned(),
            measure,
        });
    }
}

/// Folds `(seed, records)` lists, in seed order, into tables.
pub fn assemble(per_seed: &[(Option<u64>, Vec<Record>)]) -> Vec<Table> {
    let mut tables: Vec<Table> = Vec::new();
    for (seed, records) in per_seed {
        for r in records {
            let t = match tables.iter().position(|t| t.name == r.table) {
                Some(i) => &mut tables[i],
                None => {
                    tables.push(Table {
                        name: r.table.clone(),
                        columns: Vec::new(),
                        rows: Vec::new(),
                    });
                    tables.last_mut().expect("just pushed")
                }
            };
            if !t.columns.contains(&r.column) {
                t.columns.push(r.column.clone());
            }
            let row = match t.rows.iter().position(|x| x.label == r.row) {
                Some(i) => &mut t.rows[i],
                None => {
                    t.rows.push(Row {
                        label: r.row.clone(),
                        cells: Vec::new(),
                    });
                    t.rows.last_mut().expect("just pushed")
                }
            };
            let cell = match row.cells.iter().position(|c| c.column == r.column) {
                Some(i) => &mut row.cells[i],
                None => {
                    row.cells.push(Cell {
                        column: r.column.clone(),
                        entries: Vec::new(),
                    });
                    row.cells.last_mut().expect("just pushed")
                }
            };
            cell.entries.push(Entry {
                seed: *seed,
                measure: r.measure,
            });
        }
    }
    tables
}
