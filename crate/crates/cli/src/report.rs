//! Human-readable tables and plot-ready CSVs from a finished run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use vla_lab::dpo::pooled_success;

use crate::error::{CliError, Result};
use crate::manifest::{Manifest, REPORT_DIR, RESULTS_FILE};
use crate::results::{Cell, Measure, ResultsFile, Table};

const SUMMARY_FILE: &str = "summary.txt";

/// Rendered report: the summary text and one CSV per table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub csvs: Vec<(String, String)>,
}

/// Coverage of one cell relative to the best-covered cell of its table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    Full,
    SingleSeed,
    Partial,
}

impl Coverage {
    fn marker(self) -> &'static str {
        match self {
            Coverage::Full => "",
            Coverage::SingleSeed => " *",
            Coverage::Partial => " +",
        }
    }
}

fn fmt_measure(m: &Measure) -> Result<String> {
    Ok(match m {
        Measure::Count { successes, trials } => pooled_success(&[(*successes, *trials)])?.to_string(),
        Measure::Value { value } => fmt_value(*value),
    })
}

fn fmt_value(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.3e}")
    } else {
        format!("{v:.4}")
    }
}

/// Pools a cell: summed counts for successes, the mean for plain values.
pub fn pooled(cell: &Cell) -> Result<String> {
    let counts: Vec<(u64, u64)> = cell
        .entries
        .iter()
        .filter_map(|e| match e.measure {
            Measure::Count { successes, trials } => Some((successes, trials)),
            Measure::Value { .. } => None,
        })
        .collect();
    if counts.len() == cell.entries.len() {
        return Ok(pooled_success(&counts)?.to_string());
    }
    if !counts.is_empty() {
        return Err(CliError::Integrity(format!("cell {:?} mixes counts and values", cell.column)));
    }
    let values: Vec<f64> = cell
        .entries
        .iter()
        .filter_map(|e| match e.measure {
            Measure::Value { value } => Some(value),
            Measure::Count { .. } => None,
        })
        .collect();
    if values.is_empty() {
        return Err(CliError::Integrity(format!("cell {:?} has no entries", cell.column)));
    }
    Ok(fmt_value(values.iter().sum::<f64>() / values.len() as f64))
}

fn coverage(cell: &Cell, widest: usize) -> Coverage {
    let n = cell.entries.len();
    if n >= widest {
        Coverage::Full
    } else if n == 1 {
        Coverage::SingleSeed
    } else {
        Coverage::Partial
    }
}

fn seed_label(seed: Option<u64>) -> String {
    seed.map_or_else(|| "value".to_owned(), |s| format!("seed {s}"))
}

/// Seeds in the order they first appear anywhere in the table.
fn table_seeds(t: &Table) -> Vec<Option<u64>> {
    let mut seeds = Vec::new();
    for e in t.rows.iter().flat_map(|r| &r.cells).flat_map(|c| &c.entries) {
        if !seeds.contains(&e.seed) {
            seeds.push(e.seed);
        }
    }
    seeds
}

fn render_grid(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_owned()
    };
    writeln!(out, "{}", line(header)).expect("string write");
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    writeln!(out, "{}", rule.join("-+-")).expect("string write");
    for r in rows {
        writeln!(out, "{}", line(r)).expect("string write");
    }
}

fn render_table(out: &mut String, t: &Table) -> Result<(bool, bool)> {
    let seeds = table_seeds(t);
    let widest = t
        .rows
        .iter()
        .flat_map(|r| &r.cells)
        .map(|c| c.entries.len())
        .max()
        .unwrap_or(0);
    let multi = seeds.len() > 1;
    let mut header = vec![String::new()];
    for col in &t.columns {
        if multi {
            header.extend(seeds.iter().map(|s| format!("{col} {}", seed_label(*s))));
            header.push(format!("{col} pooled"));
        } else {
            header.push(col.clone());
        }
    }
    let (mut any_single, mut any_partial) = (false, false);
    let mut rows = Vec::new();
    for r in &t.rows {
        let mut line = vec![r.label.clone()];
        for col in &t.columns {
            let cell = r.cells.iter().find(|c| &c.column == col);
            if multi {
                for s in &seeds {
                    let m = cell.and_then(|c| c.entries.iter().find(|e| e.seed == *s));
                    line.push(match m {
                        Some(e) => fmt_measure(&e.measure)?,
                        None => "-".to_owned(),
                    });
                }
            }
            line.push(match cell {
                Some(c) => {
                    let cov = if multi { coverage(c, widest) } else { Coverage::Full };
                    any_single |= cov == Coverage::SingleSeed;
                    any_partial |= cov == Coverage::Partial;
                    format!("{}{}", pooled(c)?, cov.marker())
                }
                None => "-".to_owned(),
            });
        }
        rows.push(line);
    }
    writeln!(out, "== {} ==", t.name).expect("string write");
    render_grid(out, &header, &rows);
    Ok((any_single, any_partial))
}

fn slug(name: &str) -> String {
    let mut s = String::new();
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            s.push(ch.to_ascii_lowercase());
        } else if !s.ends_with('_') {
            s.push('_');
        }
    }
    s.trim_matches('_').to_owned()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Long-format CSV: one line per seed entry plus one pooled line per cell.
fn table_csv(t: &Table) -> Result<String> {
    let mut out = String::from("row,column,seed,successes,trials,value\n");
    for r in &t.rows {
        for c in &r.cells {
            let (row, col) = (csv_field(&r.label), csv_field(&c.column));
            for e in &c.entries {
                let seed = e.seed.map_or_else(String::new, |s| s.to_string());
                let (s, n, v) = match e.measure {
                    Measure::Count { successes, trials } => {
                        (successes.to_string(), trials.to_string(), (successes as f64 / trials as f64).to_string())
                    }
                    Measure::Value { value } => (String::new(), String::new(), value.to_string()),
                };
                writeln!(out, "{row},{col},{seed},{s},{n},{v}").expect("string write");
            }
            if c.entries.len() > 1 {
                let counts: Option<Vec<(u64, u64)>> = c
                    .entries
                    .iter()
                    .map(|e| match e.measure {
                        Measure::Count { successes, trials } => Some((successes, trials)),
                        Measure::Value { .. } => None,
                    })
                    .collect();
                match counts {
                    Some(cs) => {
                        let p = pooled_success(&cs)?;
                        writeln!(out, "{row},{col},pooled,{},{},{}", p.successes, p.trials, p.rate()).expect("string write");
                    }
                    None => {
                        let vals: Vec<f64> = c
                            .entries
                            .iter()
                            .filter_map(|e| match e.measure {
                                Measure::Value { value } => Some(value),
                                Measure::Count { .. } => None,
                            })
                            .collect();
                        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                        writeln!(out, "{row},{col},pooled,,,{mean}").expect("string write");
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Renders a results file without touching the filesystem.
pub fn render(results: &ResultsFile) -> Result<Report> {
    let mut text = String::new();
    writeln!(text, "experiment: {}", results.experiment).expect("string write");
    if results.seeds.is_empty() {
        writeln!(text, "seeds: none (seed-independent)").expect("string write");
    } else {
        let seeds: Vec<String> = results.seeds.iter().map(u64::to_string).collect();
        writeln!(text, "seeds: {}", seeds.join(", ")).expect("string write");
    }
    let (mut single, mut partial) = (false, false);
    let mut csvs = Vec::new();
    for t in &results.tables {
        text.push('\n');
        let (s, p) = render_table(&mut text, t)?;
        single |= s;
        partial |= p;
        csvs.push((format!("{}.csv", slug(&t.name)), table_csv(t)?));
    }
    if single || partial || !results.failures.is_empty() {
        text.push('\n');
    }
    if single {
        writeln!(text, "* single seed: not comparable with the multi-seed cells of the same table").expect("string write");
    }
    if partial {
        writeln!(text, "+ pooled over fewer seeds than other cells of the same table").expect("string write");
    }
    for f in &results.failures {
        writeln!(text, "seed {} failed: {}", f.seed, f.error).expect("string write");
    }
    Ok(Report { text, csvs })
}

/// Verifies the run directory, renders it, and (re)writes `report/`.
pub fn report(dir: &Path) -> Result<Report> {
    let manifest = Manifest::load(dir)?;
    manifest.verify(dir)?;
    let path = dir.join(RESULTS_FILE);
    let raw = fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let results: ResultsFile = serde_json::from_str(&raw).map_err(|source| CliError::Json { path, source })?;
    if results.experiment != manifest.experiment {
        return Err(CliError::Integrity(format!(
            "results are for {} but the manifest names {}",
            results.experiment, manifest.experiment
        )));
    }
    let rendered = render(&results)?;
    let out = dir.join(REPORT_DIR);
    if out.exists() {
        fs::remove_dir_all(&out).map_err(CliError::io(&out))?;
    }
    fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let summary = out.join(SUMMARY_FILE);
    fs::write(&summary, &rendered.text).map_err(CliError::io(&summary))?;
    for (name, body) in &rendered.csvs {
        let p = out.join(name);
        fs::write(&p, body).map_err(CliError::io(&p))?;
    }
    Ok(rendered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::results::{assemble, Recorder};

    fn results(per_seed: Vec<(Option<u64>, Recorder)>) -> ResultsFile {
        let seeds = per_seed.iter().filter_map(|s| s.0).collect();
        let recs: Vec<_> = per_seed.into_iter().map(|(s, r)| (s, r.records)).collect();
        ResultsFile {
            experiment: "peft-ablation".into(),
            seeds,
            failures: Vec::new(),
            tables: assemble(&recs),
        }
    }

    #[test]
    fn three_equal_seeds_pool_exactly() {
        let per_seed = [42, 1337, 2026]
            .into_iter()
            .map(|s| {
                let mut r = Recorder::default();
                r.count("suite success", "object", "+DoRA", 38, 50);
                (Some(s), r)
            })
            .collect();
        let rep = render(&results(per_seed)).unwrap();
        assert!(rep.text.contains("76.0% (114/150)"), "{}", rep.text);
        assert!(rep.text.contains("76.0% (38/50)"));
        assert!(!rep.text.contains("single seed"));
        assert!(rep.csvs[0].1.contains("object,+DoRA,pooled,114,150,0.76"));
    }

    #[test]
    fn single_seed_cell_is_flagged() {
        let mut a = Recorder::default();
        a.count("suite success", "object", "+DoRA", 38, 50);
        a.count("suite success", "goal", "+DoRA", 40, 50);
        let mut b = Recorder::default();
        b.count("suite success", "object", "+DoRA", 37, 50);
        let rep = render(&results(vec![(Some(42), a), (Some(1337), b)])).unwrap();
        let goal = rep.text.lines().find(|l| l.starts_with("goal")).unwrap();
        assert!(goal.ends_with("80.0% (40/50) *"), "{goal}");
        assert!(rep.text.contains("* single seed"));
        let object = rep.text.lines().find(|l| l.starts_with("object")).unwrap();
        assert!(object.ends_with("75.0% (75/100)"), "{object}");
    }

    #[test]
    fn values_pool_to_the_mean() {
        let per_seed = [(1, 1.0), (2, 2.0), (3, 6.0)]
            .into_iter()
            .map(|(s, v)| {
                let mut r = Recorder::default();
                r.value("dpo", "flow+lora", "tail margin", v);
                (Some(s), r)
            })
            .collect();
        let rep = render(&results(per_seed)).unwrap();
        assert!(rep.text.contains("3.0000"));
        assert!(rep.csvs[0].1.contains("pooled,,,3"));
    }

    #[test]
    fn seedless_tables_have_one_column_per_measure() {
        let mut r = Recorder::default();
        r.value("stages", "denoise", "% of call", 78.571);
        let rep = render(&results(vec![(None, r)])).unwrap();
        assert!(rep.text.contains("% of call"));
        assert!(!rep.text.contains("pooled"));
    }

    #[test]
    fn failures_are_listed() {
        let mut res = results(vec![(Some(1), Recorder::default())]);
        res.failures.push(crate::results::SeedFailure {
            seed: 7,
            error: "numeric trouble".into(),
        });
        assert!(render(&res).unwrap().text.contains("seed 7 failed: numeric trouble"));
    }

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("suite success"), "suite_success");
        assert_eq!(slug("recall@10"), "recall_10");
        assert_eq!(slug("speedup ceiling"), "speedup_ceiling");
    }

    #[test]
    fn empty_directory_has_no_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let err = report(dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Integrity(_)), "{err}");
    }
}
