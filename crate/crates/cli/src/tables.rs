//! Text and CSV renderings of an evaluation report.
//!
//! Scores print with two decimals; every model after the baseline carries its
//! percentage gain over the baseline in parentheses with one decimal.

use ageprog::dataset::{Sex, AGE_GROUPS, GROUP_NAMES};
use ageprog::eval::{EvalReport, ModelEval, REPORT_FORMAT};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("not an evaluation report: {0}")]
    Parse(String),
    #[error("unsupported report format `{0}`")]
    Format(String),
    #[error("report contains no models")]
    Empty,
    #[error("report is inconsistent: {0}")]
    Inconsistent(String),
}

pub fn parse_report(text: &str) -> Result<EvalReport, ReportError> {
    if text.trim().is_empty() {
        return Err(ReportError::Empty);
    }
    let report: EvalReport = serde_json::from_str(text).map_err(|e| ReportError::Parse(e.to_string()))?;
    check(&report)?;
    Ok(report)
}

pub fn check(report: &EvalReport) -> Result<(), ReportError> {
    if report.format != REPORT_FORMAT {
        return Err(ReportError::Format(report.format.clone()));
    }
    let Some(first) = report.models.first() else { return Err(ReportError::Empty) };
    if first.name != report.baseline {
        return Err(ReportError::Inconsistent(format!("baseline `{}` is not the first model", report.baseline)));
    }
    for m in &report.models {
        if m.fr.scores.len() != report.thresholds.len() || m.fr.thresholds != report.thresholds {
            return Err(ReportError::Inconsistent(format!("FR scores of `{}` do not match the thresholds", m.name)));
        }
        if let Some(g) = &m.gains {
            if g.fr.len() != report.thresholds.len() {
                return Err(ReportError::Inconsistent(format!("FR gains of `{}` do not match the thresholds", m.name)));
            }
        }
    }
    Ok(())
}

struct Cell {
    value: Option<f64>,
    gain: Option<Option<f64>>,
}

impl Cell {
    fn text(&self) -> String {
        let Some(v) = self.value else { return "-".into() };
        match self.gain {
            None => format!("{v:.2}"),
            Some(Some(g)) => format!("{v:.2} ({g:.1}%)"),
            Some(None) => format!("{v:.2} (n/a)"),
        }
    }
}

struct Table {
    title: String,
    /// Only set when a sex qualifies the rows, for the CSV column.
    sex: Option<Sex>,
    corner: String,
    columns: Vec<String>,
    rows: Vec<(String, Vec<Cell>)>,
}

impl Table {
    fn render(&self, out: &mut String) {
        let mut grid: Vec<Vec<String>> = vec![std::iter::once(self.corner.clone()).chain(self.columns.iter().cloned()).collect()];
        for (label, cells) in &self.rows {
            grid.push(std::iter::once(label.clone()).chain(cells.iter().map(Cell::text)).collect());
        }
        let widths: Vec<usize> = (0..grid[0].len()).map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        out.push_str(&self.title);
        out.push('\n');
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
    }

    fn csv(&self, key: &str, out: &mut String) {
        let sex = self.sex.map(|s| s.to_string()).unwrap_or_default();
        for (label, cells) in &self.rows {
            for (model, cell) in self.columns.iter().zip(cells) {
                let value = cell.value.map(|v| format!("{v:.2}")).unwrap_or_default();
                let gain = match cell.gain {
                    Some(Some(g)) => format!("{g:.1}"),
                    _ => String::new(),
                };
                out.push_str(&format!("{key},{sex},{},{},{value},{gain}\n", csv_field(label), csv_field(model)));
            }
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Gain slot of a cell: absent for the baseline column.
fn gain_of(i: usize, m: &ModelEval, pick: impl Fn(&ageprog::eval::ModelGains) -> Option<f64>) -> Option<Option<f64>> {
    if i == 0 {
        None
    } else {
        Some(m.gains.as_ref().and_then(pick))
    }
}

fn tables(report: &EvalReport) -> Vec<(&'static str, Table)> {
    let names: Vec<String> = report.models.iter().map(|m| m.name.clone()).collect();
    let mut out = Vec::new();

    if let Some(clf) = &report.classifier_test {
        let rows = (0..AGE_GROUPS)
            .map(|g| {
                let cells = Sex::ALL.iter().map(|&s| Cell { value: clf.accuracy(s, g), gain: None }).collect();
                (GROUP_NAMES[g].to_string(), cells)
            })
            .chain(std::iter::once(("Average".to_string(), Sex::ALL.iter().map(|&s| Cell { value: clf.average(s), gain: None }).collect())))
            .collect();
        out.push((
            "table1",
            Table {
                title: "Table I. Gender classifier accuracy on held-out test faces".into(),
                sex: None,
                corner: "Age group".into(),
                columns: Sex::ALL.iter().map(|s| s.to_string()).collect(),
                rows,
            },
        ));
    }

    for sex in Sex::ALL {
        let sx = sex.index();
        let mut rows: Vec<(String, Vec<Cell>)> = (0..AGE_GROUPS)
            .map(|g| {
                let cells = report
                    .models
                    .iter()
                    .enumerate()
                    .map(|(i, m)| Cell {
                        value: m.gender.accuracy(sex, g),
                        gain: gain_of(i, m, |x| if sex == Sex::Male { x.gender_male[g] } else { x.gender_female[g] }),
                    })
                    .collect();
                (GROUP_NAMES[g].to_string(), cells)
            })
            .collect();
        let avg = report
            .models
            .iter()
            .enumerate()
            .map(|(i, m)| Cell { value: m.gender_average[sx], gain: gain_of(i, m, |x| x.gender_average[sx]) })
            .collect();
        rows.push(("Average".into(), avg));
        out.push((
            "table2",
            Table {
                title: format!("Table II. Gender scores of simulated faces, {sex} inputs ({} faces)", if sex == Sex::Male { report.inputs_male } else { report.inputs_female }),
                sex: Some(sex),
                corner: "Age group".into(),
                columns: names.clone(),
                rows,
            },
        ));
    }

    type Pick = Box<dyn Fn(&ModelEval) -> f64>;
    type PickGain = Box<dyn Fn(&ageprog::eval::ModelGains) -> Option<f64>>;
    let mut stats: Vec<(String, Pick, PickGain)> = vec![
        ("Min".into(), Box::new(|m| m.distances.min), Box::new(|g| g.distance_min)),
        ("Max".into(), Box::new(|m| m.distances.max), Box::new(|g| g.distance_max)),
        ("Mean".into(), Box::new(|m| m.distances.mean), Box::new(|g| g.distance_mean)),
        ("SD".into(), Box::new(|m| m.distances.sd), Box::new(|g| g.distance_sd)),
    ];
    for p in 0..9 {
        stats.push((format!("{}%", 10 * (p + 1)), Box::new(move |m| m.distances.percentiles[p]), Box::new(move |g| g.distance_percentiles[p])));
    }
    let rows = stats
        .iter()
        .map(|(label, pick, pick_gain)| {
            let cells = report.models.iter().enumerate().map(|(i, m)| Cell { value: Some(pick(m)), gain: gain_of(i, m, pick_gain) }).collect();
            (label.clone(), cells)
        })
        .collect();
    out.push((
        "table3",
        Table {
            title: "Table III. Embedding distances between inputs and simulated faces".into(),
            sex: None,
            corner: "Statistic".into(),
            columns: names.clone(),
            rows,
        },
    ));

    let rows = report
        .thresholds
        .iter()
        .enumerate()
        .map(|(t, thr)| {
            let cells = report.models.iter().enumerate().map(|(i, m)| Cell { value: Some(m.fr.scores[t]), gain: gain_of(i, m, |g| g.fr[t]) }).collect();
            (format!("{thr}"), cells)
        })
        .collect();
    out.push((
        "table4",
        Table { title: "Table IV. FR scores of simulated faces".into(), sex: None, corner: "Threshold".into(), columns: names, rows },
    ));
    out
}

pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    for (i, (_, t)) in tables(report).iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        t.render(&mut out);
    }
    out.push_str(&format!("\nGains in parentheses are relative to {}. Distance pooling: {}.\n", report.baseline, report.distance_pooling));
    out
}

pub fn render_csv(report: &EvalReport) -> String {
    let mut out = String::from("table,sex,row,model,value,gain\n");
    for (key, t) in tables(report) {
        t.csv(key, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ageprog::eval::{attach_gains, distance_stats, fr_scores, gender_score_from_predictions, DISTANCE_POOLING};

    fn model(name: &str, male_correct: usize, distances: &[f64]) -> ModelEval {
        let mut predicted = vec![Sex::Male; male_correct];
        predicted.resize(100, Sex::Female);
        let gender = gender_score_from_predictions(&predicted, &[Sex::Male; 100], &[0; 100]).unwrap();
        ModelEval {
            name: name.into(),
            gender_average: [gender.average(Sex::Male), gender.average(Sex::Female)],
            gender,
            distances: distance_stats(distances).unwrap(),
            fr: fr_scores(distances, &[1.6]).unwrap(),
            gains: None,
        }
    }

    fn report() -> EvalReport {
        let mut models = vec![model("CAAE", 44, &[1.0, 2.0, 3.0, 1.5]), model("CAAE-G", 82, &[1.0, 1.9, 2.5, 1.5])];
        attach_gains(&mut models);
        EvalReport {
            format: REPORT_FORMAT.into(),
            baseline: "CAAE".into(),
            thresholds: vec![1.6],
            inputs_male: 100,
            inputs_female: 0,
            distance_pooling: DISTANCE_POOLING.into(),
            classifier_test: None,
            models,
        }
    }

    #[test]
    fn gains_print_beside_non_baseline_scores() {
        let text = render_text(&report());
        let row = text.lines().find(|l| l.starts_with("0-5")).unwrap();
        assert!(row.contains("0.44") && row.contains("0.82 (86.4%)"), "{row}");
        assert!(!row.contains("0.44 ("), "{row}");
        assert!(text.contains("Table III") && text.contains("Table IV"));
        assert!(!text.contains("Table I."), "no classifier table without classifier data");
    }

    #[test]
    fn csv_leaves_baseline_gain_empty() {
        let csv = render_csv(&report());
        assert!(csv.contains("table2,male,0-5,CAAE,0.44,\n"), "{csv}");
        assert!(csv.contains("table2,male,0-5,CAAE-G,0.82,86.4\n"), "{csv}");
        assert!(csv.contains("table4,,1.6,CAAE,0.50,\n"), "{csv}");
    }

    #[test]
    fn rejects_empty_and_foreign_reports() {
        assert!(matches!(parse_report(""), Err(ReportError::Empty)));
        assert!(matches!(parse_report("{}"), Err(ReportError::Parse(_))));
        let mut r = report();
        r.models.clear();
        assert!(matches!(parse_report(&serde_json::to_string(&r).unwrap()), Err(ReportError::Empty)));
        let mut r = report();
        r.format = "other".into();
        assert!(matches!(parse_report(&serde_json::to_string(&r).unwrap()), Err(ReportError::Format(_))));
    }
}
