use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ConfusionMatrix, RetrievalSummary};
use crate::attribution::{AttributionReport, Decision};
use crate::backbone::TrainHistory;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn loss_rows(history: &TrainHistory) -> Vec<LossRow> {
    history
        .checkpoints
        .iter()
        .map(|c| LossRow {
            epoch: c.meta.epoch,
            train_loss: c.meta.train_loss,
            val_loss: c.meta.val_loss,
        })
        .collect()
}

/// Everything a report can render. Names distinguish several matrices or
/// curves; an empty name gives the bare file name (`confusion.csv`).
#[derive(Debug, Clone, Default)]
pub struct ResultsBundle {
    pub confusion: Vec<(String, ConfusionMatrix)>,
    pub loss_curves: Vec<(String, Vec<LossRow>)>,
    pub retrieval: Vec<RetrievalSummary>,
    pub attribution: Vec<AttributionReport>,
}

impl ResultsBundle {
    pub fn is_empty(&self) -> bool {
        self.confusion.is_empty()
            && self.loss_curves.is_empty()
            && self.retrieval.is_empty()
            && self.attribution.is_empty()
    }
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn stem(base: &str, name: &str) -> Result<String> {
    if name.is_empty() {
        return Ok(base.to_owned());
    }
    if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::MalformedInput(format!(
            "result name {name:?} may only contain letters, digits, '_' and '-'"
        )));
    }
    Ok(format!("{base}_{name}"))
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(plot_err)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn threshold_tag(t: f64) -> String {
    format!("T{t}")
}

/// Renders the bundle into `dir`: one CSV per table, one SVG per plot.
/// Everything is rendered in memory first, so a failure leaves no
/// partial file set behind. Returns the written paths in name order.
pub fn emit_report(bundle: &ResultsBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    if bundle.is_empty() {
        return Err(Error::Empty("results bundle"));
    }
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();

    for (name, m) in &bundle.confusion {
        let s = stem("confusion", name)?;
        files.push((format!("{s}.csv"), m.to_csv()?));
        files.push((format!("{s}.svg"), confusion_svg(m, &s)?.into_bytes()));
    }

    for (name, rows) in &bundle.loss_curves {
        let s = stem("loss_curve", name)?;
        let table = rows
            .iter()
            .map(|r| vec![r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string()])
            .collect();
        files.push((format!("{s}.csv"), csv_bytes(&["epoch", "train_loss", "val_loss"], table)?));
        files.push((format!("{s}.svg"), loss_svg(rows, &s)?.into_bytes()));
    }

    if !bundle.retrieval.is_empty() {
        let mut all = Vec::new();
        for sum in &bundle.retrieval {
            let rows: Vec<Vec<String>> = sum
                .per_n
                .iter()
                .map(|p| vec![p.n.to_string(), p.q_n.to_string(), p.q.to_string(), opt(p.p_n)])
                .collect();
            for r in &rows {
                let mut full = vec![sum.threshold.to_string()];
                full.extend(r.iter().cloned());
                full.push(sum.unanswerable.len().to_string());
                all.push(full);
            }
            files.push((
                format!("retrieval_{}.csv", threshold_tag(sum.threshold)),
                csv_bytes(&["n", "q_n", "q", "p_n"], rows)?,
            ));
        }
        files.push((
            "retrieval.csv".into(),
            csv_bytes(&["threshold", "n", "q_n", "q", "p_n", "unanswerable"], all)?,
        ));
        files.push(("retrieval.svg".into(), retrieval_svg(&bundle.retrieval)?.into_bytes()));
    }

    for (i, report) in bundle.attribution.iter().enumerate() {
        let s = format!("evidence_{i:03}");
        let decision = match &report.decision {
            Decision::Artist(a) => a.name.clone(),
            Decision::None => "none".into(),
        };
        let rows = report
            .per_artist
            .iter()
            .map(|e| {
                vec![
                    report.query.clone(),
                    e.artist.name.clone(),
                    e.min_distance.to_string(),
                    opt(e.probability),
                    e.vote_count.to_string(),
                    e.nearest_reference.clone(),
                    decision.clone(),
                    report.threshold_used.to_string(),
                ]
            })
            .collect();
        files.push((
            format!("{s}.csv"),
            csv_bytes(
                &["query", "artist", "min_distance", "probability", "vote_count", "nearest_reference", "decision", "threshold"],
                rows,
            )?,
        ));
        files.push((format!("{s}.json"), report.to_json()?.into_bytes()));
        files.push((format!("{s}.svg"), evidence_svg(report)?.into_bytes()));
    }

    files.sort_by(|a, b| a.0.cmp(&b.0));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        let path = dir.join(name);
        if let Err(e) = write_atomic(&path, bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(written)
}

fn confusion_svg(m: &ConfusionMatrix, title: &str) -> Result<String> {
    let n = m.labels.len();
    let norm = m.normalized();
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (720, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(160)
            .build_cartesian_2d(0f64..n as f64, 0f64..n as f64)
            .map_err(plot_err)?;
        let labels = m.labels.clone();
        let labels_y = m.labels.clone();
        chart
            .configure_mesh()
            .disable_mesh()
            .x_labels(n)
            .y_labels(n)
            .x_label_formatter(&|x| label_at(&labels, *x, false))
            .y_label_formatter(&|y| label_at(&labels_y, *y, true))
            .x_desc("predicted")
            .y_desc("true")
            .draw()
            .map_err(plot_err)?;
        for i in 0..n {
            for j in 0..n {
                let v = norm[i][j];
                let shade = (255.0 * (1.0 - v)).round() as u8;
                let y0 = (n - 1 - i) as f64;
                chart
                    .draw_series(std::iter::once(Rectangle::new(
                        [(j as f64, y0), (j as f64 + 1.0, y0 + 1.0)],
                        RGBColor(shade, shade, 255).filled(),
                    )))
                    .map_err(plot_err)?;
                chart
                    .draw_series(std::iter::once(Text::new(
                        m.counts[i][j].to_string(),
                        (j as f64 + 0.4, y0 + 0.55),
                        ("sans-serif", 16).into_font().color(&BLACK),
                    )))
                    .map_err(plot_err)?;
            }
        }
        root.present().map_err(plot_err)?;
    }
    Ok(out)
}

/// Tick label for the cell whose centre is nearest `v`.
fn label_at(labels: &[crate::corpus::ArtistLabel], v: f64, flipped: bool) -> String {
    let n = labels.len();
    let k = v.floor();
    if k < 0.0 || (k as usize) >= n || (v - k - 0.5).abs() > 0.5 {
        return String::new();
    }
    let idx = if flipped { n - 1 - k as usize } else { k as usize };
    labels[idx].name.clone()
}

fn loss_svg(rows: &[LossRow], title: &str) -> Result<String> {
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(0) as f64;
        let ymax = rows
            .iter()
            .flat_map(|r| [r.train_loss, r.val_loss])
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max)
            .max(1e-9)
            * 1.05;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(0f64..max_epoch.max(1.0), 0f64..ymax)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc("loss")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.epoch as f64, r.train_loss)), &BLUE))
            .map_err(plot_err)?
            .label("train")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.epoch as f64, r.val_loss)), &RED))
            .map_err(plot_err)?
            .label("validation")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], RED));
        chart
            .configure_series_labels()
            .background_style(WHITE)
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(out)
}

fn retrieval_svg(summaries: &[RetrievalSummary]) -> Result<String> {
    let n_max = summaries.iter().map(|s| s.per_n.len()).max().unwrap_or(1);
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("P(n)", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(1f64..(n_max as f64).max(2.0), 0f64..1.05)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("n")
            .y_desc("P(n)")
            .draw()
            .map_err(plot_err)?;
        for (i, s) in summaries.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(
                    s.per_n.iter().filter_map(|p| p.p_n.map(|v| (p.n as f64, v))),
                    color,
                ))
                .map_err(plot_err)?
                .label(format!("T = {}", s.threshold))
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE)
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(out)
}

fn evidence_svg(report: &AttributionReport) -> Result<String> {
    let n = report.per_artist.len().max(1);
    let dmax = report
        .per_artist
        .iter()
        .map(|e| e.min_distance)
        .fold(1.0f64, f64::max)
        * 1.1;
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let title = match &report.decision {
            Decision::Artist(a) => format!("{}: {}", report.query, a.name),
            Decision::None => format!("{}: none", report.query),
        };
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..n as f64, 0f64..dmax)
            .map_err(plot_err)?;
        let names: Vec<String> = report.per_artist.iter().map(|e| e.artist.name.clone()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let k = x.floor();
                if k >= 0.0 && (k as usize) < names.len() && (x - k - 0.5).abs() <= 0.5 {
                    names[k as usize].clone()
                } else {
                    String::new()
                }
            })
            .y_desc("min distance")
            .draw()
            .map_err(plot_err)?;
        for (i, e) in report.per_artist.iter().enumerate() {
            let x = i as f64;
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(x + 0.15, 0.0), (x + 0.85, e.min_distance)],
                    Palette99::pick(i).filled(),
                )))
                .map_err(plot_err)?;
            let note = match e.probability {
                Some(p) => format!("P={p:.3} v={}", e.vote_count),
                None => format!("no support v={}", e.vote_count),
            };
            chart
                .draw_series(std::iter::once(Text::new(
                    note,
                    (x + 0.15, e.min_distance + dmax * 0.03),
                    ("sans-serif", 13).into_font().color(&BLACK),
                )))
                .map_err(plot_err)?;
        }
        chart
            .draw_series(LineSeries::new([(0.0, 1.0), (n as f64, 1.0)], BLACK.mix(0.5)))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(out)
}
