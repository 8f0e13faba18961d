//! Static SVG figures drawn from the CSV files a run left behind.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use plotters::coord::Shift;
use plotters::prelude::*;
use serde::Deserialize;

const SIZE: (u32, u32) = (720, 480);

type Area<'a> = DrawingArea<SVGBackend<'a>, Shift>;

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plot rendering failed: {e:?}")
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

type Draw = fn(&Path, &Path) -> Result<()>;
/// A named series of `(x, y)` points.
type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);

/// Renders every figure whose source CSV exists in `run`; returns file names.
pub fn render_run(run: &Path, out: &Path) -> Result<Vec<String>> {
    let mut made = Vec::new();
    let jobs: [(&str, &str, Draw); 5] = [
        ("history.csv", "history.svg", history),
        ("far_frr.csv", "eer.svg", eer_curves),
        ("confusion.csv", "confusion.svg", confusion),
        ("attack.csv", "attack.svg", attack),
        ("rounds.csv", "rounds.svg", rounds),
    ];
    for (src, dst, draw) in jobs {
        let src = run.join(src);
        if src.is_file() {
            draw(&src, &out.join(dst))?;
            made.push(dst.to_string());
        }
    }
    Ok(made)
}

#[derive(Deserialize)]
struct EpochRow {
    epoch: usize,
    train_loss: f64,
    train_acc: f64,
    val_loss: f64,
    val_acc: f64,
}

fn line_panel(area: &Area, title: &str, x_max: f64, series: &[Series]) -> Result<()> {
    let (lo, hi) = bounds(series.iter().flat_map(|s| s.2.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..x_max.max(1.0), lo..hi)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(plot_err)?;
    for (name, color, points) in series {
        let c = *color;
        chart
            .draw_series(LineSeries::new(points.iter().copied(), c.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)
}

fn history(src: &Path, dst: &Path) -> Result<()> {
    let rows: Vec<EpochRow> = read_rows(src)?;
    let root = SVGBackend::new(dst, (SIZE.0, SIZE.1 * 2)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((2, 1));
    let x = |f: fn(&EpochRow) -> f64| rows.iter().map(|r| (r.epoch as f64 + 1.0, f(r))).collect::<Vec<_>>();
    let x_max = rows.len() as f64 + 1.0;
    line_panel(
        &panels[0],
        "loss",
        x_max,
        &[
            ("train", BLUE, x(|r| r.train_loss)),
            ("validation", RED, x(|r| r.val_loss)),
        ],
    )?;
    line_panel(
        &panels[1],
        "accuracy",
        x_max,
        &[
            ("train", BLUE, x(|r| r.train_acc)),
            ("validation", RED, x(|r| r.val_acc)),
        ],
    )?;
    root.present().map_err(plot_err)
}

#[derive(Deserialize)]
struct CurveRow {
    curve: String,
    label: String,
    threshold: f64,
    far: f64,
    frr: f64,
}

fn eer_curves(src: &Path, dst: &Path) -> Result<()> {
    let rows: Vec<CurveRow> = read_rows(src)?;
    let mut names: Vec<(String, String)> = rows.iter().map(|r| (r.curve.clone(), r.label.clone())).collect();
    names.dedup();
    let (t_lo, t_hi) = bounds(rows.iter().map(|r| r.threshold));
    let root = SVGBackend::new(dst, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("FAR / FRR against threshold", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(t_lo..t_hi, 0f64..1f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("threshold")
        .y_desc("rate")
        .draw()
        .map_err(plot_err)?;
    for (k, (curve, label)) in names.iter().enumerate() {
        let pick = |f: fn(&CurveRow) -> f64| -> Vec<(f64, f64)> {
            rows.iter()
                .filter(|r| &r.curve == curve && r.threshold.is_finite())
                .map(|r| (r.threshold, f(r)))
                .collect()
        };
        let pooled = curve == "top5";
        let color = if pooled {
            BLACK.to_rgba()
        } else {
            Palette99::pick(k).to_rgba()
        };
        let width = if pooled { 3 } else { 1 };
        chart
            .draw_series(LineSeries::new(pick(|r| r.far), color.stroke_width(width)))
            .map_err(plot_err)?
            .label(format!("{label} FAR"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(width)));
        let dashed = color.mix(0.5).stroke_width(width);
        chart
            .draw_series(LineSeries::new(pick(|r| r.frr), dashed))
            .map_err(plot_err)?
            .label(format!("{label} FRR"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], dashed));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn confusion(src: &Path, dst: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(src).with_context(|| format!("reading {}", src.display()))?;
    let labels: Vec<String> = r.headers()?.iter().skip(1).map(String::from).collect();
    let mut counts: Vec<Vec<u64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<u64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("parsing {}", src.display()))?;
        counts.push(row);
    }
    let n = labels.len();
    let peak = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    let root = SVGBackend::new(dst, (SIZE.1 + 120, SIZE.1 + 80)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("confusion matrix (rows: true, columns: predicted)", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(90)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(plot_err)?;
    let name = |i: &usize| labels.get(*i).cloned().unwrap_or_default();
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(n)
        .y_labels(n)
        .x_label_formatter(&name)
        .y_label_formatter(&|i| name(&(n - 1 - i.min(&(n - 1)))))
        .draw()
        .map_err(plot_err)?;
    for (t, row) in counts.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            let y = n - 1 - t;
            let shade = c as f64 / peak;
            let fill = RGBColor(
                (255.0 * (1.0 - 0.8 * shade)) as u8,
                (255.0 * (1.0 - 0.6 * shade)) as u8,
                255,
            );
            chart
                .draw_series(std::iter::once(Rectangle::new([(p, y), (p + 1, y + 1)], fill.filled())))
                .map_err(plot_err)?;
            chart
                .draw_series(std::iter::once(Text::new(
                    c.to_string(),
                    (p, y + 1),
                    ("sans-serif", 14),
                )))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}

#[derive(Deserialize)]
struct AttackRow {
    epsilon: f64,
    accuracy: f64,
    mean_loss: f64,
}

fn attack(src: &Path, dst: &Path) -> Result<()> {
    let rows: Vec<AttackRow> = read_rows(src)?;
    let root = SVGBackend::new(dst, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    // ε = 0 is part of the grid, so positions are categorical.
    let n = rows.len();
    let mut chart = ChartBuilder::on(&root)
        .caption("accuracy under FGSM", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .right_y_label_area_size(50)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), 0f64..1.05f64)
        .map_err(plot_err)?
        .set_secondary_coord(-0.5f64..(n as f64 - 0.5), {
            let (lo, hi) = bounds(rows.iter().map(|r| r.mean_loss));
            lo.min(0.0)..hi
        });
    let eps_label = |x: &f64| {
        let i = x.round();
        if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < n {
            format!("{}", rows[i as usize].epsilon)
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .x_labels(n * 2 + 1)
        .x_label_formatter(&eps_label)
        .x_desc("epsilon")
        .y_desc("accuracy")
        .draw()
        .map_err(plot_err)?;
    chart
        .configure_secondary_axes()
        .y_desc("mean loss")
        .draw()
        .map_err(plot_err)?;
    let acc: Vec<(f64, f64)> = rows.iter().enumerate().map(|(i, r)| (i as f64, r.accuracy)).collect();
    chart
        .draw_series(LineSeries::new(acc.clone(), BLUE.stroke_width(2)))
        .map_err(plot_err)?
        .label("accuracy")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLUE.stroke_width(2)));
    chart
        .draw_series(acc.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(plot_err)?;
    let loss: Vec<(f64, f64)> = rows.iter().enumerate().map(|(i, r)| (i as f64, r.mean_loss)).collect();
    chart
        .draw_secondary_series(LineSeries::new(loss, RED.stroke_width(2)))
        .map_err(plot_err)?
        .label("mean loss")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], RED.stroke_width(2)));
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Label, color, stroke width and points of one rounds-plot line.
type Line = (String, RGBAColor, u32, Vec<(f64, f64)>);

fn rounds(src: &Path, dst: &Path) -> Result<()> {
    let mut r = csv::Reader::from_path(src).with_context(|| format!("reading {}", src.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{}: missing column {name}", src.display()))
    };
    let (round, before, after) = (
        col("round")?,
        col("global_val_accuracy_before")?,
        col("global_val_accuracy_after")?,
    );
    let clients: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.ends_with("_val_accuracy"))
        .map(|(i, h)| (i, h.trim_end_matches("_val_accuracy").to_string()))
        .collect();
    let mut table: Vec<csv::StringRecord> = Vec::new();
    for rec in r.records() {
        table.push(rec?);
    }
    let num = |rec: &csv::StringRecord, i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok());
    let series = |i: usize| -> Vec<(f64, f64)> {
        table
            .iter()
            .filter_map(|rec| Some((num(rec, round)?, num(rec, i)?)))
            .collect()
    };
    let root = SVGBackend::new(dst, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = table.len() as f64 + 0.5;
    let mut chart = ChartBuilder::on(&root)
        .caption("federated rounds: validation accuracy", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.5f64..x_max, 0f64..1.05f64)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("round").draw().map_err(plot_err)?;
    let mut lines: Vec<Line> = vec![
        ("global before aggregation".into(), RED.mix(0.6), 2, series(before)),
        ("global after aggregation".into(), BLACK.to_rgba(), 3, series(after)),
    ];
    for (k, (i, name)) in clients.iter().enumerate() {
        lines.push((format!("{name} local"), Palette99::pick(k + 2).to_rgba(), 1, series(*i)));
    }
    for (name, color, width, points) in lines {
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(width)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(width)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
