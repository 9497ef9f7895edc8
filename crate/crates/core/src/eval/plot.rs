//! Plots of a report directory: loss curves, a Dice bar chart and an
//! embedding scatter as SVG, and segmentation overlays as PNG.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{parse_config_str, ExperimentConfig, Variant};
use crate::data::Slice2D;
use crate::error::{Error, Result};
use crate::training::parse_log_tsv;

use super::embed::{pca_2d, EmbeddingTable};
use super::report::fraction_label;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const CLASS_RGB: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

/// One test slice with its ground truth and a network's prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub volume: String,
    pub slice_index: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub truth: Vec<i32>,
    pub pred: Vec<i32>,
}

impl SamplePrediction {
    pub fn new(s: &Slice2D, pred: &Array2<i32>) -> Self {
        let (height, width) = s.side();
        Self {
            volume: s.source_volume.clone(),
            slice_index: s.slice_index,
            height,
            width,
            pixels: s.pixels.iter().copied().collect(),
            truth: s.labels.as_ref().map_or_else(|| vec![0; height * width], |l| l.iter().copied().collect()),
            pred: pred.iter().copied().collect(),
        }
    }
}

struct Frame {
    width: f64,
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
}

impl Frame {
    const DEFAULT: Frame = Frame { width: 640.0, height: 400.0, left: 60.0, right: 180.0, top: 40.0, bottom: 50.0 };

    fn plot_w(&self) -> f64 {
        self.width - self.left - self.right
    }

    fn plot_h(&self) -> f64 {
        self.height - self.top - self.bottom
    }
}

fn svg_open(f: &Frame, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
        f.width, f.height, f.width, f.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, f.width / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        f.left,
        f.top,
        f.plot_w(),
        f.plot_h()
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axis_ticks(s: &mut String, f: &Frame, (x0, x1): (f64, f64), (y0, y1): (f64, f64), xlabel: &str, ylabel: &str) {
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let y = f.top + f.plot_h() * (1.0 - t);
        let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"##, f.left - 6.0, y + 4.0, y0 + t * (y1 - y0));
        let x = f.left + f.plot_w() * t;
        let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"##, x, f.top + f.plot_h() + 16.0, x0 + t * (x1 - x0));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.left + f.plot_w() / 2.0, f.height - 10.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        f.top + f.plot_h() / 2.0,
        f.top + f.plot_h() / 2.0,
        escape(ylabel)
    );
}

fn legend(s: &mut String, f: &Frame, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = f.top + 10.0 + 18.0 * i as f64;
        let x = f.width - f.right + 12.0;
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/>"#, y - 10.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 18.0, escape(name));
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart of `(x, y)` series.
pub fn line_chart_svg(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let f = Frame::DEFAULT;
    let (x0, x1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let mut s = svg_open(&f, title);
    axis_ticks(&mut s, &f, (x0, x1), (y0, y1), xlabel, ylabel);
    for (i, (_, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    f.left + f.plot_w() * (x - x0) / (x1 - x0),
                    f.top + f.plot_h() * (1.0 - (y - y0) / (y1 - y0))
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            path.join(" ")
        );
    }
    legend(&mut s, &f, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per category, one bar per series, with
/// optional error bars. `values[series][category] = (mean, std)`.
pub fn bar_chart_svg(title: &str, categories: &[String], series: &[String], values: &[Vec<Option<(f64, f64)>>]) -> String {
    let f = Frame::DEFAULT;
    let mut s = svg_open(&f, title);
    let group_w = f.plot_w() / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let y = f.top + f.plot_h() * (1.0 - t);
        let _ = writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.2}</text>"##, f.left - 6.0, y + 4.0);
        let _ = writeln!(s, r##"<line x1="{:.1}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##, f.left, f.left + f.plot_w());
    }
    for (c, cat) in categories.iter().enumerate() {
        let gx = f.left + group_w * c as f64 + group_w * 0.1;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            f.left + group_w * (c as f64 + 0.5),
            f.top + f.plot_h() + 16.0,
            escape(cat)
        );
        for (k, row) in values.iter().enumerate() {
            let Some((mean, std)) = row.get(c).copied().flatten() else { continue };
            let h = f.plot_h() * mean.clamp(0.0, 1.0);
            let x = gx + bar_w * k as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
                f.top + f.plot_h() - h,
                bar_w * 0.9,
                PALETTE[k % PALETTE.len()]
            );
            if std > 0.0 {
                let cx = x + bar_w * 0.45;
                let y_hi = f.top + f.plot_h() * (1.0 - (mean + std).clamp(0.0, 1.0));
                let y_lo = f.top + f.plot_h() * (1.0 - (mean - std).clamp(0.0, 1.0));
                let _ = writeln!(s, r##"<line x1="{cx:.2}" x2="{cx:.2}" y1="{y_hi:.2}" y2="{y_lo:.2}" stroke="#000"/>"##);
            }
        }
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">label fraction</text>"#, f.left + f.plot_w() / 2.0, f.height - 10.0);
    legend(&mut s, &f, series);
    s.push_str("</svg>\n");
    s
}

/// Scatter of 2-D points coloured by class.
pub fn scatter_svg(title: &str, points: &[[f64; 2]], labels: &[i32]) -> String {
    let f = Frame::DEFAULT;
    let (x0, x1) = bounds(points.iter().map(|p| p[0]));
    let (y0, y1) = bounds(points.iter().map(|p| p[1]));
    let mut s = svg_open(&f, title);
    axis_ticks(&mut s, &f, (x0, x1), (y0, y1), "principal direction 1", "principal direction 2");
    for (p, &k) in points.iter().zip(labels) {
        let [r, g, b] = CLASS_RGB[k.rem_euclid(CLASS_RGB.len() as i32) as usize];
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="rgb({r},{g},{b})" fill-opacity="0.6"/>"#,
            f.left + f.plot_w() * (p[0] - x0) / (x1 - x0),
            f.top + f.plot_h() * (1.0 - (p[1] - y0) / (y1 - y0))
        );
    }
    let mut classes: Vec<i32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for (i, k) in classes.iter().enumerate() {
        let y = f.top + 10.0 + 18.0 * i as f64;
        let x = f.width - f.right + 12.0;
        let [r, g, b] = CLASS_RGB[k.rem_euclid(CLASS_RGB.len() as i32) as usize];
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="rgb({r},{g},{b})"/>"#, y - 10.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">class {k}</text>"#, x + 18.0);
    }
    s.push_str("</svg>\n");
    s
}

const OVERLAY_SCALE: u32 = 4;
const OVERLAY_GAP: u32 = 4;

/// One row of panels: input, ground truth, then one prediction per entry of
/// `preds`. Labels are drawn over the grey image at half opacity.
pub fn overlay_panel(sample: &SamplePrediction, preds: &[&[i32]]) -> RgbImage {
    let (h, w) = (sample.height as u32, sample.width as u32);
    let panels = 2 + preds.len() as u32;
    let pw = w * OVERLAY_SCALE;
    let mut img = RgbImage::from_pixel(panels * pw + (panels - 1) * OVERLAY_GAP, h * OVERLAY_SCALE, Rgb([255, 255, 255]));
    let (lo, hi) = sample.pixels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let grey = |i: usize| (((sample.pixels[i] - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
    let mut masks: Vec<Option<&[i32]>> = vec![None, Some(&sample.truth)];
    masks.extend(preds.iter().map(|p| Some(*p)));
    for (panel, mask) in masks.iter().enumerate() {
        let x_off = panel as u32 * (pw + OVERLAY_GAP);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                let g = grey(i);
                let px = match mask.map(|m| m[i]) {
                    Some(k) if k > 0 => {
                        let c = CLASS_RGB[k as usize % CLASS_RGB.len()];
                        Rgb([((g as u16 + c[0] as u16) / 2) as u8, ((g as u16 + c[1] as u16) / 2) as u8, ((g as u16 + c[2] as u16) / 2) as u8])
                    }
                    _ => Rgb([g, g, g]),
                };
                for dy in 0..OVERLAY_SCALE {
                    for dx in 0..OVERLAY_SCALE {
                        img.put_pixel(x_off + x * OVERLAY_SCALE + dx, y * OVERLAY_SCALE + dy, px);
                    }
                }
            }
        }
    }
    img
}

/// What [`emit_plots`] produced and which inputs it could not find.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSummary {
    pub written: Vec<PathBuf>,
    pub missing: Vec<String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cell_dir(dir: &Path, fold: usize, fraction: f64, v: Variant) -> PathBuf {
    dir.join(format!("fold{fold}")).join(format!("frac{fraction}")).join(v.slug())
}

fn read_losses(path: &Path) -> Option<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).ok()?;
    let rows = parse_log_tsv(&text).ok()?;
    (!rows.is_empty()).then(|| rows.into_iter().map(|(_, e, l)| (e as f64, l)).collect())
}

/// Renders every plot whose inputs exist under a report directory into
/// `dir/plots`. Fails listing the expected files when nothing can be drawn.
pub fn emit_plots(dir: &Path) -> Result<PlotSummary> {
    let cfg_path = dir.join("config.toml");
    let cfg: ExperimentConfig = match fs::read_to_string(&cfg_path) {
        Ok(text) => parse_config_str(&text, &[])?,
        Err(_) => {
            return Err(Error::MissingArtifacts {
                dir: dir.to_path_buf(),
                missing: vec!["config.toml".into(), "summary.tsv".into(), "fold0/...".into()],
            })
        }
    };
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let variants = &cfg.experiment.variants;
    let fraction = cfg.experiment.label_fractions[0];
    let mut summary = PlotSummary { written: Vec::new(), missing: Vec::new() };

    // loss curves per stage, fold 0 at the first fraction
    let mut stage_series: Vec<(&str, Vec<(String, Vec<(f64, f64)>)>)> =
        vec![("global", Vec::new()), ("local", Vec::new()), ("finetune", Vec::new())];
    let global_log = dir.join("fold0/global/epochs.tsv");
    match read_losses(&global_log) {
        Some(pts) => stage_series[0].1.push(("global".into(), pts)),
        None if variants.iter().any(|v| v.uses_global()) => summary.missing.push("fold0/global/epochs.tsv".into()),
        None => {}
    }
    for &v in variants {
        let cd = cell_dir(dir, 0, fraction, v);
        if v.local_strategy().is_some() {
            match read_losses(&cd.join("local_epochs.tsv")) {
                Some(pts) => stage_series[1].1.push((v.name().into(), pts)),
                None => summary.missing.push(format!("{}/local_epochs.tsv", cd.strip_prefix(dir).unwrap_or(&cd).display())),
            }
        }
        match read_losses(&cd.join("finetune_epochs.tsv")) {
            Some(pts) => stage_series[2].1.push((v.name().into(), pts)),
            None => summary.missing.push(format!("{}/finetune_epochs.tsv", cd.strip_prefix(dir).unwrap_or(&cd).display())),
        }
    }
    for (stage, series) in &stage_series {
        if series.is_empty() {
            continue;
        }
        let path = plots.join(format!("loss_{stage}.svg"));
        let title = format!("{stage} stage loss (fold 0, {} labels)", fraction_label(fraction));
        write_file(&path, line_chart_svg(&title, "epoch", "mean loss", series).as_bytes())?;
        summary.written.push(path);
    }

    // Dice bars from the summary
    match fs::read_to_string(dir.join("summary.tsv")) {
        Ok(text) => {
            let fractions = &cfg.experiment.label_fractions;
            let mut values = vec![vec![None; fractions.len()]; variants.len()];
            for line in text.lines().skip(1) {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() < 5 {
                    continue;
                }
                let (Some(v), Ok(f), Ok(m), Ok(sd)) =
                    (Variant::from_name(cols[0]), cols[1].parse::<f64>(), cols[3].parse::<f64>(), cols[4].parse::<f64>())
                else {
                    continue;
                };
                if let (Some(i), Some(j)) = (variants.iter().position(|&x| x == v), fractions.iter().position(|&x| x == f)) {
                    values[i][j] = Some((m, sd));
                }
            }
            let cats: Vec<String> = fractions.iter().map(|&f| fraction_label(f)).collect();
            let names: Vec<String> = variants.iter().map(|v| v.name().to_string()).collect();
            let path = plots.join("dice_bars.svg");
            write_file(&path, bar_chart_svg("mean test Dice over folds", &cats, &names, &values).as_bytes())?;
            summary.written.push(path);
        }
        Err(_) => summary.missing.push("summary.tsv".into()),
    }

    // embedding scatter: prefer a cell with a local stage
    let preferred = [Variant::GlobalLocalBlock, Variant::GlobalLocalStride, Variant::LocalBlock, Variant::LocalStride];
    let source = preferred
        .iter()
        .chain(variants.iter())
        .map(|&v| (v, cell_dir(dir, 0, fraction, v).join("embeddings.tsv")))
        .find(|(v, p)| variants.contains(v) && p.exists());
    match source {
        Some((v, p)) => {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let table = EmbeddingTable::from_tsv(&text, 0)?;
            let labels: Vec<i32> = table.rows.iter().map(|r| r.label).collect();
            let path = plots.join("embedding_scatter.svg");
            let title = format!("level-1 embeddings, {v} (fold 0, {} labels)", fraction_label(fraction));
            write_file(&path, scatter_svg(&title, &pca_2d(&table), &labels).as_bytes())?;
            summary.written.push(path);
        }
        None => summary.missing.push("fold0/.../embeddings.tsv".into()),
    }

    // segmentation overlays
    let mut samples = Vec::new();
    for &v in variants {
        let p = cell_dir(dir, 0, fraction, v).join("sample.json");
        match fs::read(&p) {
            Ok(bytes) => samples.push((v, serde_json::from_slice::<SamplePrediction>(&bytes)?)),
            Err(_) => summary.missing.push(format!("{}", p.strip_prefix(dir).unwrap_or(&p).display())),
        }
    }
    if let Some((_, first)) = samples.first() {
        let preds: Vec<&[i32]> = samples.iter().map(|(_, s)| s.pred.as_slice()).collect();
        let img = overlay_panel(first, &preds);
        let path = plots.join("overlay.png");
        img.save(&path).map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
        summary.written.push(path);
        let mut legend = String::from("columns: input, ground truth");
        for (v, _) in &samples {
            let _ = write!(legend, ", {v}");
        }
        let _ = writeln!(legend, "\nslice: {} #{}", first.volume, first.slice_index);
        let path = plots.join("overlay.txt");
        write_file(&path, legend.as_bytes())?;
        summary.written.push(path);
    }

    if summary.written.is_empty() {
        return Err(Error::MissingArtifacts { dir: dir.to_path_buf(), missing: summary.missing });
    }
    Ok(summary)
}
