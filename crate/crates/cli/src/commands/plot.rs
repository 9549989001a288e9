use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use idt_core::eval::{mean, read_jsonl, std_error, EpisodeLine};

use super::ensure_parent;
use crate::error::CliError;

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Evaluation JSON Lines files; each method found becomes one curve.
    pub reports: Vec<PathBuf>,
    /// SVG output path.
    #[arg(long, default_value = "returns.svg")]
    pub out: PathBuf,
    /// Optional CSV of the plotted points.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value = "Return per evaluation episode")]
    pub title: String,
}

/// Mean and standard error per episode for one curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub count: Vec<usize>,
}

pub fn curves(lines: &[(String, EpisodeLine)]) -> Vec<Curve> {
    let mut groups: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for (label, l) in lines {
        groups.entry(label.as_str()).or_default().entry(l.episode).or_default().push(l.episode_return);
    }
    groups
        .into_iter()
        .map(|(label, eps)| Curve {
            label: label.to_string(),
            mean: eps.values().map(|v| mean(v)).collect(),
            se: eps.values().map(|v| std_error(v)).collect(),
            count: eps.values().map(Vec::len).collect(),
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Deterministic SVG with one mean line and a shaded ±1 SE band per curve.
pub fn render_svg(curves: &[Curve], title: &str, provenance: &str) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 60.0, 160.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let n = curves.iter().map(|c| c.mean.len()).max().unwrap_or(1).max(2);
    let lo = curves.iter().flat_map(|c| c.mean.iter().zip(&c.se).map(|(m, s)| m - s)).fold(0.0f64, f64::min);
    let mut hi = curves.iter().flat_map(|c| c.mean.iter().zip(&c.se).map(|(m, s)| m + s)).fold(f64::MIN, f64::max);
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let x = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, "<desc>{}</desc>", escape(provenance)).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#, left + pw / 2.0, escape(title)).unwrap();
    writeln!(s, r#"<path d="M{left:.2},{top:.2}V{:.2}H{:.2}" fill="none" stroke="black"/>"#, top + ph, left + pw).unwrap();
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"#, left - 6.0, y(v) + 4.0).unwrap();
    }
    for k in 0..=4 {
        let i = (n - 1) * k / 4;
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, x(i), top + ph + 16.0, i + 1).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">episode</text>"#, left + pw / 2.0, h - 10.0).unwrap();
    for (ci, c) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let mut band = String::new();
        for (i, (m, e)) in c.mean.iter().zip(&c.se).enumerate() {
            write!(band, "{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, x(i), y(m + e)).unwrap();
        }
        for (i, (m, e)) in c.mean.iter().zip(&c.se).enumerate().rev() {
            write!(band, "L{:.2},{:.2}", x(i), y(m - e)).unwrap();
        }
        writeln!(s, r#"<path d="{band}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#).unwrap();
        let line: String = c.mean.iter().enumerate().map(|(i, m)| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, x(i), y(*m))).collect();
        writeln!(s, r#"<path d="{line}" fill="none" stroke="{color}" stroke-width="2"/>"#).unwrap();
        let ly = top + 16.0 * ci as f64 + 8.0;
        writeln!(s, r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, left + pw + 12.0, left + pw + 32.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#, left + pw + 38.0, ly + 4.0, escape(&c.label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn label_for(path: &Path, line: &EpisodeLine, methods_per_file: &BTreeMap<String, usize>) -> String {
    let method = line.method.name().to_string();
    if methods_per_file.get(&method).copied().unwrap_or(0) > 1 {
        format!("{method} ({})", path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
    } else {
        method
    }
}

pub fn run(args: &PlotArgs) -> Result<(), CliError> {
    if args.reports.is_empty() {
        return Err(CliError::Config("no report files given".into()));
    }
    let mut per_file = Vec::new();
    for p in &args.reports {
        let lines = read_jsonl(p).map_err(|e| match e {
            idt_core::Error::Io(io) => CliError::Io(format!("{}: {io}", p.display())),
            other => CliError::Config(format!("{}: {other}", p.display())),
        })?;
        per_file.push((p.clone(), lines));
    }
    let mut files_with_method: BTreeMap<String, usize> = BTreeMap::new();
    for (_, lines) in &per_file {
        let mut ms: Vec<&str> = lines.iter().map(|l| l.method.name()).collect();
        ms.dedup();
        ms.sort_unstable();
        ms.dedup();
        for m in ms {
            *files_with_method.entry(m.to_string()).or_default() += 1;
        }
    }
    let mut labelled = Vec::new();
    let mut hashes = Vec::new();
    let mut seeds = Vec::new();
    for (p, lines) in &per_file {
        for l in lines {
            labelled.push((label_for(p, l, &files_with_method), l.clone()));
            if let Some(h) = &l.config_hash {
                hashes.push(h.clone());
            }
            seeds.push(l.seed);
        }
    }
    if labelled.is_empty() {
        return Err(CliError::Config("report files contain no episodes".into()));
    }
    hashes.sort();
    hashes.dedup();
    seeds.sort_unstable();
    seeds.dedup();
    let cs = curves(&labelled);
    let provenance = format!("config_hash={} seeds={:?}", hashes.join(","), seeds);
    ensure_parent(&args.out)?;
    std::fs::write(&args.out, render_svg(&cs, &args.title, &provenance))?;
    if let Some(csv_path) = &args.csv {
        let mut csv = String::from("curve,episode,mean_return,std_error,count\n");
        for c in &cs {
            for i in 0..c.mean.len() {
                writeln!(csv, "{},{},{},{},{}", c.label, i + 1, c.mean[i], c.se[i], c.count[i]).unwrap();
            }
        }
        writeln!(csv, "# {provenance}").unwrap();
        ensure_parent(csv_path)?;
        std::fs::write(csv_path, csv)?;
    }
    println!("{}", args.out.display());
    Ok(())
}
