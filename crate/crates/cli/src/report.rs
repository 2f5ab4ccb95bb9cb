//! Human-readable report over a run directory: per-frame metric tables and, per
//! story, a frame grid with the raw decoded frames on top and the pipeline output
//! below (baseline runs have the raw row only).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use acdc_core::experiment::io::read_pgm;
use acdc_core::experiment::SIDE;

use crate::commands::Mode;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::rundir::RunDir;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportSummary {
    pub grids: usize,
    pub warnings: Vec<String>,
}

/// Binary PGM of a `width × height` image in [0, 1].
pub fn grid_pgm(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Lays out rows of frames as tiles of `SIDE·upscale` pixels.
pub fn frame_grid(rows: &[Vec<Vec<f64>>], upscale: usize) -> (usize, usize, Vec<f64>) {
    let tile = SIDE * upscale;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (w, h) = (cols * tile, rows.len() * tile);
    let mut px = vec![0.0; w * h];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, frame) in row.iter().enumerate() {
            for y in 0..tile {
                for x in 0..tile {
                    px[(ri * tile + y) * w + ci * tile + x] = frame[(y / upscale) * SIDE + x / upscale];
                }
            }
        }
    }
    (w, h, px)
}

fn read_frame(path: &Path) -> Option<Vec<f64>> {
    fs::read(path).ok().and_then(|b| read_pgm(&b).ok())
}

fn sorted_entries(path: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(path)
        .map(|it| it.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    names.sort();
    names
}

fn markdown_table(csv: &str, mode: Mode) -> String {
    let mut lines = csv.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(|h| match (h, mode.corrects()) {
            ("manifold_distance", true) => "corrected_manifold_distance".to_string(),
            _ => h.to_string(),
        })
        .collect();
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for l in lines {
        let cells: Vec<String> = l
            .split(',')
            .map(|c| c.parse::<f64>().map_or(c.to_string(), |v| if v.fract() == 0.0 { format!("{v}") } else { format!("{v:.4}") }))
            .collect();
        writeln!(out, "| {} |", cells.join(" | ")).ok();
    }
    out
}

/// Writes `report/report.md` and `report/<mode>/<story>_grid.pgm` for every run
/// found. Missing pieces are reported as warnings, not errors.
pub fn report(out: &Path) -> Result<ReportSummary> {
    if !out.is_dir() {
        return Err(CliError::NotFound(format!("run directory {}", out.display())));
    }
    let dir = RunDir::open(out)?;
    let target = dir.path("report");
    if target.exists() {
        fs::remove_dir_all(&target).map_err(CliError::io(&target))?;
    }
    let mut summary = ReportSummary::default();
    let mut md = String::from("# Run report\n");
    for mode in Mode::ALL {
        let sub = mode.dir();
        if !dir.exists(&sub) {
            continue;
        }
        writeln!(md, "\n## {} run\n", mode.name()).ok();
        let upscale = match dir.read_to_string(&format!("{sub}/config.toml")).and_then(|t| RunConfig::parse(&t)) {
            Ok(cfg) => cfg.report.upscale,
            Err(e) => {
                summary.warnings.push(format!("{sub}: no usable config snapshot ({e}); using defaults"));
                RunConfig::default().report.upscale
            }
        };
        match dir.read_to_string(&format!("{sub}/per_frame.csv")) {
            Ok(csv) => md.push_str(&markdown_table(&csv, mode)),
            Err(_) => summary.warnings.push(format!("{sub}: per_frame.csv is missing")),
        }
        let frames_root = dir.path(&format!("{sub}/frames"));
        let stories = sorted_entries(&frames_root);
        if stories.is_empty() {
            summary.warnings.push(format!("{sub}: no frames"));
        }
        for story in stories {
            let sdir = frames_root.join(&story);
            let mut raw = Vec::new();
            let mut output = Vec::new();
            for i in 1.. {
                let Some(r) = read_frame(&sdir.join(format!("raw_{i:03}.pgm"))) else { break };
                raw.push(r);
                if mode.corrects() {
                    match read_frame(&sdir.join(format!("output_{i:03}.pgm"))) {
                        Some(o) => output.push(o),
                        None => summary.warnings.push(format!("{sub}/{story}: output frame {i} is missing")),
                    }
                }
            }
            if raw.is_empty() {
                summary.warnings.push(format!("{sub}/{story}: no raw frames"));
                continue;
            }
            let mut rows = vec![raw];
            if mode.corrects() {
                if output.len() != rows[0].len() {
                    summary.warnings.push(format!("{sub}/{story}: incomplete output row, grid skipped"));
                    continue;
                }
                rows.push(output);
            }
            let (w, h, px) = frame_grid(&rows, upscale);
            dir.write(&format!("report/{}/{story}_grid.pgm", mode.name()), grid_pgm(w, h, &px))?;
            summary.grids += 1;
        }
    }
    if summary.grids == 0 && summary.warnings.is_empty() {
        summary.warnings.push("no completed runs found".into());
    }
    if !summary.warnings.is_empty() {
        md.push_str("\n## Warnings (partial report)\n\n");
        for w in &summary.warnings {
            writeln!(md, "- {w}").ok();
        }
    }
    dir.write("report/report.md", md)?;
    Ok(summary)
}
