//! Loss-curve rendering: one panel per loss column, one line per run.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub label: String,
    pub columns: Vec<String>,
    /// One row per step; the first column is the step.
    pub rows: Vec<Vec<f64>>,
}

/// Reads a loss CSV written by `train`.
pub fn read_run(path: &Path) -> Result<Run> {
    let csv_err = |line: u64, msg: String| CliError::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            other => csv_err(1, format!("{other:?}")),
        })?;
    let columns: Vec<String> = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.iter().map(str::to_string).collect();
    if columns.len() < 2 {
        return Err(csv_err(1, "need a step column and at least one loss column".into()));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != columns.len() {
            return Err(csv_err(line, format!("{} fields, header has {}", rec.len(), columns.len())));
        }
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| csv_err(line, format!("not a number: `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(csv_err(1, "no data rows".into()));
    }
    let label = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(Run { label, columns, rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

/// Panels in first-run column order; a run lacking a column contributes no line to it.
pub fn panels(runs: &[Run]) -> Vec<Panel> {
    let mut titles: Vec<&String> = Vec::new();
    for r in runs {
        for c in &r.columns[1..] {
            if !titles.contains(&c) {
                titles.push(c);
            }
        }
    }
    titles
        .into_iter()
        .map(|t| Panel {
            title: t.clone(),
            series: runs
                .iter()
                .filter_map(|r| {
                    let k = r.columns.iter().position(|c| c == t)?;
                    Some(Series {
                        label: r.label.clone(),
                        points: r.rows.iter().map(|row| (row[0], row[k])).filter(|(_, y)| y.is_finite()).collect(),
                    })
                })
                .collect(),
        })
        .collect()
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const PANEL_W: u32 = 240;
const PANEL_H: u32 = 160;
const LEGEND_ROW: u32 = 12;

pub fn render(panels: &[Panel], legend: &[String]) -> RgbImage {
    let cols = 3u32.min(panels.len().max(1) as u32);
    let rows = (panels.len() as u32).div_ceil(cols).max(1);
    let top = 6 + LEGEND_ROW * legend.len() as u32;
    let mut img = RgbImage::from_pixel(cols * PANEL_W, top + rows * PANEL_H, Rgb([255, 255, 255]));
    for (i, name) in legend.iter().enumerate() {
        let y = 4 + LEGEND_ROW * i as u32;
        fill(&mut img, 6, y + 1, 10, 5, PALETTE[i % PALETTE.len()]);
        text(&mut img, 20, y, name, [0, 0, 0]);
    }
    for (p, panel) in panels.iter().enumerate() {
        let x0 = (p as u32 % cols) * PANEL_W;
        let y0 = top + (p as u32 / cols) * PANEL_H;
        draw_panel(&mut img, x0, y0, panel, legend);
    }
    img
}

fn draw_panel(img: &mut RgbImage, x0: u32, y0: u32, panel: &Panel, legend: &[String]) {
    text(img, x0 + 8, y0 + 4, &panel.title, [0, 0, 0]);
    let (px, py, pw, ph) = (x0 + 8, y0 + 16, PANEL_W - 16, PANEL_H - 28);
    let pts = panel.series.iter().flat_map(|s| s.points.iter());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmin > xmax {
        return;
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let grey = [200, 200, 200];
    fill(img, px, py, pw, 1, grey);
    fill(img, px, py + ph, pw, 1, grey);
    fill(img, px, py, 1, ph, grey);
    fill(img, px + pw, py, 1, ph + 1, grey);
    text(img, px + 2, py + ph + 3, &short(ymin), [90, 90, 90]);
    text(img, px + 2, py + 2, &short(ymax), [90, 90, 90]);
    let map = |(x, y): (f64, f64)| {
        let u = px as f64 + (x - xmin) / (xmax - xmin) * pw as f64;
        let v = (py + ph) as f64 - (y - ymin) / (ymax - ymin) * ph as f64;
        (u, v)
    };
    for s in &panel.series {
        let colour = PALETTE[legend.iter().position(|l| *l == s.label).unwrap_or(0) % PALETTE.len()];
        for w in s.points.windows(2) {
            line(img, map(w[0]), map(w[1]), colour);
        }
        if s.points.len() == 1 {
            let (u, v) = map(s.points[0]);
            fill(img, u as u32, v as u32, 2, 2, colour);
        }
    }
}

fn short(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn fill(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, c: [u8; 3]) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.put_pixel(xx, yy, Rgb(c));
        }
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: [u8; 3]) {
    let n = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

/// 5×7 glyphs, one byte per row, low five bits used, most significant bit leftmost.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        'A' => [14, 17, 17, 31, 17, 17, 17],
        'B' => [30, 17, 17, 30, 17, 17, 30],
        'C' => [14, 17, 16, 16, 16, 17, 14],
        'D' => [30, 17, 17, 17, 17, 17, 30],
        'E' => [31, 16, 16, 30, 16, 16, 31],
        'F' => [31, 16, 16, 30, 16, 16, 16],
        'G' => [14, 17, 16, 23, 17, 17, 15],
        'H' => [17, 17, 17, 31, 17, 17, 17],
        'I' => [14, 4, 4, 4, 4, 4, 14],
        'J' => [7, 2, 2, 2, 2, 18, 12],
        'K' => [17, 18, 20, 24, 20, 18, 17],
        'L' => [16, 16, 16, 16, 16, 16, 31],
        'M' => [17, 27, 21, 21, 17, 17, 17],
        'N' => [17, 17, 25, 21, 19, 17, 17],
        'O' => [14, 17, 17, 17, 17, 17, 14],
        'P' => [30, 17, 17, 30, 16, 16, 16],
        'Q' => [14, 17, 17, 17, 21, 18, 13],
        'R' => [30, 17, 17, 30, 20, 18, 17],
        'S' => [15, 16, 16, 14, 1, 1, 30],
        'T' => [31, 4, 4, 4, 4, 4, 4],
        'U' => [17, 17, 17, 17, 17, 17, 14],
        'V' => [17, 17, 17, 17, 17, 10, 4],
        'W' => [17, 17, 17, 21, 21, 21, 10],
        'X' => [17, 17, 10, 4, 10, 17, 17],
        'Y' => [17, 17, 10, 4, 4, 4, 4],
        'Z' => [31, 1, 2, 4, 8, 16, 31],
        '0' => [14, 17, 19, 21, 25, 17, 14],
        '1' => [4, 12, 4, 4, 4, 4, 14],
        '2' => [14, 17, 1, 2, 4, 8, 31],
        '3' => [31, 2, 4, 2, 1, 17, 14],
        '4' => [2, 6, 10, 18, 31, 2, 2],
        '5' => [31, 16, 30, 1, 1, 17, 14],
        '6' => [6, 8, 16, 30, 17, 17, 14],
        '7' => [31, 1, 2, 4, 8, 8, 8],
        '8' => [14, 17, 17, 14, 17, 17, 14],
        '9' => [14, 17, 17, 15, 1, 2, 12],
        '.' => [0, 0, 0, 0, 0, 12, 12],
        '-' => [0, 0, 0, 31, 0, 0, 0],
        '+' => [0, 4, 4, 31, 4, 4, 0],
        '_' => [0, 0, 0, 0, 0, 0, 31],
        '/' => [1, 1, 2, 4, 8, 16, 16],
        ':' => [0, 12, 12, 0, 12, 12, 0],
        ' ' => [0; 7],
        _ => [31, 17, 17, 17, 17, 17, 31],
    }
}

fn text(img: &mut RgbImage, x: u32, y: u32, s: &str, c: [u8; 3]) {
    for (i, ch) in s.chars().enumerate() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (16 >> col) != 0 {
                    let (px, py) = (x + 6 * i as u32 + col, y + row as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb(c));
                    }
                }
            }
        }
    }
}

/// Reads every CSV and writes the chart; returns the panels drawn.
pub fn plot(paths: &[PathBuf], out: &Path) -> Result<Vec<Panel>> {
    if paths.is_empty() {
        return Err(CliError::Usage("plot needs at least one CSV".into()));
    }
    let runs = paths.iter().map(|p| read_run(p)).collect::<Result<Vec<_>>>()?;
    let legend: Vec<String> = runs.iter().map(|r| r.label.clone()).collect();
    let ps = panels(&runs);
    crate::data::save_rgb(&render(&ps, &legend), out)?;
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn one_curve_per_column_and_run() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "step,d,g\n0,1.0,2.0\n1,0.5,2.5\n");
        let b = write(dir.path(), "b.csv", "step,d,g\n0,1.5,2.0\n");
        let out = dir.path().join("p.png");
        let ps = plot(&[a.clone()], &out).unwrap();
        assert_eq!(ps.len(), 2);
        assert!(ps.iter().all(|p| p.series.len() == 1));
        let ps = plot(&[a, b], &out).unwrap();
        let labels: Vec<&str> = ps[0].series.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, ["a.csv", "b.csv"]);
        assert!(image::open(&out).is_ok());
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.csv", "step,d\n0,1.0\n1,oops\n");
        let e = read_run(&p).unwrap_err().to_string();
        assert!(e.starts_with("csv error:") && e.contains("line 3"), "{e}");
        let p = write(dir.path(), "short.csv", "step,d\n0,1.0\n1\n");
        assert!(read_run(&p).unwrap_err().to_string().contains("line 3"));
        let p = write(dir.path(), "empty.csv", "");
        assert!(read_run(&p).is_err());
        let p = write(dir.path(), "header.csv", "step,d\n");
        assert!(read_run(&p).unwrap_err().to_string().contains("no data rows"));
    }
}
