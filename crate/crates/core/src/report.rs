//! Sample plots and comparison tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Matrix;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Write samples in the natural format for the dataset: an SVG scatter for
/// 2-D data, a PNG grid for images, CSV otherwise.
pub fn write_samples(dir: &Path, stem: &str, samples: &Matrix, dataset: &Dataset) -> Result<PathBuf> {
    let shape = dataset.data_shape();
    if shape == [2] {
        let path = dir.join(format!("{stem}.svg"));
        let svg = scatter_svg(samples, dataset.centers().as_ref());
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    } else if shape.len() == 2 {
        let path = dir.join(format!("{stem}.png"));
        write_image_grid(&path, samples, shape[0], shape[1], 8)?;
        Ok(path)
    } else {
        let path = dir.join(format!("{stem}.csv"));
        let mut s = String::new();
        for row in samples.rows() {
            let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(s, "{}", cells.join(",")).expect("string write");
        }
        std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Scatter plot of 2-D points, with optional mode centers drawn as rings.
pub fn scatter_svg(points: &Matrix, centers: Option<&Matrix>) -> String {
    const SIZE: f64 = 480.0;
    let mut extent: f64 = 1.0;
    for v in points.iter().chain(centers.into_iter().flat_map(|c| c.iter())) {
        if v.is_finite() {
            extent = extent.max(v.abs());
        }
    }
    extent *= 1.1;
    let map = |x: f64, y: f64| ((x / extent + 1.0) * SIZE / 2.0, (1.0 - y / extent) * SIZE / 2.0);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
    for row in points.rows() {
        if row[0].is_finite() && row[1].is_finite() {
            let (x, y) = map(row[0], row[1]);
            writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="#1f5fa8" fill-opacity="0.5"/>"##)
                .expect("string write");
        }
    }
    if let Some(c) = centers {
        for row in c.rows() {
            let (x, y) = map(row[0], row[1]);
            writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="6" fill="none" stroke="#c0392b"/>"##)
                .expect("string write");
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Grayscale grid, values mapped from `[-1, 1]` to `[0, 255]`.
pub fn write_image_grid(path: &Path, samples: &Matrix, h: usize, w: usize, cols: usize) -> Result<()> {
    let n = samples.nrows().clamp(1, 64);
    let cols = cols.min(n).max(1);
    let rows = n.div_ceil(cols);
    let mut img = image::GrayImage::new((cols * (w + 1)) as u32, (rows * (h + 1)) as u32);
    for i in 0..n.min(samples.nrows()) {
        let (gr, gc) = (i / cols, i % cols);
        for r in 0..h {
            for c in 0..w {
                let v = samples[[i, r * w + c]];
                let p = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                img.put_pixel((gc * (w + 1) + c) as u32, (gr * (h + 1) + r) as u32, image::Luma([p]));
            }
        }
    }
    img.save(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Fixed-width markdown table.
pub fn markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = line(header.to_vec());
    s.push_str(&line(widths.iter().map(|_| "").collect()).replace(' ', "-"));
    for r in rows {
        s.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    s
}
