//! Position-embedding geometry: PCA projection, explained variance and an SVG scatter.

use std::fmt::Write as _;
use std::path::Path;

use mjp_core::metrics::{pca_fit_project, EvRow, PcaProjection};
use mjp_core::model::{names, TransformerModel};
use mjp_core::Tensor;

use crate::error::{LabError, LabResult};

/// Every index is labeled up to this many positions, every third beyond it.
pub const LABEL_ALL_UP_TO: usize = 100;

pub struct PeExport {
    pub projection: PcaProjection,
    /// The shared unknown-position row in the same coordinates.
    pub unk: Vec<f64>,
    /// Cumulative explained variance at every dimension up to full rank.
    pub variance: Vec<EvRow>,
    /// Row labels: position indices, with `cls` for a classification slot.
    pub labels: Vec<String>,
}

/// Fit PCA on the position table and place the unknown row with the same basis.
pub fn project_pe(model: &TransformerModel, dims: usize) -> LabResult<PeExport> {
    if !(2..=3).contains(&dims) {
        return Err(LabError::Config(format!("export dimensions must be 2 or 3, got {dims}")));
    }
    let pos = model.param(names::POS)?;
    let unk = model.param(names::UNK)?;
    let projection = pca_fit_project(pos, dims)?;
    let d = pos.shape()[1];
    let centered = Tensor::from_fn(&[1, d], |j| unk.data()[j] - projection.mean[j]);
    let unk_xy = centered.matmul(&projection.components.transpose_last2()?)?.data().to_vec();
    let full = pos.shape()[0].min(d);
    let variance = mjp_core::metrics::explained_variance_table(&[("pe".to_string(), pos.clone())], &(1..=full).collect::<Vec<_>>())?;
    let offset = model.config.cls_offset();
    let labels = (0..pos.shape()[0])
        .map(|i| if i < offset { "cls".to_string() } else { (i - offset).to_string() })
        .collect();
    Ok(PeExport {
        projection,
        unk: unk_xy,
        variance,
        labels,
    })
}

impl PeExport {
    /// `index,pc1,pc2[,pc3]`, one row per position, the unknown row last as `unk`.
    pub fn projection_csv(&self) -> String {
        let k = self.projection.projected.shape()[1];
        let mut out = String::from("index");
        for c in 1..=k {
            write!(out, ",pc{c}").expect("writing to a string");
        }
        out.push('\n');
        let rows = self.labels.iter().enumerate().map(|(i, l)| (l.as_str(), self.projection.projected.row(i)));
        for (label, coords) in rows.chain(std::iter::once(("unk", self.unk.as_slice()))) {
            out.push_str(label);
            for v in coords {
                write!(out, ",{v}").expect("writing to a string");
            }
            out.push('\n');
        }
        out
    }

    /// `dim,ratio,cumulative_percent` for every dimension up to full rank.
    pub fn variance_csv(&self) -> String {
        let sv = &self.projection.singular_values;
        let total: f64 = sv.iter().map(|s| s * s).sum();
        let mut out = String::from("dim,ratio,cumulative_percent\n");
        for row in &self.variance {
            let s = sv[row.dim - 1];
            let ratio = if total > 0.0 { s * s / total } else { 0.0 };
            writeln!(out, "{},{},{}", row.dim, ratio, row.ev_percent).expect("writing to a string");
        }
        out
    }

    /// First two components as a labeled scatter; the unknown row is a red square.
    pub fn scatter_svg(&self) -> String {
        let (w, h, m) = (640.0, 640.0, 56.0);
        let p = &self.projection.projected;
        let n = p.shape()[0];
        let pts: Vec<(f64, f64)> = (0..n).map(|i| (p.at(&[i, 0]), p.at(&[i, 1]))).collect();
        let all = pts.iter().copied().chain(std::iter::once((self.unk[0], self.unk[1])));
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in all {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let span = |a: f64, b: f64| if b - a > 0.0 { b - a } else { 1.0 };
        let (sx, sy) = ((w - 2.0 * m) / span(x0, x1), (h - 2.0 * m) / span(y0, y1));
        let px = |x: f64| m + (x - x0) * sx;
        let py = |y: f64| h - m - (y - y0) * sy;
        let ev = &self.projection.explained_variance_ratio;
        let mut s = String::new();
        writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#).unwrap();
        writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
        writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
        writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
        for t in 0..=4 {
            let f = t as f64 / 4.0;
            let (vx, vy) = (x0 + f * span(x0, x1), y0 + f * span(y0, y1));
            writeln!(s, r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="black"/><text x="{0:.2}" y="{3}" font-size="10" text-anchor="middle">{4:.3}</text>"#, px(vx), h - m, h - m + 5.0, h - m + 17.0, vx).unwrap();
            writeln!(s, r#"<line x1="{0}" y1="{1:.2}" x2="{2}" y2="{1:.2}" stroke="black"/><text x="{3}" y="{4:.2}" font-size="10" text-anchor="end">{5:.3}</text>"#, m - 5.0, py(vy), m, m - 7.0, py(vy) + 3.0, vy).unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">PC1 ({:.1}%)</text>"#, w / 2.0, h - 12.0, 100.0 * ev[0]).unwrap();
        writeln!(s, r#"<text x="14" y="{0}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {0})">PC2 ({1:.1}%)</text>"#, h / 2.0, 100.0 * ev[1]).unwrap();
        let step = if n <= LABEL_ALL_UP_TO { 1 } else { 3 };
        for (i, &(x, y)) in pts.iter().enumerate() {
            writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f77b4"/>"##, px(x), py(y)).unwrap();
            if i % step == 0 {
                writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="9">{}</text>"#, px(x) + 4.0, py(y) - 4.0, self.labels[i]).unwrap();
            }
        }
        let (ux, uy) = (px(self.unk[0]), py(self.unk[1]));
        writeln!(s, r##"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="#d62728"/>"##, ux - 4.0, uy - 4.0).unwrap();
        writeln!(s, r##"<text x="{:.2}" y="{:.2}" font-size="10" fill="#d62728">unk</text>"##, ux + 6.0, uy - 6.0).unwrap();
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, dir: &Path) -> LabResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        for (name, body) in [("projection.csv", self.projection_csv()), ("variance.csv", self.variance_csv()), ("scatter.svg", self.scatter_svg())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| LabError::io(&p, e))?;
        }
        Ok(())
    }
}

/// Project, then write `projection.csv`, `variance.csv` and `scatter.svg` into `out`.
pub fn export_pe(model: &TransformerModel, dims: usize, out: &Path) -> LabResult<PeExport> {
    let e = project_pe(model, dims)?;
    e.save(out)?;
    Ok(e)
}
