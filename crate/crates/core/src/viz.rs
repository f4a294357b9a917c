//! PCA projection of statistical vs synthetic flows.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::flows::{mean_row_cosine, FlowMatrix};
use crate::fsutil::write_atomic;
use crate::statistics::StatFlow;

/// Two-component PCA fit.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub mean: Array1<f64>,
    /// 2 x F, rows are unit principal directions.
    pub components: Array2<f64>,
    pub explained_variance: [f64; 2],
}

impl Pca2 {
    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        let (n, f) = data.dim();
        if n < 2 || f == 0 {
            return Err(Error::Shape(format!("PCA needs at least two rows, got {n}x{f}")));
        }
        let mean = data.mean_axis(Axis(0)).expect("nonempty");
        let centered = &data - &mean;
        let m = DMatrix::from_fn(n, f, |i, j| centered[[i, j]]);
        let svd = m.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Invariant("SVD returned no right vectors".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut components = Array2::zeros((2, f));
        let mut explained_variance = [0.0; 2];
        for (k, &idx) in order.iter().take(2).enumerate() {
            for j in 0..f {
                components[[k, j]] = vt[(idx, j)];
            }
            let s = svd.singular_values[idx];
            explained_variance[k] = s * s / (n - 1) as f64;
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    /// Coordinates of centered rows in the principal plane.
    pub fn project(&self, data: ArrayView2<f64>) -> Array2<f64> {
        (&data - &self.mean).dot(&self.components.t())
    }

    /// Maps 2-D coordinates back to feature space.
    pub fn reconstruct(&self, coords: ArrayView2<f64>) -> Array2<f64> {
        coords.dot(&self.components) + &self.mean
    }

    /// Projects a direction (no centering), for drawing arrows from the origin.
    pub fn project_direction(&self, data: ArrayView2<f64>) -> Array2<f64> {
        data.dot(&self.components.t())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowArrow {
    pub class: usize,
    pub statistical: [f64; 2],
    pub synthetic: [f64; 2],
    pub cosine: f64,
}

#[derive(Debug, Clone)]
pub struct FlowPlot {
    pub arrows: Vec<FlowArrow>,
    /// Mean per-class cosine over all classes, on a 0-1 scale.
    pub mean_cosine: f64,
    pub explained_variance: [f64; 2],
}

/// Fits PCA on the union of both flow sets and keeps the first `k_classes` arrows.
pub fn emit_flow_plot(stats_flow: &StatFlow, synthetic: &FlowMatrix, k_classes: usize) -> Result<FlowPlot> {
    let stat = stats_flow.matrix().view();
    if stat.dim() != synthetic.0.dim() {
        return Err(Error::Shape(format!("statistical flow {:?} vs synthetic flow {:?}", stat.dim(), synthetic.0.dim())));
    }
    let c = stat.nrows();
    if k_classes > c {
        return Err(Error::Validation(format!("asked for {k_classes} classes but the flows have {c}")));
    }
    let union = ndarray::concatenate(Axis(0), &[stat, synthetic.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let pca = Pca2::fit(union.view())?;
    let ps = pca.project_direction(stat);
    let py = pca.project_direction(synthetic.view());
    let cosines = crate::flows::rowwise_cosine(stat, synthetic.view())?;
    let arrows = (0..k_classes)
        .map(|i| FlowArrow {
            class: i,
            statistical: [ps[[i, 0]], ps[[i, 1]]],
            synthetic: [py[[i, 0]], py[[i, 1]]],
            cosine: cosines[i].unwrap_or(0.0),
        })
        .collect();
    Ok(FlowPlot {
        arrows,
        mean_cosine: mean_row_cosine(stat, synthetic.view())?,
        explained_variance: pca.explained_variance,
    })
}

fn hue(i: usize, n: usize) -> [u8; 3] {
    let h = i as f64 / n.max(1) as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 200.0) as u8, (g * 200.0) as u8, (b * 200.0) as u8]
}

fn draw_line(img: &mut RgbImage, from: (f64, f64), to: (f64, f64), color: [u8; 3], dashed: bool) {
    let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        if dashed && (s / 4) % 2 == 1 {
            continue;
        }
        let t = s as f64 / steps as f64;
        let x = (from.0 + t * (to.0 - from.0)).round();
        let y = (from.1 + t * (to.1 - from.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

impl FlowPlot {
    /// Arrows from the origin; statistical flows solid, synthetic dashed.
    pub fn render(&self, size: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
        let extent = self
            .arrows
            .iter()
            .flat_map(|a| a.statistical.iter().chain(&a.synthetic))
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let half = size as f64 / 2.0;
        let scale = 0.9 * half / extent;
        let to_px = |p: [f64; 2]| (half + p[0] * scale, half - p[1] * scale);
        let grey = [200, 200, 200];
        draw_line(&mut img, (0.0, half), (size as f64 - 1.0, half), grey, false);
        draw_line(&mut img, (half, 0.0), (half, size as f64 - 1.0), grey, false);
        for a in &self.arrows {
            let color = hue(a.class, self.arrows.len());
            draw_line(&mut img, (half, half), to_px(a.statistical), color, false);
            draw_line(&mut img, (half, half), to_px(a.synthetic), color, true);
            let (x, y) = to_px(a.statistical);
            for dx in -2i32..=2 {
                for dy in -2i32..=2 {
                    let (px, py) = (x.round() as i64 + dx as i64, y.round() as i64 + dy as i64);
                    if px >= 0 && py >= 0 && (px as u32) < size && (py as u32) < size {
                        img.put_pixel(px as u32, py as u32, Rgb(color));
                    }
                }
            }
        }
        img
    }

    /// Class-ascending CSV with cosines on a 0-1 scale.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,stat_x,stat_y,syn_x,syn_y,cosine\n");
        for a in &self.arrows {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:.9}",
                a.class, a.statistical[0], a.statistical[1], a.synthetic[0], a.synthetic[1], a.cosine
            );
        }
        out
    }

    /// Human-readable summary with cosines on a 0-100 scale.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "mean flow cosine over all classes: {:.1}\nexplained variance (pc1, pc2): {:.4e}, {:.4e}\n",
            100.0 * self.mean_cosine,
            self.explained_variance[0],
            self.explained_variance[1]
        );
        for a in &self.arrows {
            let _ = writeln!(out, "class {:>3}: {:.1}", a.class, 100.0 * a.cosine);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join("flows.png");
        let mut bytes = Vec::new();
        self.render(512)
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Load(format!("png encode: {e}")))?;
        write_atomic(&png, &bytes)?;
        write_atomic(&dir.join("flows.csv"), self.to_csv().as_bytes())?;
        write_atomic(&dir.join("flows.txt"), self.summary().as_bytes())?;
        Ok(())
    }
}
