//! Image quality metrics over `[C, H, W]` images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR value shown in tables for identical images.
pub const PSNR_TABLE_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01 * 0.01;
pub const SSIM_K2: f64 = 0.03 * 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        [h, w] => Ok((1, h, w)),
        ref s => Err(Error::shape(format!("expected [C, H, W] or [H, W] image, got {s:?}"))),
    }
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    if pred.is_empty() {
        return Err(Error::shape("empty image"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pred.len() as f64)
}

fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; `+∞` for identical inputs.
pub fn psnr(pred: &Tensor, target: &Tensor, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::invalid(format!("max_value must be positive, got {max_value}")));
    }
    Ok(psnr_from_mse(mse(pred, target)?, max_value))
}

/// PSNR restricted to the pixels where `mask[y * W + x]` is set, across all channels.
pub fn masked_psnr(pred: &Tensor, target: &Tensor, mask: &[bool], max_value: f64) -> Result<f64> {
    same_shape(pred, target)?;
    let (c, h, w) = chw(pred)?;
    if mask.len() != h * w {
        return Err(Error::shape(format!(
            "mask has {} pixels, image has {}",
            mask.len(),
            h * w
        )));
    }
    let count = mask.iter().filter(|&&m| m).count() * c;
    if count == 0 {
        return Err(Error::invalid("mask selects no pixels"));
    }
    let (p, t) = (pred.data(), target.data());
    let mut s = 0.0;
    for ch in 0..c {
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let d = p[ch * h * w + i] - t[ch * h * w + i];
            s += d * d;
        }
    }
    Ok(psnr_from_mse(s / count as f64, max_value))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SsimMode {
    /// Structure term from the local covariance.
    #[default]
    Covariance,
    /// Structure term from the product of local standard deviations.
    DeviationProduct,
}

/// Normalized separable Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Mean SSIM over the fully covered window positions, averaged across channels.
pub fn ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    ssim_with(pred, target, SsimMode::Covariance)
}

pub fn ssim_with(pred: &Tensor, target: &Tensor, mode: SsimMode) -> Result<f64> {
    same_shape(pred, target)?;
    let (c, h, w) = chw(pred)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let x = &pred.data()[ch * h * w..(ch + 1) * h * w];
        let y = &target.data()[ch * h * w..(ch + 1) * h * w];
        let products: [Vec<f64>; 5] = [
            x.to_vec(),
            y.to_vec(),
            x.iter().map(|v| v * v).collect(),
            y.iter().map(|v| v * v).collect(),
            x.iter().zip(y).map(|(a, b)| a * b).collect(),
        ];
        let [mx, my, xx, yy, xy] = products.map(|p| filter_valid(&p, h, w, &k));
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = (xx[i] - mu_x * mu_x).max(0.0);
            let vy = (yy[i] - mu_y * mu_y).max(0.0);
            let structure = match mode {
                SsimMode::Covariance => xy[i] - mu_x * mu_y,
                SsimMode::DeviationProduct => (vx * vy).sqrt(),
            };
            let num = (2.0 * mu_x * mu_y + SSIM_K1) * (2.0 * structure + SSIM_K2);
            let den = (mu_x * mu_x + mu_y * mu_y + SSIM_K1) * (vx + vy + SSIM_K2);
            sum += num / den;
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// External perceptual metric: `command <pred.png> <target.png>` prints one float.
#[derive(Clone, Debug)]
pub struct LpipsHook {
    pub command: PathBuf,
}

impl LpipsHook {
    pub fn new(command: impl Into<PathBuf>) -> Self {
        Self {
            command: command.into(),
        }
    }

    pub fn score_files(&self, pred: &Path, target: &Path) -> Result<f64> {
        let out = Command::new(&self.command)
            .arg(pred)
            .arg(target)
            .output()
            .map_err(|e| Error::io(&self.command, e))?;
        let text = String::from_utf8_lossy(&out.stdout);
        if !out.status.success() {
            return Err(Error::format(&self.command, format!("exited with {}", out.status)));
        }
        text.trim()
            .parse::<f64>()
            .map_err(|_| Error::format(&self.command, format!("expected a single float, got {:?}", text.trim())))
    }

    pub fn score(&self, pred: &Tensor, target: &Tensor) -> Result<f64> {
        let dir = std::env::temp_dir().join(format!("zest-lpips-{}", std::process::id()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (p, t) = (dir.join("pred.png"), dir.join("target.png"));
        crate::data_io::write_png(&p, pred)?;
        crate::data_io::write_png(&t, target)?;
        let s = self.score_files(&p, &t);
        let _ = std::fs::remove_dir_all(&dir);
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub max_value: f64,
    pub ssim_mode: SsimMode,
    pub lpips: Option<LpipsHook>,
}

impl EvalOptions {
    pub fn new() -> Self {
        Self {
            max_value: 1.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

impl MetricRow {
    /// Arithmetic mean of each column; LPIPS only when every row has it.
    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let n = rows.len().max(1) as f64;
        let lpips = rows
            .iter()
            .map(|r| r.lpips)
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / n);
        MetricRow {
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            lpips,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<MetricRow>,
    pub mean: MetricRow,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, MetricRow)> = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("{i:05}"), *r))
            .collect();
        rows.push(("mean".into(), self.mean));
        format_table("frame", &rows)
    }
}

pub const TABLE_COLUMNS: [&str; 3] = ["PSNR↑", "SSIM↑", "LPIPS↓"];

/// Fixed-width table with columns PSNR, SSIM, LPIPS; PSNR is capped for display.
pub fn format_table(label: &str, rows: &[(String, MetricRow)]) -> String {
    let width = rows
        .iter()
        .map(|(n, _)| n.chars().count())
        .chain([label.chars().count()])
        .max()
        .unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{label:<width$}  {:>8}  {:>8}  {:>8}",
        TABLE_COLUMNS[0], TABLE_COLUMNS[1], TABLE_COLUMNS[2]
    );
    for (name, r) in rows {
        let lp = r.lpips.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            s,
            "{name:<width$}  {:>8.2}  {:>8.4}  {lp:>8}",
            r.psnr.min(PSNR_TABLE_CAP),
            r.ssim
        );
    }
    s
}

pub fn evaluate_sequence(renders: &[Tensor], targets: &[Tensor], opts: &EvalOptions) -> Result<MetricReport> {
    if renders.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} renders for {} targets",
            renders.len(),
            targets.len()
        )));
    }
    if renders.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    let max_value = if opts.max_value > 0.0 { opts.max_value } else { 1.0 };
    let frames = renders
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            Ok(MetricRow {
                psnr: psnr(p, t, max_value)?,
                ssim: ssim_with(p, t, opts.ssim_mode)?,
                lpips: opts.lpips.as_ref().map(|h| h.score(p, t)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = MetricRow::mean(&frames);
    Ok(MetricReport { frames, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random::<f64>())
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(vec![1, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Tensor::full(vec![1, 4, 4], 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(vec![1, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, &[3, 12, 10]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let bin = Tensor::from_fn(vec![1, 10, 10], |i| ((i / 10 + i % 10) % 2) as f64);
        let inv = bin.map(|v| 1.0 - v);
        assert!(ssim(&bin, &inv).unwrap() < -0.9);
        assert!(ssim(&Tensor::zeros(vec![1, 4, 8]), &Tensor::zeros(vec![1, 4, 8])).is_err());
    }

    #[test]
    fn deviation_product_mode_ignores_structure() {
        let bin = Tensor::from_fn(vec![1, 10, 10], |i| ((i / 10 + i % 10) % 2) as f64);
        let inv = bin.map(|v| 1.0 - v);
        let literal = ssim_with(&bin, &inv, SsimMode::DeviationProduct).unwrap();
        let canonical = ssim(&bin, &inv).unwrap();
        assert!(literal > 0.5 && canonical < 0.0, "{literal} {canonical}");
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let k = gaussian_window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[4]);
        assert_eq!(k[1], k[3]);
    }

    #[test]
    fn report_means_and_columns() {
        let a = Tensor::full(vec![1, 6, 6], 0.5);
        let b = Tensor::full(vec![1, 6, 6], 0.6);
        let c = Tensor::full(vec![1, 6, 6], 0.7);
        let r = evaluate_sequence(&[b.clone(), c.clone()], &[a.clone(), a.clone()], &EvalOptions::new()).unwrap();
        let expect = (psnr(&b, &a, 1.0).unwrap() + psnr(&c, &a, 1.0).unwrap()) / 2.0;
        assert_eq!(r.mean.psnr, expect);
        let header = r.table().lines().next().unwrap().to_string();
        let (p, s, l) = (
            header.find("PSNR").unwrap(),
            header.find("SSIM").unwrap(),
            header.find("LPIPS").unwrap(),
        );
        assert!(p < s && s < l);
        let same = evaluate_sequence(std::slice::from_ref(&a), std::slice::from_ref(&a), &EvalOptions::new()).unwrap();
        assert_eq!(same.mean.psnr, f64::INFINITY);
        assert!((same.mean.ssim - 1.0).abs() < 1e-12);
        assert!(same.table().contains("99.00"));
    }

    #[test]
    fn masked_psnr_ignores_unmasked_pixels() {
        let a = Tensor::full(vec![3, 2, 2], 0.5);
        let mut b = a.clone();
        b.data_mut()[0] = 0.0;
        let mask = [false, true, true, true];
        assert_eq!(masked_psnr(&b, &a, &mask, 1.0).unwrap(), f64::INFINITY);
        assert!(masked_psnr(&b, &a, &[false; 4], 1.0).is_err());
    }
}
