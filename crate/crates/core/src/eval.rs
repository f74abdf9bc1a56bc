//! Full-reference metrics and experiment reports.

use std::collections::BTreeMap;

use drtl_autograd::Float;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbones::RestorationModel;
use crate::data::{hash_pairs, PairItem};
use crate::error::{DrtlError, Result};
use crate::image::Image;
use crate::trainers::RunManifest;

/// Means cap infinite PSNR at this value.
pub const PSNR_CAP: f64 = 100.0;

/// `10 log10(1 / MSE)` over all channels; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(DrtlError::Shape(format!("psnr of {:?} and {:?}", a.dims(), b.dims())));
    }
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    let mse = se / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// BT.601 luma, or the single channel of a gray image.
pub fn luma(img: &Image) -> Vec<f64> {
    if img.channels() == 1 {
        return img.data().iter().map(|&v| v as f64).collect();
    }
    img.data()
        .chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

pub(crate) fn ssim_window() -> Vec<f64> {
    let mut k: Vec<f64> = (-5..=5i32)
        .map(|x| (-(x * x) as f64 / (2.0 * 1.5 * 1.5)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Single-scale SSIM on luma with an 11x11 Gaussian window (sigma 1.5),
/// averaged over the windows that fit entirely inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(DrtlError::Shape(format!("ssim of {:?} and {:?}", a.dims(), b.dims())));
    }
    let (h, w, _) = a.dims();
    if h < 11 || w < 11 {
        return Err(DrtlError::Param(format!("ssim needs at least 11x11, got {h}x{w}")));
    }
    let (x, y) = (luma(a), luma(b));
    let k = ssim_window();
    let (oh, ow) = (h - 10, w - 10);
    // valid separable filtering of the five moment images
    let filter = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut tmp = vec![0.0; h * ow];
        for i in 0..h {
            for j in 0..ow {
                tmp[i * ow + j] = (0..11).map(|t| k[t] * f(i * w + j + t)).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                out[i * ow + j] = (0..11).map(|t| k[t] * tmp[(i + t) * ow + j]).sum();
            }
        }
        out
    };
    let mx = filter(&|p| x[p]);
    let my = filter(&|p| y[p]);
    let mxx = filter(&|p| x[p] * x[p]);
    let myy = filter(&|p| y[p] * y[p]);
    let mxy = filter(&|p| x[p] * y[p]);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// Serializes non-finite PSNR as the string `"inf"`.
pub mod psnr_format {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub index: usize,
    #[serde(with = "psnr_format")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub regime: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub psnr_cap: f64,
    pub per_image: Vec<ImageMetric>,
    /// Mean of per-image PSNR, each capped at `psnr_cap`.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_metrics(regime: &str, dataset_hash: String, seed: u64, per_image: Vec<ImageMetric>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(DrtlError::Param("no images to report".into()));
        }
        let n = per_image.len() as f64;
        let mean_psnr = per_image.iter().map(|m| m.psnr.min(PSNR_CAP)).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / n;
        Ok(Self {
            regime: regime.to_string(),
            dataset_hash,
            seed,
            psnr_cap: PSNR_CAP,
            per_image,
            mean_psnr,
            mean_ssim,
        })
    }
}

/// Metrics of the distorted images themselves, i.e. of the identity model.
pub fn evaluate_identity(pairs: &[PairItem], regime: &str, seed: u64) -> Result<MetricReport> {
    let per = pairs
        .iter()
        .map(|p| {
            Ok(ImageMetric {
                index: p.index,
                psnr: psnr(&p.distorted, &p.clean)?,
                ssim: ssim(&p.distorted, &p.clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_metrics(regime, hash_pairs(pairs), seed, per)
}

/// Restores each full distorted image and scores it against its clean pair.
pub fn evaluate_model<T: Float>(
    model: &RestorationModel<T>,
    pairs: &[PairItem],
    regime: &str,
    seed: u64,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(DrtlError::Param("evaluation set is empty".into()));
    }
    let per = pairs
        .iter()
        .map(|p| {
            let out = model.restore(&p.distorted)?;
            Ok(ImageMetric {
                index: p.index,
                psnr: psnr(&out, &p.clean)?,
                ssim: ssim(&out, &p.clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_metrics(regime, hash_pairs(pairs), seed, per)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub regime: String,
    pub seeds: Vec<u64>,
    pub config_hashes: Vec<String>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub mean_psnr: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub eval_hash: String,
    pub psnr_cap: f64,
    pub rows: Vec<ReportRow>,
    /// PSNR against the number of target pairs, per regime.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<SweepPoint>>,
}

/// Aggregates evaluated runs into a regime table and, for runs that carry a
/// few-shot size, a PSNR-versus-k series.
///
/// Runs scored on different eval sets are refused, and so is a run
/// without metrics. Rows keep the order in which regimes first appear.
pub fn build_report(manifests: &[RunManifest]) -> Result<Report> {
    let first = manifests
        .first()
        .ok_or_else(|| DrtlError::Report("no run manifests given".into()))?;
    let mut rows: Vec<ReportRow> = Vec::new();
    let mut acc: Vec<(f64, f64, usize)> = Vec::new();
    let mut sweep_acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for m in manifests {
        let ev = m
            .eval
            .as_ref()
            .ok_or_else(|| DrtlError::Report(format!("run {} has no evaluation", m.regime)))?;
        let fev = first.eval.as_ref().expect("checked in loop");
        if ev.dataset_hash != fev.dataset_hash {
            return Err(DrtlError::Report(format!(
                "eval set mismatch: {} vs {}",
                ev.dataset_hash, fev.dataset_hash
            )));
        }
        if let Some(k) = m.k {
            let e = sweep_acc.entry(m.regime.clone()).or_default().entry(k).or_insert((0.0, 0));
            e.0 += ev.mean_psnr;
            e.1 += 1;
            continue;
        }
        let pos = match rows.iter().position(|r| r.regime == m.regime) {
            Some(p) => p,
            None => {
                rows.push(ReportRow {
                    regime: m.regime.clone(),
                    seeds: vec![],
                    config_hashes: vec![],
                    mean_psnr: 0.0,
                    mean_ssim: 0.0,
                });
                acc.push((0.0, 0.0, 0));
                rows.len() - 1
            }
        };
        rows[pos].seeds.push(m.seed);
        if !rows[pos].config_hashes.contains(&m.config_hash) {
            rows[pos].config_hashes.push(m.config_hash.clone());
        }
        acc[pos].0 += ev.mean_psnr;
        acc[pos].1 += ev.mean_ssim;
        acc[pos].2 += 1;
    }
    for (r, (p, s, n)) in rows.iter_mut().zip(&acc) {
        r.mean_psnr = p / *n as f64;
        r.mean_ssim = s / *n as f64;
    }
    let sweep = sweep_acc
        .into_iter()
        .map(|(regime, pts)| {
            let series = pts
                .into_iter()
                .map(|(k, (sum, n))| SweepPoint {
                    k,
                    mean_psnr: sum / n as f64,
                    seeds: n,
                })
                .collect();
            (regime, series)
        })
        .collect();
    Ok(Report {
        eval_hash: first.eval.as_ref().expect("checked").dataset_hash.clone(),
        psnr_cap: PSNR_CAP,
        rows,
        sweep,
    })
}

pub fn render_markdown(report: &Report) -> String {
    let mut s = String::new();
    s.push_str("| Regime | PSNR (dB) | SSIM | Seeds | Config |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in &report.rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let cfgs: Vec<&str> = r.config_hashes.iter().map(|h| &h[..h.len().min(12)]).collect();
        s.push_str(&format!(
            "| {} | {:.3} | {:.4} | {} | {} |\n",
            r.regime,
            r.mean_psnr,
            r.mean_ssim,
            seeds.join(", "),
            cfgs.join(", ")
        ));
    }
    if !report.sweep.is_empty() {
        s.push_str("\nPSNR (dB) by number of target training pairs:\n\n");
        let ks: std::collections::BTreeSet<usize> =
            report.sweep.values().flatten().map(|p| p.k).collect();
        s.push_str("| Regime |");
        for k in &ks {
            s.push_str(&format!(" k={k} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(ks.len()));
        s.push('\n');
        for (regime, pts) in &report.sweep {
            s.push_str(&format!("| {regime} |"));
            for k in &ks {
                match pts.iter().find(|p| p.k == *k) {
                    Some(p) => s.push_str(&format!(" {:.3} |", p.mean_psnr)),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
    }
    s.push_str(&format!(
        "\nEval set {}; infinite PSNR is capped at {} dB in means.\n",
        &report.eval_hash[..report.eval_hash.len().min(12)],
        report.psnr_cap
    ));
    s
}
