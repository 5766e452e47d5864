//! PSNR and SSIM, corruption sweeps over a validation set, the point-loss
//! ablation, and SVG line charts of the results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use crate::dataset::SampleStream;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::image::{ImageTensor, Mask};
use crate::losses::PointPenalty;
use crate::rng::mix3;
use crate::training::{reconstruct, train_loop, TrainConfig, Trainer};

pub const DEFAULT_PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Which pixels the metrics cover.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricRegion {
    #[default]
    Whole,
    /// Only pixels the corruption removed (SSIM: windows centred on them).
    Corrupted,
}

fn check_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("image sizes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with values mapped to [0, 1], capped at
/// [`DEFAULT_PSNR_CAP`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    psnr_masked(a, b, None, DEFAULT_PSNR_CAP)
}

/// PSNR over the pixels where `select` is true (all pixels if `None`).
pub fn psnr_masked(a: &ImageTensor, b: &ImageTensor, select: Option<&[bool]>, cap: f64) -> Result<f64> {
    check_dims(a, b)?;
    let plane = a.height() * a.width();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for c in 0..3 {
        for (i, (&x, &y)) in a.plane(c).iter().zip(b.plane(c)).enumerate() {
            if select.is_none_or(|s| s[i % plane]) {
                let d = (x as f64 - y as f64) / 2.0;
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 || sum == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / (sum / count as f64)).log10()).min(cap))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" filtering of an `h`×`w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Local SSIM values at every valid window position, on luma in [0, 1].
pub fn ssim_map(a: &ImageTensor, b: &ImageTensor) -> Result<(Vec<f64>, usize, usize)> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (la, lb) = (a.luma01(), b.luma01());
    let k = gaussian_kernel();
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(&la, h, w, &k);
    let mu_b = filter_valid(&lb, h, w, &k);
    let aa = filter_valid(&prod(&|i| la[i] * la[i]), h, w, &k);
    let bb = filter_valid(&prod(&|i| lb[i] * lb[i]), h, w, &k);
    let ab = filter_valid(&prod(&|i| la[i] * lb[i]), h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let map = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    Ok((map, h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1))
}

/// Mean structural similarity (11×11 Gaussian window, σ = 1.5) of the luma channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (map, _, _) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean local SSIM over windows centred on corrupted pixels; whole-image SSIM if none are.
pub fn ssim_masked(a: &ImageTensor, b: &ImageTensor, mask: &Mask) -> Result<f64> {
    let (map, oh, ow) = ssim_map(a, b)?;
    let r = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..oh {
        for x in 0..ow {
            if !mask.get(y + r, x + r) {
                sum += map[y * ow + x];
                n += 1;
            }
        }
    }
    if n == 0 {
        return ssim(a, b);
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub kind: CorruptionKind,
    /// Keep fraction or block size.
    pub param: f64,
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub kind: CorruptionKind,
    pub param: f64,
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub dataset: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub rows: Vec<MetricRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    /// Per-(kind, param) statistics in first-appearance order.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: Vec<((CorruptionKind, f64), Vec<&MetricRow>)> = Vec::new();
        for row in &self.rows {
            let key = (row.kind, row.param);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(row),
                None => groups.push((key, vec![row])),
            }
        }
        groups
            .into_iter()
            .map(|((kind, param), rows)| {
                let (psnr_mean, psnr_std) = mean_std(&rows.iter().map(|r| r.psnr_db).collect::<Vec<_>>());
                let (ssim_mean, ssim_std) = mean_std(&rows.iter().map(|r| r.ssim).collect::<Vec<_>>());
                Aggregate { kind, param, count: rows.len(), psnr_mean, psnr_std, ssim_mean, ssim_std }
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(Self { meta: ReportMeta::default(), rows })
    }

    pub fn write_aggregates_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for a in self.aggregates() {
            w.serialize(a)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// `(param, mean)` points of one corruption kind, sorted by param.
    pub fn series(&self, kind: CorruptionKind, metric: Metric) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self
            .aggregates()
            .into_iter()
            .filter(|a| a.kind == kind)
            .map(|a| (a.param, if metric == Metric::Psnr { a.psnr_mean } else { a.ssim_mean }))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts
    }

    pub fn kinds(&self) -> Vec<CorruptionKind> {
        let mut kinds: Vec<CorruptionKind> = Vec::new();
        for r in &self.rows {
            if !kinds.contains(&r.kind) {
                kinds.push(r.kind);
            }
        }
        kinds
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR (dB)",
            Metric::Ssim => "SSIM",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    pub region: MetricRegion,
    pub workers: usize,
    pub psnr_cap: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { seed: 0, region: MetricRegion::Whole, workers: 1, psnr_cap: DEFAULT_PSNR_CAP }
    }
}

/// Corruption seed of image `index` under `spec`. Specs differing only in
/// keep fraction share seeds, so their uniform masks are nested.
pub fn evaluation_seed(options_seed: u64, spec: &CorruptionSpec, index: usize) -> u64 {
    mix3(options_seed, spec.seed, index as u64)
}

/// Reconstruct every `(id, image)` under every spec and tabulate metrics.
/// Rows are ordered by spec, then by image id.
pub fn evaluate_grid(
    generator: &Generator,
    images: &[(String, ImageTensor)],
    specs: &[CorruptionSpec],
    donors: &[ImageTensor],
    options: &EvalOptions,
) -> Result<MetricsReport> {
    if specs.is_empty() {
        return Err(Error::invalid("no corruption specs to evaluate"));
    }
    if images.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    for spec in specs {
        spec.validate()?;
        if spec.kind.needs_donor() && donors.is_empty() {
            return Err(Error::invalid(format!("{} needs donor images", spec.kind)));
        }
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by(|&a, &b| images[a].0.cmp(&images[b].0));
    let jobs: Vec<(usize, usize)> = (0..specs.len()).flat_map(|s| order.iter().map(move |&i| (s, i))).collect();
    let run = |&(s, i): &(usize, usize)| -> Result<MetricRow> {
        let spec = specs[s].with_seed(evaluation_seed(options.seed, &specs[s], i));
        let (id, real) = &images[i];
        let donor = spec.kind.needs_donor().then(|| &donors[i % donors.len()]);
        let sample = corrupt(real, &spec, donor)?;
        let recon = reconstruct(generator, &sample.source)?;
        let (psnr_db, ssim_v) = match options.region {
            MetricRegion::Whole => (psnr_masked(&recon, real, None, options.psnr_cap)?, ssim(&recon, real)?),
            MetricRegion::Corrupted => {
                let removed: Vec<bool> = sample.mask.bits().iter().map(|b| !b).collect();
                (psnr_masked(&recon, real, Some(&removed), options.psnr_cap)?, ssim_masked(&recon, real, &sample.mask)?)
            }
        };
        Ok(MetricRow { kind: spec.kind, param: spec.param(), image_id: id.clone(), psnr_db, ssim: ssim_v })
    };
    let workers = options.workers.max(1).min(jobs.len());
    let rows = if workers == 1 {
        jobs.iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = jobs.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs.chunks(chunk).map(|c| scope.spawn(move || c.iter().map(run).collect::<Result<Vec<_>>>())).collect();
            let mut rows = Vec::with_capacity(jobs.len());
            for h in handles {
                rows.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(rows)
        })?
    };
    Ok(MetricsReport { meta: ReportMeta { seed: options.seed, ..ReportMeta::default() }, rows })
}

/// Point-loss variants compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointVariant {
    L2,
    L1,
    None,
}

impl PointVariant {
    pub const ALL: [PointVariant; 3] = [PointVariant::L2, PointVariant::L1, PointVariant::None];

    pub fn name(self) -> &'static str {
        match self {
            PointVariant::L2 => "l2",
            PointVariant::L1 => "l1",
            PointVariant::None => "none",
        }
    }

    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            PointVariant::L2 => {
                c.weights.point_loss_enabled = true;
                c.weights.point_penalty = PointPenalty::L2;
            }
            PointVariant::L1 => {
                c.weights.point_loss_enabled = true;
                c.weights.point_penalty = PointPenalty::L1;
            }
            PointVariant::None => c.weights.point_loss_enabled = false,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub variants: Vec<(PointVariant, MetricsReport)>,
}

impl AblationReport {
    /// One CSV with a leading `variant` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variant", "kind", "param", "image_id", "psnr_db", "ssim"])?;
        for (v, report) in &self.variants {
            for r in &report.rows {
                w.write_record([
                    v.name().to_string(),
                    r.kind.to_string(),
                    r.param.to_string(),
                    r.image_id.clone(),
                    r.psnr_db.to_string(),
                    r.ssim.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Train one model per variant from identical initialization and data, then
/// evaluate each on the same grid. Each run writes to `out_dir/<variant>/`.
pub fn ablate_point_loss(
    base: &TrainConfig,
    data: &SampleStream,
    variants: &[PointVariant],
    images: &[(String, ImageTensor)],
    specs: &[CorruptionSpec],
    options: &EvalOptions,
    out_dir: &Path,
) -> Result<AblationReport> {
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut trainer = Trainer::new(v.apply(base))?;
        let dir = out_dir.join(v.name());
        let outcome = train_loop(&mut trainer, data, &dir)?;
        let mut report = evaluate_grid(trainer.generator(), images, specs, &[], options)?;
        report.meta.checkpoint = outcome.checkpoint.display().to_string();
        out.push((v, report));
    }
    Ok(AblationReport { variants: out })
}

/// Line chart of named `(x, y)` series as a standalone SVG document.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 150.0;
    const T: f64 = 40.0;
    const B: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let pts = series.iter().flat_map(|(_, p)| p.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        if hi - lo < 1e-12 {
            let d = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
            (lo - d, hi + d)
        } else {
            let d = (hi - lo) * 0.05;
            (lo - d, hi + d)
        }
    };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, (L + W - R) / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - B, W - R, H - B);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, H - B);
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(xv), H - B + 18.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, L - 6.0, py(yv) + 4.0, tick(yv));
        let _ = writeln!(s, r##"<line x1="{L}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#e0e0e0"/>"##, py(yv), W - R);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, H - 16.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        (T + H - B) / 2.0,
        escape(y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        if coords.len() > 1 {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        }
        for &(x, y) in points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = T + 10.0 + 20.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="14" height="4" fill="{color}"/>"#, W - R + 12.0, ly - 2.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, W - R + 32.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Write PSNR and SSIM charts (`<stem>_psnr.svg`, `<stem>_ssim.svg`) with
/// one series per named report and corruption kind.
pub fn write_plots(reports: &[(String, &MetricsReport)], out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for metric in [Metric::Psnr, Metric::Ssim] {
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        let mut x_label = "keep fraction";
        for (name, report) in reports {
            for kind in report.kinds() {
                if kind.is_block_regime() {
                    x_label = "block size (px)";
                }
                let label = if name.is_empty() { kind.to_string() } else { format!("{name}: {kind}") };
                series.insert(label, report.series(kind, metric));
            }
        }
        let series: Vec<(String, Vec<(f64, f64)>)> = series.into_iter().collect();
        let svg = line_chart_svg(&format!("{} by corruption level", metric.label()), x_label, metric.label(), &series);
        let suffix = if metric == Metric::Psnr { "psnr" } else { "ssim" };
        let path = out_dir.join(format!("{stem}_{suffix}.svg"));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f32) -> ImageTensor {
        ImageTensor::filled(h, w, [v; 3])
    }

    #[test]
    fn psnr_cap_and_twenty_db() {
        let a = gray(8, 8, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), DEFAULT_PSNR_CAP);
        // 0.1 in [0, 1] is 0.2 in model space
        let b = ImageTensor::from_fn(8, 8, |_, _| [0.2; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &gray(8, 4, 0.0)).is_err());
    }

    #[test]
    fn ssim_extremes() {
        let a = ImageTensor::from_fn(16, 16, |y, x| [((x * y) % 7) as f32 / 7.0 - 0.5; 3]);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let white = gray(16, 16, 1.0);
        let black = gray(16, 16, -1.0);
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = c1 / (1.0 + c1);
        assert!((ssim(&white, &black).unwrap() - expected).abs() < 1e-9);
        assert!(ssim(&gray(10, 10, 0.0), &gray(10, 10, 0.0)).is_err());
    }

    #[test]
    fn aggregates_and_csv_round_trip() {
        let row = |param: f64, id: &str, p: f64| MetricRow {
            kind: CorruptionKind::UniformPointsWhite,
            param,
            image_id: id.into(),
            psnr_db: p,
            ssim: 0.5,
        };
        let report = MetricsReport { meta: ReportMeta::default(), rows: vec![row(0.1, "a", 20.0), row(0.1, "b", 22.0), row(0.2, "a", 25.0)] };
        let agg = report.aggregates();
        assert_eq!(agg.len(), 2);
        assert_eq!((agg[0].psnr_mean, agg[0].psnr_std), (21.0, 1.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        report.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("kind,param,image_id,psnr_db,ssim\n"));
        assert_eq!(MetricsReport::read_csv(&p).unwrap().rows, report.rows);
        assert_eq!(report.series(CorruptionKind::UniformPointsWhite, Metric::Psnr), vec![(0.1, 21.0), (0.2, 25.0)]);
    }

    #[test]
    fn single_point_chart_renders() {
        let svg = line_chart_svg("t", "x", "y", &[("only".into(), vec![(0.2, 23.0)])]);
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("<polyline"));
        assert!(!svg.contains("NaN"));
    }
}
