//! Evaluating sample populations: precision/recall against ground truth,
//! per-pixel marginal histograms with confidence-bound contours, class
//! occupancy counts, a deterministic gradient-descent baseline, and report
//! emission.

use std::path::Path;

use crate::align::TrainingSet;
use crate::energy;
use crate::grid::{log_gaussian_kernel, l2_distance, reinitialize, sdf_to_mask, GridDims};
use crate::gridio::{write_rgb_png, write_scalar_pgm};
use crate::sampler::{ChainConfig, SampleRecord};
use crate::{BinaryMask, Error, Result, ScalarField, SignedDistanceField};

/// Precision, recall and their harmonic mean for one segmentation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

/// Pixel-level scores with inside pixels as the positive class.
/// Conventions: both masks empty scores (1, 1, 1); a non-empty result
/// against an empty truth is ill-posed and errors; an empty result against
/// a non-empty truth scores (0, 0, 0).
pub fn precision_recall(result: &BinaryMask, truth: &BinaryMask) -> Result<PrScore> {
    crate::grid::check_dims(result.dims(), truth.dims())?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&r, &t) in result.values().iter().zip(truth.values()) {
        match (r, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fn_ == 0 {
        if tp + fp == 0 {
            return Ok(PrScore { precision: 1.0, recall: 1.0, f_measure: 1.0 });
        }
        return Err(Error::DegenerateMask("empty ground truth"));
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + fn_) as f64;
    let f_measure = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PrScore { precision, recall, f_measure })
}

/// Index and score of the sample with the highest F-measure.
pub fn best_by_f_measure(
    samples: &[SampleRecord],
    truth: &BinaryMask,
) -> Result<(usize, PrScore)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to rank"));
    }
    let mut best = (0usize, precision_recall(&samples[0].mask, truth)?);
    for (i, s) in samples.iter().enumerate().skip(1) {
        let score = precision_recall(&s.mask, truth)?;
        if score.f_measure > best.1.f_measure {
            best = (i, score);
        }
    }
    Ok(best)
}

/// Per-pixel frequency of being inside across the sample masks, in [0, 1].
pub fn histogram_image(masks: &[&BinaryMask]) -> Result<ScalarField> {
    let first = masks.first().ok_or(Error::EmptyInput("no masks to histogram"))?;
    let dims = first.dims();
    let mut counts = vec![0usize; dims.len()];
    for m in masks {
        crate::grid::check_dims(m.dims(), dims)?;
        for (c, &v) in counts.iter_mut().zip(m.values()) {
            *c += v as usize;
        }
    }
    let n = masks.len() as f64;
    Ok(ScalarField::from_vec(dims, counts.into_iter().map(|c| c as f64 / n).collect()))
}

/// Pixels whose marginal frequency reaches `level`.
pub fn superlevel_mask(hist: &ScalarField, level: f64) -> BinaryMask {
    hist.map(|&v| v >= level)
}

/// Marginal confidence bounds: the generous outer region (frequency >= lo)
/// and the conservative inner region (frequency >= hi); the inner is always
/// contained in the outer.
pub fn confidence_bounds(hist: &ScalarField, lo: f64, hi: f64) -> Result<(BinaryMask, BinaryMask)> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::InvalidParameter(format!(
            "confidence levels must satisfy 0 <= lo <= hi <= 1, got {lo}, {hi}"
        )));
    }
    Ok((superlevel_mask(hist, lo), superlevel_mask(hist, hi)))
}

/// Inside pixels with at least one 4-neighbor outside (or on the frame
/// edge).
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let dims = mask.dims();
    let mut out = Vec::new();
    for y in 0..dims.height {
        for x in 0..dims.width {
            if !*mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == dims.height
                || x + 1 == dims.width
                || !*mask.get(y - 1, x)
                || !*mask.get(y + 1, x)
                || !*mask.get(y, x - 1)
                || !*mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Number of chains that settled on each class.
pub fn class_counts(samples: &[SampleRecord], n_classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; n_classes];
    for s in samples {
        if s.class_id >= n_classes {
            return Err(Error::InvalidClass { class_id: s.class_id, n_classes });
        }
        counts[s.class_id] += 1;
    }
    Ok(counts)
}

/// Negative gradient of the full kernel shape prior energy -log p(phi):
/// every training shape pulls with its posterior kernel weight.
fn full_prior_term(sdf: &SignedDistanceField, ts: &TrainingSet) -> Result<ScalarField> {
    let kernel = ts.kernel();
    let mut logs = Vec::with_capacity(ts.n_shapes());
    let mut refs = Vec::with_capacity(ts.n_shapes());
    for class_id in 0..ts.n_classes() {
        let shapes = ts.class(class_id)?;
        let m = shapes.len() as f64;
        for s in shapes {
            logs.push(log_gaussian_kernel(l2_distance(sdf, &s.sdf)?, kernel) - m.ln());
            refs.push(&s.sdf);
        }
    }
    let lse = energy::logsumexp(&logs);
    let inv_s2 = 1.0 / (kernel.sigma * kernel.sigma);
    let mut f = ScalarField::filled(sdf.dims(), 0.0);
    if !lse.is_finite() {
        return Ok(f); // all shapes underflowed; no usable pull
    }
    for (&log, phi_j) in logs.iter().zip(&refs) {
        let w = (log - lse).exp();
        for (out, (&pj, &pc)) in f.values_mut().iter_mut().zip(phi_j.phi().iter().zip(sdf.phi())) {
            *out += inv_s2 * w * (pj - pc);
        }
    }
    Ok(f)
}

/// Deterministic gradient descent on the data term plus the full kernel
/// shape prior, for comparison against the sampled population. Runs in the
/// training-aligned frame like the chains and returns the image-frame mask.
pub fn gd_baseline(
    image: &ScalarField,
    ts: &TrainingSet,
    cfg: &ChainConfig,
) -> Result<BinaryMask> {
    cfg.validate()?;
    let params = cfg.chan_vese.with_mu(0.0);
    let init = crate::sampler::data_driven_init(image, cfg)?;
    let (mut sdf, pose) = crate::align::align_to_training(&init, ts)?;
    let warped = crate::align::apply_pose_scalar(image, &pose);
    for k in 0..cfg.n_iters {
        let mut f = energy::chan_vese_gradient(&warped, &sdf, &params)?;
        let prior = full_prior_term(&sdf, ts)?;
        for (out, &p) in f.values_mut().iter_mut().zip(prior.values()) {
            *out += cfg.beta_shape * p;
        }
        let step = crate::sampler::clamp_step(cfg.alpha, &f);
        for (p, &g) in sdf.phi_mut().iter_mut().zip(f.values()) {
            *p += step * g;
        }
        if (k + 1) % cfg.reinit_period == 0 {
            sdf = reinitialize(&sdf)?;
        }
    }
    let back = crate::align::apply_pose_sdf(&sdf, &pose.inverse());
    Ok(sdf_to_mask(&back))
}

// ---------------------------------------------------------------------------
// report emission

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Grayscale rendering of the image with the low-confidence contour in red
/// and the high-confidence contour in green.
pub fn overlay_confidence_bounds(
    image: &ScalarField,
    hist: &ScalarField,
    lo: f64,
    hi: f64,
) -> Result<(GridDims, Vec<[u8; 3]>)> {
    crate::grid::check_dims(image.dims(), hist.dims())?;
    let dims = image.dims();
    let min = image.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = image.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if max > min { max - min } else { 1.0 };
    let mut rgb: Vec<[u8; 3]> = image
        .values()
        .iter()
        .map(|&v| {
            let g = (((v - min) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
            [g, g, g]
        })
        .collect();
    let (outer, inner) = confidence_bounds(hist, lo, hi)?;
    for (y, x) in boundary_pixels(&outer) {
        rgb[dims.index(y, x)] = [255, 0, 0];
    }
    for (y, x) in boundary_pixels(&inner) {
        rgb[dims.index(y, x)] = [0, 255, 0];
    }
    Ok((dims, rgb))
}

fn pr_scatter_svg(scores: &[PrScore]) -> String {
    // precision on x, recall on y
    let (w, h, m) = (320.0, 320.0, 40.0);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"{m}\" y=\"{m}\" width=\"{0}\" height=\"{0}\" fill=\"none\" \
         stroke=\"black\"/>\n",
        w - 2.0 * m
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">precision</text>\n",
        w / 2.0,
        h - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"12\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" \
         transform=\"rotate(-90 12 {0})\">recall</text>\n",
        h / 2.0
    ));
    for s in scores {
        let x = m + s.precision * (w - 2.0 * m);
        let y = h - m - s.recall * (h - 2.0 * m);
        svg.push_str(&format!(
            "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.5\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Per-class means of the shape-energy traces; classes with no chains yield
/// an empty trace.
pub fn class_mean_shape_traces(
    samples: &[SampleRecord],
    n_classes: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut traces = vec![Vec::new(); n_classes];
    let mut counts = vec![0usize; n_classes];
    for s in samples {
        if s.class_id >= n_classes {
            return Err(Error::InvalidClass { class_id: s.class_id, n_classes });
        }
        let t = &mut traces[s.class_id];
        if t.is_empty() {
            t.resize(s.trace.len(), 0.0);
        } else if t.len() != s.trace.len() {
            return Err(Error::InvalidParameter("trace lengths differ within a class".into()));
        }
        for (acc, entry) in t.iter_mut().zip(&s.trace) {
            *acc += entry.e_shape;
        }
        counts[s.class_id] += 1;
    }
    for (t, &c) in traces.iter_mut().zip(&counts) {
        if c > 0 {
            for v in t.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    Ok(traces)
}

/// Everything `emit_report` writes, bundled so callers can rebuild the
/// report without re-running chains.
pub struct ReportInputs<'a> {
    pub samples: &'a [SampleRecord],
    pub image: &'a ScalarField,
    pub truth: Option<&'a BinaryMask>,
    pub n_classes: usize,
    /// Confidence-bound levels (low, high).
    pub bounds: (f64, f64),
    /// Deterministic gradient-descent result; adds the extra `pr.csv` row.
    pub baseline: Option<&'a BinaryMask>,
}

/// Writes the report files into `dir`: per-sample precision/recall plus a
/// baseline row (`pr.csv`), class occupancy (`counts.csv`), per-class mean
/// energies (`class_energy.csv`), the marginal histogram (`h.pgm`), the
/// confidence-bound overlay (`mcb_overlay.png`, red = low contour, green =
/// high contour), the energy traces (`energy_trace.csv`) and a
/// precision/recall scatter (`pr_scatter.svg`). Output is deterministic:
/// emitting the same inputs twice produces byte-identical files.
pub fn emit_report(dir: &Path, inputs: &ReportInputs) -> Result<()> {
    if inputs.samples.is_empty() {
        return Err(Error::EmptyInput("no samples to report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    let masks: Vec<&BinaryMask> = inputs.samples.iter().map(|s| &s.mask).collect();
    let hist = histogram_image(&masks)?;
    write_scalar_pgm(&dir.join("h.pgm"), &hist)?;

    let (dims, rgb) =
        overlay_confidence_bounds(inputs.image, &hist, inputs.bounds.0, inputs.bounds.1)?;
    write_rgb_png(&dir.join("mcb_overlay.png"), dims, &rgb)?;

    let counts = class_counts(inputs.samples, inputs.n_classes)?;
    let mut counts_csv = String::from("class_id,count\n");
    for (i, c) in counts.iter().enumerate() {
        counts_csv.push_str(&format!("{i},{c}\n"));
    }
    write_file(&dir.join("counts.csv"), counts_csv.as_bytes())?;

    // both ranking keys of the multimodal report, so readers can sort by
    // either without rerunning
    let mut class_energy_csv = String::from("class_id,count,mean_e_total,mean_e_shape\n");
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            class_energy_csv.push_str(&format!("{i},0,,\n"));
            continue;
        }
        let finals: Vec<&crate::sampler::TraceEntry> = inputs
            .samples
            .iter()
            .filter(|s| s.class_id == i)
            .filter_map(|s| s.trace.last())
            .collect();
        let mean_total = finals.iter().map(|t| t.e_total).sum::<f64>() / finals.len() as f64;
        let mean_shape = finals.iter().map(|t| t.e_shape).sum::<f64>() / finals.len() as f64;
        class_energy_csv.push_str(&format!(
            "{i},{c},{},{}\n",
            fmt_f64(mean_total),
            fmt_f64(mean_shape)
        ));
    }
    write_file(&dir.join("class_energy.csv"), class_energy_csv.as_bytes())?;

    let mut trace_csv = String::from("chain_id,iter,accepted,log_ratio,e_data,e_shape,e_total\n");
    for s in inputs.samples {
        for t in &s.trace {
            trace_csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.chain_id,
                t.iter,
                t.accepted as u8,
                fmt_f64(t.log_ratio),
                fmt_f64(t.e_data),
                fmt_f64(t.e_shape),
                fmt_f64(t.e_total)
            ));
        }
    }
    write_file(&dir.join("energy_trace.csv"), trace_csv.as_bytes())?;

    if let Some(truth) = inputs.truth {
        let mut scores: Vec<PrScore> = inputs
            .samples
            .iter()
            .map(|s| precision_recall(&s.mask, truth))
            .collect::<Result<_>>()?;
        let mut pr_csv = String::from("sample_id,precision,recall,f_measure,class_id,e_total\n");
        for (s, sc) in inputs.samples.iter().zip(&scores) {
            let e_total =
                s.trace.last().map(|t| fmt_f64(t.e_total)).unwrap_or_default();
            pr_csv.push_str(&format!(
                "chain_{},{},{},{},{},{}\n",
                s.chain_id,
                fmt_f64(sc.precision),
                fmt_f64(sc.recall),
                fmt_f64(sc.f_measure),
                s.class_id,
                e_total
            ));
        }
        if let Some(baseline) = inputs.baseline {
            let sc = precision_recall(baseline, truth)?;
            pr_csv.push_str(&format!(
                "baseline,{},{},{},,\n",
                fmt_f64(sc.precision),
                fmt_f64(sc.recall),
                fmt_f64(sc.f_measure)
            ));
            scores.push(sc);
        }
        write_file(&dir.join("pr.csv"), pr_csv.as_bytes())?;
        write_file(&dir.join("pr_scatter.svg"), pr_scatter_svg(&scores).as_bytes())?;
    }
    Ok(())
}
