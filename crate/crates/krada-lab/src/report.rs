//! CSV reports and prediction composites.
//!
//! Percentages are rounded to one decimal at formatting time only; the raw
//! fractions always travel alongside so downstream tooling never works from
//! rounded values. All writers are deterministic string builders.

use krada_core::label::LabelMap;
use krada_core::loss::LossBundle;
use krada_core::metrics::{ImageLevelReport, MetricReport};
use krada_core::tensor::Tensor;

pub fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn opt(v: Option<f64>) -> (String, String) {
    match v {
        Some(x) => (x.to_string(), pct(x)),
        None => (String::new(), String::new()),
    }
}

/// `iteration,seg_source,seg_target,seg_known,adv,unknown_fraction`.
pub fn loss_csv(trace: &[LossBundle]) -> String {
    let mut out = String::from("iteration,seg_source,seg_target,seg_known,adv,unknown_fraction\n");
    for b in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.iteration, b.seg_source, b.seg_target, b.seg_known, b.adv, b.unknown_fraction
        ));
    }
    out
}

/// Per-class IoU rows (`1..=K` then `unknown`), then the two means. Classes
/// absent from both prediction and ground truth have empty cells.
pub fn metrics_csv(r: &MetricReport) -> String {
    let mut out = String::from("class,iou,iou_pct\n");
    for (i, iou) in r.per_class.iter().enumerate() {
        let name = if i == r.k {
            "unknown".to_string()
        } else {
            (i + 1).to_string()
        };
        let (raw, p) = opt(*iou);
        out.push_str(&format!("{name},{raw},{p}\n"));
    }
    let (raw, p) = opt(r.miou);
    out.push_str(&format!("miou,{raw},{p}\n"));
    let (raw, p) = opt(r.miou_star);
    out.push_str(&format!("miou_star,{raw},{p}\n"));
    out
}

/// Image-level unknown detection: one `measure,value,percent` row each.
pub fn image_level_csv(r: &ImageLevelReport) -> String {
    let mut out = String::from("measure,value,percent\n");
    out.push_str(&format!("tp,{},\n", r.tp));
    out.push_str(&format!("fp,{},\n", r.fp));
    out.push_str(&format!("tn,{},\n", r.tn));
    out.push_str(&format!("fn,{},\n", r.fn_));
    out.push_str(&format!("accuracy,{},{}\n", r.accuracy, pct(r.accuracy)));
    out.push_str(&format!("precision,{},{}\n", r.precision, pct(r.precision)));
    out.push_str(&format!("recall,{},{}\n", r.recall, pct(r.recall)));
    out.push_str(&format!("f1,{},{}\n", r.f1, pct(r.f1)));
    out.push_str(&format!(
        "precision_undefined,{},\n",
        u8::from(r.precision_undefined)
    ));
    out
}

/// `delta,miou,chosen` — the calibration sweep, one row per candidate.
pub fn calibration_csv(rows: &[(f64, Option<f64>)], chosen: f64) -> String {
    let mut out = String::from("delta,miou,chosen\n");
    for (delta, miou) in rows {
        let (raw, _) = opt(*miou);
        out.push_str(&format!(
            "{delta},{raw},{}\n",
            u8::from(*delta == chosen)
        ));
    }
    out
}

/// Colors for label panels: void black, classes from a fixed cycle, the
/// unknown class always white.
fn class_color(label: u8, k: usize) -> [u8; 3] {
    const CYCLE: [[u8; 3]; 8] = [
        [90, 90, 100],  // 1: background gray-blue
        [200, 60, 55],  // 2: red
        [60, 175, 70],  // 3: green
        [70, 95, 200],  // 4: blue
        [210, 170, 60], // 5+: yellow
        [170, 80, 190], //     purple
        [70, 180, 185], //     teal
        [235, 130, 50], //     orange
    ];
    if label == 0 {
        [0, 0, 0]
    } else if label as usize == k + 1 {
        [255, 255, 255]
    } else {
        CYCLE[(label as usize - 1) % CYCLE.len()]
    }
}

/// `[input | truth | prediction]` side by side with white separators, as a
/// P6 image. The input must be a `[3,H,W]` tensor on the 8-bit grid.
pub fn composite_ppm(input: &Tensor, truth: &LabelMap, pred: &LabelMap, k: usize) -> Vec<u8> {
    let (h, w) = (truth.height(), truth.width());
    debug_assert_eq!(input.shape(), [3, h, w]);
    const GAP: usize = 2;
    let full_w = 3 * w + 2 * GAP;
    let mut rgb = vec![255u8; 3 * h * full_w];

    let mut put = |i: usize, j: usize, c: [u8; 3]| {
        let base = 3 * (i * full_w + j);
        rgb[base..base + 3].copy_from_slice(&c);
    };
    let d = input.data();
    for i in 0..h {
        for j in 0..w {
            let px = i * w + j;
            let c = [
                (d[px] * 255.0).round() as u8,
                (d[h * w + px] * 255.0).round() as u8,
                (d[2 * h * w + px] * 255.0).round() as u8,
            ];
            put(i, j, c);
            put(i, w + GAP + j, class_color(truth.get(i, j), k));
            put(i, 2 * (w + GAP) + j, class_color(pred.get(i, j), k));
        }
    }

    let mut out = format!("P6\n{full_w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&rgb);
    out
}
