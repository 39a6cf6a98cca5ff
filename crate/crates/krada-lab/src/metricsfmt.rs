//! Human-readable result tables for the terminal. File output lives in
//! `report`; these printers round the same way (one decimal, percent).

use crate::report::pct;
use crate::run::AblationRow;
use krada_core::metrics::{ImageLevelReport, MetricReport};

fn cell(v: Option<f64>) -> String {
    v.map(pct).unwrap_or_else(|| "-".into())
}

pub fn print_eval(pixel: &MetricReport, image: &ImageLevelReport) {
    let mut per_class = String::new();
    for (i, iou) in pixel.per_class.iter().enumerate() {
        let name = if i == pixel.k {
            "unknown".to_string()
        } else {
            format!("class {}", i + 1)
        };
        per_class.push_str(&format!("  {name:<9} {}\n", cell(*iou)));
    }
    print!("per-class IoU (%):\n{per_class}");
    println!(
        "mIoU {}  mIoU* {}  unknown IoU {}",
        cell(pixel.miou),
        cell(pixel.miou_star),
        cell(pixel.unknown_iou())
    );
    let flag = if image.precision_undefined {
        "  (precision undefined: positives exist but none predicted)"
    } else {
        ""
    };
    println!(
        "image-level unknown detection: acc {} prec {} rec {} F1 {}{flag}",
        pct(image.accuracy),
        pct(image.precision),
        pct(image.recall),
        pct(image.f1)
    );
}

pub fn print_rows(rows: &[AblationRow]) {
    println!(
        "{:<24} {:>6} {:>7} {:>11} {:>8}",
        "row", "mIoU", "mIoU*", "unknown IoU", "img F1"
    );
    for r in rows {
        println!(
            "{:<24} {:>6} {:>7} {:>11} {:>8}",
            r.label,
            cell(r.pixel.miou),
            cell(r.pixel.miou_star),
            cell(r.pixel.unknown_iou()),
            pct(r.image.f1)
        );
    }
}
