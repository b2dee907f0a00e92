use std::io::Write;

use super::{DepthCurve, DiversityRow, EngineError, NoiseStudy, RoundBatchResult, RoundReport};

/// Six decimals, or `nan`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn seconds(v: f64, wall_clock: bool) -> String {
    format_float(if wall_clock { v } else { 0.0 })
}

/// One row per round and seed. Timings are written as 0 unless
/// `wall_clock` is set, so reruns reproduce the file exactly.
pub fn write_rounds_csv(
    out: impl Write,
    reports: &[RoundReport],
    num_classes: usize,
    wall_clock: bool,
) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["round".to_string(), "labels_per_image".into(), "miou".into()];
    header.extend((0..num_classes).map(|c| format!("class_{c}_iou")));
    header.extend(["train_loss".into(), "seconds".into(), "seed".into()]);
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.round.to_string(), r.labels_per_image.to_string(), format_float(r.miou)];
        row.extend((0..num_classes).map(|c| format_float(r.per_class_iou.get(c).copied().flatten().unwrap_or(f64::NAN))));
        row.extend([format_float(r.train_loss), seconds(r.seconds, wall_clock), r.seed.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diversity_csv(out: impl Write, rows: &[DiversityRow]) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["eta", "images", "mean_miou", "std_miou"])?;
    for r in rows {
        w.write_record([format_float(r.eta), r.images.to_string(), format_float(r.mean_miou), format_float(r.std_miou)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_round_batch_csv(out: impl Write, results: &[RoundBatchResult], wall_clock: bool) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "pixels_per_round",
        "rounds",
        "round",
        "labels_per_image",
        "mean_miou",
        "std_miou",
        "cumulative_label_visits",
        "cumulative_seconds",
    ])?;
    for r in results {
        for p in &r.curve {
            w.write_record([
                r.pixels_per_round.to_string(),
                r.rounds.to_string(),
                p.round.to_string(),
                p.labels_per_image.to_string(),
                format_float(p.mean_miou),
                format_float(p.std_miou),
                p.cumulative_label_visits.to_string(),
                seconds(p.cumulative_seconds, wall_clock),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_noise_csv(out: impl Write, study: &NoiseStudy) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "round",
        "labels_per_image",
        "clean_mean_miou",
        "clean_std_miou",
        "noisy_mean_miou",
        "noisy_std_miou",
    ])?;
    for r in &study.rows {
        w.write_record([
            r.round.to_string(),
            r.labels_per_image.to_string(),
            format_float(r.clean_mean),
            format_float(r.clean_std),
            format_float(r.noisy_mean),
            format_float(r.noisy_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_depth_csv(out: impl Write, curves: &[DepthCurve]) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["num_blocks", "round", "labels_per_image", "mean_miou", "std_miou"])?;
    for c in curves {
        for p in &c.curve {
            w.write_record([
                c.num_blocks.to_string(),
                p.round.to_string(),
                p.labels_per_image.to_string(),
                format_float(p.mean_miou),
                format_float(p.std_miou),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
