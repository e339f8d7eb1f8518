//! Per-dose × metal-bin result tables.

use std::fmt::Write as _;

use ductms::physics::DoseLevel;
use ductms::training::metrics::mean_sd;
use ductms::training::{MetalBin, Scored};
use serde_json::{json, Value};

/// Mean and SD of each metric over one group.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub dose: DoseLevel,
    pub bin: MetalBin,
    pub n: usize,
    pub psnr: (f64, f64),
    pub ssim: (f64, f64),
    pub rmse: (f64, f64),
}

/// One row per (dose, bin) pair, in the given order; groups may be empty.
pub fn table(scores: &[Scored], doses: &[DoseLevel]) -> Vec<Row> {
    let mut rows = Vec::new();
    for &dose in doses {
        for bin in MetalBin::ALL {
            let g: Vec<&Scored> = scores.iter().filter(|s| s.dose == dose && s.bin == bin).collect();
            let col = |f: fn(&Scored) -> f64| mean_sd(&g.iter().map(|s| f(s)).collect::<Vec<_>>());
            rows.push(Row {
                dose,
                bin,
                n: g.len(),
                psnr: col(|s| s.metrics.psnr),
                ssim: col(|s| s.metrics.ssim),
                rmse: col(|s| s.metrics.rmse),
            });
        }
    }
    rows
}

/// Fixed-precision number; non-finite values print as `inf`, `-inf`, `nan`.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{:.6}", v)
    }
}

fn jnum(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(num(v))
    }
}

pub const TABLE_HEADER: &str = "dose,bin,n,psnr_mean,psnr_sd,ssim_mean,ssim_sd,rmse_mean,rmse_sd";

pub fn table_csv(rows: &[Row]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.dose,
            r.bin.label(),
            r.n,
            num(r.psnr.0),
            num(r.psnr.1),
            num(r.ssim.0),
            num(r.ssim.1),
            num(r.rmse.0),
            num(r.rmse.1)
        );
    }
    s
}

pub fn per_sample_csv(scores: &[Scored]) -> String {
    let mut s = String::from("id,dose,bin,psnr,ssim,rmse\n");
    for x in scores {
        let m = &x.metrics;
        let _ = writeln!(s, "{},{},{},{},{},{}", x.id, x.dose, x.bin.label(), num(m.psnr), num(m.ssim), num(m.rmse));
    }
    s
}

pub fn table_json(rows: &[Row], scores: &[Scored]) -> Value {
    let all = |f: fn(&Scored) -> f64| mean_sd(&scores.iter().map(f).collect::<Vec<_>>());
    let pair = |(m, sd): (f64, f64)| json!({ "mean": jnum(m), "sd": jnum(sd) });
    json!({
        "rows": rows.iter().map(|r| json!({
            "dose": r.dose,
            "bin": r.bin,
            "n": r.n,
            "psnr": pair(r.psnr),
            "ssim": pair(r.ssim),
            "rmse": pair(r.rmse),
        })).collect::<Vec<_>>(),
        "overall": {
            "n": scores.len(),
            "psnr": pair(all(|s| s.metrics.psnr)),
            "ssim": pair(all(|s| s.metrics.ssim)),
            "rmse": pair(all(|s| s.metrics.rmse)),
        }
    })
}

/// Human-readable rendering for the terminal.
pub fn render(rows: &[Row]) -> String {
    let mut s = format!("{:<8} {:<6} {:>3}  {:>17}  {:>15}  {:>15}\n", "dose", "bin", "n", "PSNR (dB)", "SSIM", "RMSE (HU)");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:<6} {:>3}  {:>8.3} ± {:<6.3}  {:>6.4} ± {:<6.4}  {:>6.2} ± {:<6.2}",
            r.dose.label(),
            r.bin.label(),
            r.n,
            r.psnr.0,
            r.psnr.1,
            r.ssim.0,
            r.ssim.1,
            r.rmse.0,
            r.rmse.1
        );
    }
    s
}
