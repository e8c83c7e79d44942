use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_line_segment_mut};
use serde::{Deserialize, Serialize};

use super::{run_eval, EvalConfig, EvalReport, WaySpec};
use crate::corpus::{ClassSplit, Utterance};
use crate::encoder::SentenceEncoder;
use crate::error::{PieError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    K,
    N,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::K => "k",
            SweepAxis::N => "n",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(SweepAxis::K),
            "n" => Ok(SweepAxis::N),
            other => Err(PieError::invalid(format!("sweep axis must be k or n, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: WaySpec,
    pub report: EvalReport,
}

/// One [`run_eval`] per value along `axis`, every other setting taken from
/// `base`. Values must be strictly ascending; `all` is only valid on N.
pub fn sweep<E: SentenceEncoder + ?Sized>(
    model: &E,
    utterances: &[Utterance],
    splits: &[ClassSplit],
    axis: SweepAxis,
    values: &[WaySpec],
    base: &EvalConfig,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(PieError::invalid("sweep needs at least one value"));
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PieError::invalid("sweep values must be strictly ascending"));
    }
    values
        .iter()
        .map(|&value| {
            let mut config = base.clone();
            match (axis, value) {
                (SweepAxis::K, WaySpec::Fixed(k)) => config.k = k,
                (SweepAxis::K, WaySpec::All) => {
                    return Err(PieError::invalid("`all` is not a K value"));
                }
                (SweepAxis::N, n) => config.n = n,
            }
            Ok(SweepPoint {
                value,
                report: run_eval(model, utterances, splits, &config)?,
            })
        })
        .collect()
}

/// Writes `value,mean,std` rows.
pub fn write_sweep_csv(path: impl AsRef<Path>, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["value", "mean", "std"])?;
    for p in points {
        w.write_record([p.value.to_string(), format!("{:.4}", p.report.mean), format!("{:.4}", p.report.std)])?;
    }
    w.flush().map_err(|e| PieError::io(path.as_ref(), e))
}

/// Line plot of mean accuracy with ±std bars. Values are spaced evenly
/// along x; y spans 0 to 100 percent with gridlines every 10.
pub fn plot_sweep(path: impl AsRef<Path>, points: &[SweepPoint]) -> Result<()> {
    if points.is_empty() {
        return Err(PieError::invalid("nothing to plot"));
    }
    let (w, h) = (640u32, 400u32);
    let (left, right, top, bottom) = (50.0f32, 20.0f32, 20.0f32, 40.0f32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    let axis = Rgb([40, 40, 40]);
    let line = Rgb([31, 119, 180]);
    let plot_h = h as f32 - top - bottom;
    let plot_w = w as f32 - left - right;
    let y_of = |acc: f64| top + plot_h * (1.0 - (acc.clamp(0.0, 100.0) as f32) / 100.0);
    for tick in 0..=10 {
        let y = y_of(tick as f64 * 10.0);
        draw_line_segment_mut(&mut img, (left, y), (w as f32 - right, y), grid);
    }
    draw_line_segment_mut(&mut img, (left, top), (left, h as f32 - bottom), axis);
    draw_line_segment_mut(&mut img, (left, h as f32 - bottom), (w as f32 - right, h as f32 - bottom), axis);
    let x_of = |i: usize| {
        if points.len() == 1 {
            left + plot_w / 2.0
        } else {
            left + 20.0 + (plot_w - 40.0) * i as f32 / (points.len() - 1) as f32
        }
    };
    for (i, p) in points.iter().enumerate() {
        let x = x_of(i);
        let (m, s) = (p.report.mean, p.report.std);
        draw_line_segment_mut(&mut img, (x, y_of(m - s)), (x, y_of(m + s)), axis);
        draw_line_segment_mut(&mut img, (x - 4.0, y_of(m - s)), (x + 4.0, y_of(m - s)), axis);
        draw_line_segment_mut(&mut img, (x - 4.0, y_of(m + s)), (x + 4.0, y_of(m + s)), axis);
        draw_line_segment_mut(&mut img, (x, h as f32 - bottom), (x, h as f32 - bottom + 5.0), axis);
        if i + 1 < points.len() {
            let next = &points[i + 1].report;
            draw_line_segment_mut(&mut img, (x, y_of(m)), (x_of(i + 1), y_of(next.mean)), line);
        }
    }
    for (i, p) in points.iter().enumerate() {
        draw_filled_circle_mut(&mut img, (x_of(i) as i32, y_of(p.report.mean) as i32), 4, line);
    }
    let path = path.as_ref();
    img.save(path)
        .map_err(|e| PieError::io(path, std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::eval::tests::fixture;

    #[test]
    fn oracle_sweep_is_flat_and_emits_files() {
        let (utts, splits, enc) = fixture(6, 8);
        let base = EvalConfig {
            episodes_per_split: 10,
            label_support: true,
            n: WaySpec::Fixed(3),
            ..Default::default()
        };
        let ks = [WaySpec::Fixed(0), WaySpec::Fixed(1), WaySpec::Fixed(2)];
        let points = sweep(&enc, &utts, &splits, SweepAxis::K, &ks, &base).unwrap();
        assert!(points.iter().all(|p| p.report.mean == 100.0));
        assert_eq!(points[1].report.k, 1);
        let ns = [WaySpec::Fixed(5), WaySpec::All];
        let points_n = sweep(&enc, &utts, &splits, SweepAxis::N, &ns, &base).unwrap();
        assert_eq!(points_n[1].report.splits[0].n, 6);

        let dir = tempfile::tempdir().unwrap();
        write_sweep_csv(dir.path().join("sweep.csv"), &points).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().next(), Some("value,mean,std"));
        assert_eq!(csv.lines().nth(2), Some("1,100.0000,0.0000"));
        plot_sweep(dir.path().join("sweep.png"), &points).unwrap();
        let png = image::open(dir.path().join("sweep.png")).unwrap();
        assert_eq!((png.width(), png.height()), (640, 400));
    }

    #[test]
    fn bad_values() {
        let (utts, splits, enc) = fixture(4, 8);
        let base = EvalConfig { label_support: true, episodes_per_split: 2, n: WaySpec::Fixed(2), ..Default::default() };
        assert!(sweep(&enc, &utts, &splits, SweepAxis::K, &[], &base).is_err());
        assert!(sweep(&enc, &utts, &splits, SweepAxis::K, &[WaySpec::Fixed(2), WaySpec::Fixed(1)], &base).is_err());
        assert!(sweep(&enc, &utts, &splits, SweepAxis::K, &[WaySpec::All], &base).is_err());
    }
}
