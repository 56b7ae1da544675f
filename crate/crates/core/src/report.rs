//! Summary statistics and CSV output.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

pub fn summarize(xs: &[f64]) -> Summary {
    let count = xs.len();
    if count == 0 {
        return Summary {
            mean: f64::NAN,
            stddev: f64::NAN,
            count,
        };
    }
    let mean = xs.iter().sum::<f64>() / count as f64;
    let stddev = if count < 2 {
        0.0
    } else {
        let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (count - 1) as f64).sqrt()
    };
    Summary {
        mean,
        stddev,
        count,
    }
}

/// Combines summaries of disjoint samples as if summarized together.
pub fn pool(parts: &[Summary]) -> Summary {
    let parts: Vec<&Summary> = parts.iter().filter(|p| p.count > 0).collect();
    let count: usize = parts.iter().map(|p| p.count).sum();
    if count == 0 {
        return summarize(&[]);
    }
    let mean = parts.iter().map(|p| p.mean * p.count as f64).sum::<f64>() / count as f64;
    let stddev = if count < 2 {
        0.0
    } else {
        let ss: f64 = parts
            .iter()
            .map(|p| {
                p.stddev.powi(2) * (p.count - 1) as f64 + p.count as f64 * (p.mean - mean).powi(2)
            })
            .sum();
        (ss / (count - 1) as f64).sqrt()
    };
    Summary {
        mean,
        stddev,
        count,
    }
}

/// Least-squares slope of `ys` over `xs`; `None` with fewer than two
/// distinct x values.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Writes a header row and one row per record. Unless `deterministic`, a
/// `# generated_at=<unix seconds>` comment line comes first.
pub fn write_csv<T: Serialize>(
    path: &Path,
    header: &[&str],
    rows: &[T],
    deterministic: bool,
) -> io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    if !deterministic {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(out, "# generated_at={secs}")?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file produced by [`write_csv`].
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    struct Row {
        name: String,
        value: f64,
    }

    #[test]
    fn summary_matches_hand_computation() {
        let s = summarize(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(s.mean, 5.0);
        assert!((s.stddev - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[3.0]).stddev, 0.0);
        assert!(summarize(&[]).mean.is_nan());
    }

    #[test]
    fn pooled_summary_equals_joint_summary() {
        let xs = [1.0, 7.5, 3.0, 3.0, 10.0, -2.0, 4.25];
        let joint = summarize(&xs);
        let pooled = pool(&[
            summarize(&xs[..2]),
            summarize(&xs[2..3]),
            summarize(&[]),
            summarize(&xs[3..]),
        ]);
        assert_eq!(pooled.count, joint.count);
        assert!((pooled.mean - joint.mean).abs() < 1e-12);
        assert!((pooled.stddev - joint.stddev).abs() < 1e-12);
    }

    #[test]
    fn slope_of_a_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 4.0 * x + 1.0).collect();
        assert!((fit_slope(&xs, &ys).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(fit_slope(&[1.0], &[1.0]), None);
        assert_eq!(fit_slope(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn csv_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            Row {
                name: "a".into(),
                value: 1.5,
            },
            Row {
                name: "b,c".into(),
                value: -2.0,
            },
        ];
        let p = dir.path().join("x.csv");
        write_csv(&p, &["name", "value"], &rows, true).unwrap();
        let first = std::fs::read(&p).unwrap();
        write_csv(&p, &["name", "value"], &rows, true).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        assert_eq!(read_csv::<Row>(&p).unwrap(), rows);

        write_csv::<Row>(&p, &["name", "value"], &[], false).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# generated_at="));
        assert_eq!(&lines[1..], &["name,value"]);
        assert!(read_csv::<Row>(&p).unwrap().is_empty());
    }
}
