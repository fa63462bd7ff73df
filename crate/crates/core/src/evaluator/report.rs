//! Curve CSV and the one-line summary.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{CurvePoint, EvalCurve, EvalError, Result};

const HEADER: &str = "bias,seen_acc,unseen_acc";

/// Best seen, best unseen, best HM and AUC, as fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
    pub auc: f64,
}

impl Summary {
    pub fn of(curve: &EvalCurve) -> Self {
        Summary {
            seen: curve.best_seen,
            unseen: curve.best_unseen,
            hm: curve.best_hm,
            auc: curve.auc,
        }
    }

    /// `S U HM AUC` as bare 1-decimal percentages.
    pub fn table_row(&self) -> String {
        format!(
            "{:.1} {:.1} {:.1} {:.1}",
            100.0 * self.seen,
            100.0 * self.unseen,
            100.0 * self.hm,
            100.0 * self.auc
        )
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "S={:.1} U={:.1} HM={:.1} AUC={:.1}",
            100.0 * self.seen,
            100.0 * self.unseen,
            100.0 * self.hm,
            100.0 * self.auc
        )
    }
}

/// Parses the [`Display`](fmt::Display) form back into fractions. Values
/// carry the 1-decimal rounding of the printed percentages.
impl FromStr for Summary {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |message: String| EvalError::Parse { line: 1, message };
        let mut vals = [0.0; 4];
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        for (k, (field, key)) in fields.iter().zip(["S", "U", "HM", "AUC"]).enumerate() {
            let v = field
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| bad(format!("expected {key}=<value>, found {field:?}")))?;
            vals[k] = v.parse::<f64>().map_err(|_| bad(format!("bad number {v:?}")))? / 100.0;
        }
        Ok(Summary {
            seen: vals[0],
            unseen: vals[1],
            hm: vals[2],
            auc: vals[3],
        })
    }
}

pub fn format_curve_csv(curve: &EvalCurve) -> String {
    let mut out = format!("{HEADER}\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.bias, p.seen_acc, p.unseen_acc));
    }
    out
}

/// Reads a curve CSV; metrics are recomputed from the points.
pub fn parse_curve_csv(text: &str) -> Result<EvalCurve> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HEADER => {}
        other => {
            return Err(EvalError::Parse {
                line: 1,
                message: format!("expected header {HEADER:?}, found {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| EvalError::Parse { line: i + 1, message };
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|_| bad(format!("bad number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let [bias, seen_acc, unseen_acc] = vals[..] else {
            return Err(bad(format!("expected 3 fields, found {}", vals.len())));
        };
        points.push(CurvePoint {
            bias,
            seen_acc,
            unseen_acc,
        });
    }
    Ok(EvalCurve::from_points(points))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_curve_csv(curve: &EvalCurve, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &format_curve_csv(curve))
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<EvalCurve> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_curve_csv(&text)
}

/// Writes the curve CSV and the summary line.
pub fn report(curve: &EvalCurve, csv_path: impl AsRef<Path>, summary_path: impl AsRef<Path>) -> Result<Summary> {
    let summary = Summary::of(curve);
    write_curve_csv(curve, csv_path)?;
    write(summary_path.as_ref(), &format!("{summary}\n"))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_format() {
        let s = Summary {
            seen: 0.610,
            unseen: 0.486,
            hm: 0.431,
            auc: 0.259,
        };
        assert_eq!(s.to_string(), "S=61.0 U=48.6 HM=43.1 AUC=25.9");
        assert_eq!(s.table_row(), "61.0 48.6 43.1 25.9");
        let back: Summary = s.to_string().parse().unwrap();
        assert!((back.seen - 0.61).abs() < 1e-12 && (back.auc - 0.259).abs() < 1e-12);
        assert!("S=1 U=2 HM=3".parse::<Summary>().is_err());
    }

    #[test]
    fn single_point_curve() {
        let c = EvalCurve::from_points(vec![CurvePoint {
            bias: 0.0,
            seen_acc: 0.5,
            unseen_acc: 0.5,
        }]);
        assert_eq!(c.auc, 0.0);
        let csv = format_curve_csv(&c);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(parse_curve_csv(&csv).unwrap(), c);
    }

    #[test]
    fn csv_round_trip_with_sentinels() {
        let c = EvalCurve::from_points(vec![
            CurvePoint {
                bias: f64::NEG_INFINITY,
                seen_acc: 0.0,
                unseen_acc: 0.75,
            },
            CurvePoint {
                bias: -0.1 / 3.0,
                seen_acc: 1.0 / 3.0,
                unseen_acc: 0.5,
            },
            CurvePoint {
                bias: f64::INFINITY,
                seen_acc: 1.0,
                unseen_acc: 0.0,
            },
        ]);
        assert_eq!(parse_curve_csv(&format_curve_csv(&c)).unwrap(), c);
        assert!(parse_curve_csv("bias,seen\n").is_err());
    }
}
