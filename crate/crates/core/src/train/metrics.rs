use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How per-class sensitivity and F1 are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

impl FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "micro" => Ok(Averaging::Micro),
            other => Err(Error::config("eval.averaging", format!("unknown averaging `{other}` (macro|micro)"))),
        }
    }
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Macro => "macro",
            Averaging::Micro => "micro",
        })
    }
}

/// Square confusion matrix, rows are true classes and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    cells: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            k: classes,
            cells: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut m = Confusion::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Input(format!("class pair ({t},{p}) out of range for {classes} classes")));
            }
            m.cells[t * classes + p] += 1;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.cells[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.cells[k * self.k..(k + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, k)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|k| self.get(k, k)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.cells.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    /// One comma-separated line per true class.
    pub fn to_csv(&self) -> String {
        self.cells
            .chunks(self.k)
            .map(|r| r.iter().map(u64::to_string).collect::<Vec<_>>().join(",") + "\n")
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub f1: f64,
    pub kappa: f64,
    pub averaging: Averaging,
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn from_confusion(m: Confusion, averaging: Averaging) -> Result<Self> {
        let n = m.total();
        if n == 0 {
            return Err(Error::Input("cannot score an empty evaluation set".into()));
        }
        let k = m.classes();
        let accuracy = m.trace() as f64 / n as f64;
        let (sensitivity, f1) = match averaging {
            Averaging::Micro => (accuracy, accuracy),
            Averaging::Macro => {
                let recalls: Vec<f64> = (0..k)
                    .filter(|&c| m.row_sum(c) > 0)
                    .map(|c| m.get(c, c) as f64 / m.row_sum(c) as f64)
                    .collect();
                let sensitivity = recalls.iter().sum::<f64>() / recalls.len() as f64;
                let f1 = (0..k)
                    .map(|c| {
                        let tp = m.get(c, c);
                        let denom = m.row_sum(c) + m.col_sum(c);
                        if denom == 0 {
                            0.0
                        } else {
                            2.0 * tp as f64 / denom as f64
                        }
                    })
                    .sum::<f64>()
                    / k as f64;
                (sensitivity, f1)
            }
        };
        // integer numerator and denominator of (p_o - p_e) / (1 - p_e), scaled by N²
        let n2 = n as u128 * n as u128;
        let chance: u128 = (0..k).map(|c| m.row_sum(c) as u128 * m.col_sum(c) as u128).sum();
        let kappa = if chance == n2 {
            log::warn!("degenerate marginals: chance agreement is 1, kappa reported as 0");
            0.0
        } else {
            let observed = n as u128 * m.trace() as u128;
            (observed as f64 - chance as f64) / (n2 - chance) as f64
        };
        Ok(MetricsReport {
            accuracy,
            sensitivity,
            f1,
            kappa,
            averaging,
            confusion: m,
        })
    }

    /// Scores predicted class indices against the truth.
    pub fn score(classes: usize, truth: &[usize], predicted: &[usize], averaging: Averaging) -> Result<Self> {
        Self::from_confusion(Confusion::from_pairs(classes, truth, predicted)?, averaging)
    }

    /// Recall of class `k`, `None` without true samples.
    pub fn recall(&self, k: usize) -> Option<f64> {
        let support = self.confusion.row_sum(k);
        (support > 0).then(|| self.confusion.get(k, k) as f64 / support as f64)
    }

    pub fn to_text(&self) -> String {
        format!(
            "accuracy={}\nsensitivity={}\nf1={}\nkappa={}\naveraging={}\nsamples={}\n",
            self.accuracy,
            self.sensitivity,
            self.f1,
            self.kappa,
            self.averaging,
            self.confusion.total()
        )
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
