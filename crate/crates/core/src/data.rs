//! Labelled datasets, the synthetic generator with controlled spectral decay,
//! and the CSV file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::{stream, CounterRng};

/// Examples stored as the columns of `x` (`n x m`). A row-major copy of the
/// examples is kept alongside for contiguous per-example access.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DenseMatrix,
    examples: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    /// `p` is inferred as `max label + 1`.
    pub fn new(x: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        let p = labels.iter().max().map_or(0, |&l| l + 1);
        Self::with_num_classes(x, labels, p)
    }

    pub fn with_num_classes(x: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.cols() == 0 || x.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != x.cols() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} examples",
                labels.len(),
                x.cols()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        x.check_finite()?;
        let examples = x.transpose().into_vec();
        Ok(Self {
            x,
            examples,
            labels,
            num_classes,
        })
    }

    /// Feature dimension.
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    /// Number of examples.
    pub fn m(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.examples[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Examples at `indices`, in that order, keeping the class count.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.n();
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.m()) {
            return Err(Error::InvalidArgument(format!("example index {bad} out of range")));
        }
        let x = DenseMatrix::from_fn(n, indices.len(), |r, c| self.example(indices[c])[r])?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::with_num_classes(x, labels, self.num_classes)
    }

    /// Splits off the last `holdout` examples.
    pub fn split_tail(&self, holdout: usize) -> Result<(Dataset, Dataset)> {
        if holdout == 0 || holdout >= self.m() {
            return Err(Error::InvalidArgument(format!(
                "holdout must be in [1, {}), got {holdout}",
                self.m()
            )));
        }
        let cut = self.m() - holdout;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.m()).collect();
        Ok((self.select(&head)?, self.select(&tail)?))
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file)
    }

    /// Reads `label,f1,…,fn` rows after a one-line header.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(input);
        let mut n = None;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let parse_err = |message: String| Error::Parse { line, message };
            if record.len() < 2 {
                return Err(parse_err("expected a label and at least one feature".into()));
            }
            match n {
                None => n = Some(record.len() - 1),
                Some(n) if n != record.len() - 1 => {
                    return Err(parse_err(format!(
                        "expected {n} features, found {}",
                        record.len() - 1
                    )))
                }
                Some(_) => {}
            }
            let label_field = record[0].trim();
            let label: i64 = label_field
                .parse()
                .map_err(|_| parse_err(format!("label {label_field:?} is not an integer")))?;
            if label < 0 {
                return Err(parse_err(format!("negative label {label}")));
            }
            labels.push(label as usize);
            for (j, field) in record.iter().skip(1).enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(format!("feature {} value {field:?} is not a number", j + 1)))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("feature {} is not finite", j + 1)));
                }
                values.push(v);
            }
        }
        let Some(n) = n else {
            return Err(Error::Parse {
                line: 1,
                message: "no data rows".into(),
            });
        };
        let m = labels.len();
        let rows = DenseMatrix::new(m, n, values)?;
        Dataset::new(rows.transpose(), labels)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Floats are written with 17 significant digits so a reload is exact.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((1..=self.n()).map(|j| format!("f{j}")))
            .collect();
        writer.write_record(&header).map_err(csv_io)?;
        let mut row = Vec::with_capacity(self.n() + 1);
        for i in 0..self.m() {
            row.clear();
            row.push(self.labels[i].to_string());
            row.extend(self.example(i).iter().map(|v| format!("{v:.16e}")));
            writer.write_record(&row).map_err(csv_io)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    /// Eigenvalue `i` of the feature covariance is `i^{-decay_power}`.
    pub decay_power: f64,
    /// Standard deviation of the Gaussian score noise before the argmax.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidArgument("n and m must be positive".into()));
        }
        if self.p < 2 {
            return Err(Error::InvalidArgument(format!("p must be at least 2, got {}", self.p)));
        }
        if !(self.decay_power >= 0.0 && self.decay_power.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "decay_power must be a finite value >= 0, got {}",
                self.decay_power
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    /// Population eigenvalues `1, 2^{-d}, …, n^{-d}`.
    pub fn spectrum(&self) -> Vec<f64> {
        (1..=self.n).map(|i| (i as f64).powf(-self.decay_power)).collect()
    }
}

/// Draws `x_i = D^{1/2} g_i` and labels `argmax(W·x_i + noise·ξ_i)` for a
/// planted `W` with unit-norm Gaussian rows. Returns the dataset and `W`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, DenseMatrix)> {
    spec.validate()?;
    let (n, m, p) = (spec.n, spec.m, spec.p);
    let scales: Vec<f64> = spec.spectrum().iter().map(|l| l.sqrt()).collect();

    let mut rng = CounterRng::new(spec.seed, stream::PLANTED);
    let mut planted = DenseMatrix::from_fn(p, n, |_, _| rng.standard_normal())?;
    for r in 0..p {
        let row = planted.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }

    let mut features = CounterRng::new(spec.seed, stream::FEATURES);
    let mut noise = CounterRng::new(spec.seed, stream::LABEL_NOISE);
    let mut examples = vec![0.0; n * m];
    let mut labels = Vec::with_capacity(m);
    let mut scores = vec![0.0; p];
    for x in examples.chunks_exact_mut(n) {
        for (v, s) in x.iter_mut().zip(&scales) {
            *v = s * features.standard_normal();
        }
        for (c, score) in scores.iter_mut().enumerate() {
            *score = crate::linalg::dot(planted.row(c), x);
            if spec.noise > 0.0 {
                *score += spec.noise * noise.standard_normal();
            }
        }
        labels.push(crate::losses::LossModel::predict(&scores));
    }
    let x = DenseMatrix::new(m, n, examples)?.transpose();
    Ok((Dataset::with_num_classes(x, labels, p)?, planted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{second_moment, sym_eig};

    fn spec(n: usize, m: usize, decay_power: f64, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            n,
            m,
            p: 3,
            decay_power,
            noise,
            seed: 11,
        }
    }

    #[test]
    fn csv_fixture() {
        let text = "label,f1,f2\n0,1.0,2.0\n1,3.0,4.0\n";
        let d = Dataset::read_csv(text.as_bytes()).unwrap();
        assert_eq!((d.n(), d.m(), d.num_classes()), (2, 2, 2));
        assert_eq!(d.features().column(0), vec![1.0, 2.0]);
        assert_eq!(d.features().column(1), vec![3.0, 4.0]);
        assert_eq!(d.example(1), &[3.0, 4.0]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let err = |text: &str| Dataset::read_csv(text.as_bytes()).unwrap_err().to_string();
        assert_eq!(err(""), "line 1: no data rows");
        assert_eq!(err("label,f1\n"), "line 1: no data rows");
        assert!(err("label,f1,f2\n0,1,2\n1,3\n").starts_with("line 3:"));
        assert!(err("label,f1\n0,1\n1,abc\n").contains("line 3"));
        assert!(err("label,f1\n-1,1\n").contains("negative label"));
        assert!(err("label,f1\n0.5,1\n").starts_with("line 2:"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (d, _) = generate_synthetic(&spec(5, 40, 1.5, 0.3)).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.labels(), d.labels());
        let bits = |m: &DenseMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.features()), bits(d.features()));
    }

    #[test]
    fn synthetic_is_reproducible() {
        let s = spec(6, 50, 2.0, 0.1);
        let (a, wa) = generate_synthetic(&s).unwrap();
        let (b, wb) = generate_synthetic(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
    }

    #[test]
    fn noiseless_labels_are_realizable() {
        let (d, w) = generate_synthetic(&spec(8, 300, 1.0, 0.0)).unwrap();
        for i in 0..d.m() {
            let scores = w.matvec(d.example(i)).unwrap();
            assert_eq!(crate::losses::LossModel::predict(&scores), d.label(i));
        }
        for r in 0..w.rows() {
            assert!((crate::linalg::norm2(w.row(r)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_spectrum_concentrates() {
        let (n, m) = (8, 20_000);
        let (d, _) = generate_synthetic(&spec(n, m, 0.0, 0.0)).unwrap();
        let eig = sym_eig(&second_moment(d.features()).unwrap()).unwrap();
        // Extreme sample eigenvalues sit near (1 ± sqrt(n/m))².
        let slack = 3.0 * (n as f64 / m as f64).sqrt();
        for l in eig.eigenvalues {
            assert!((l - 1.0).abs() < slack, "{l}");
        }
    }

    #[test]
    fn select_and_split() {
        let (d, _) = generate_synthetic(&spec(4, 10, 1.0, 0.0)).unwrap();
        let (train, eval) = d.split_tail(3).unwrap();
        assert_eq!((train.m(), eval.m()), (7, 3));
        assert_eq!(eval.example(0), d.example(7));
        assert_eq!(train.num_classes(), d.num_classes());
        assert!(d.split_tail(10).is_err());
    }

    #[test]
    fn rejects_invalid() {
        let x = DenseMatrix::zeros(2, 2);
        assert!(matches!(Dataset::new(x.clone(), vec![0]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(
            Dataset::with_num_classes(x, vec![0, 2], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        let mut s = spec(3, 3, 1.0, 0.0);
        s.p = 1;
        assert!(generate_synthetic(&s).is_err());
    }
}
