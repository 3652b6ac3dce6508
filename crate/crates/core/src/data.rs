//! Series tables, chronological splits, sliding windows and normalization.

use std::f64::consts::PI;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::{Float, Tensor};

/// Number of calendar features per step: month, day, weekday, hour, minute.
pub const MARKER_DIM: usize = 5;

/// Standard deviations below this are treated as zero and clamped to 1.
pub const STD_FLOOR: f64 = 1e-8;

/// A multivariate series: `values` is row-major `[T, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    pub names: Vec<String>,
    values: Vec<f64>,
}

const TIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            ["%Y-%m-%d", "%Y/%m/%d"]
                .iter()
                .find_map(|f| NaiveDate::parse_from_str(s, f).ok())
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

impl SeriesTable {
    pub fn new(timestamps: Vec<NaiveDateTime>, names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != timestamps.len() * names.len() {
            return Err(Error::Data(format!(
                "{} values for {} rows x {} variables",
                values.len(),
                timestamps.len(),
                names.len()
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at row {}: {} then {}",
                i + 2,
                timestamps[i],
                timestamps[i + 1]
            )));
        }
        Ok(Self {
            timestamps,
            names,
            values,
        })
    }

    /// Loads a CSV with a header row, a timestamp first column and numeric
    /// value columns. Row numbers in errors count the header as row 1.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let header = rdr.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
        if header.len() < 2 {
            return Err(Error::Data("need a timestamp column and at least one value column".into()));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 2;
            let rec = rec.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
            if rec.len() != header.len() {
                return Err(Error::Data(format!("row {row}: {} fields, header has {}", rec.len(), header.len())));
            }
            let ts = parse_timestamp(&rec[0])
                .ok_or_else(|| Error::Data(format!("row {row}, column 1: unparseable timestamp {:?}", &rec[0])))?;
            timestamps.push(ts);
            for (j, cell) in rec.iter().enumerate().skip(1) {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| Error::Data(format!("row {row}, column {}: unparseable value {cell:?}", j + 1)))?;
                values.push(v);
            }
        }
        Self::new(timestamps, names, values)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
        for (t, ts) in self.timestamps.iter().enumerate() {
            let mut rec = vec![ts.format("%Y-%m-%d %H:%M:%S").to_string()];
            rec.extend(self.row(t).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.num_vars();
        &self.values[t * n..(t + 1) * n]
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> SeriesTable {
        let n = self.num_vars();
        SeriesTable {
            timestamps: self.timestamps[start..end].to_vec(),
            names: self.names.clone(),
            values: self.values[start * n..end * n].to_vec(),
        }
    }

    /// Calendar features `[T, 5]`, each scaled into [-0.5, 0.5].
    pub fn time_markers(&self) -> Tensor<f64> {
        let mut out = Vec::with_capacity(self.len() * MARKER_DIM);
        for ts in &self.timestamps {
            out.extend(calendar_features(ts));
        }
        Tensor::new(vec![self.len(), MARKER_DIM], out).expect("marker shape")
    }
}

pub fn calendar_features(ts: &NaiveDateTime) -> [f64; MARKER_DIM] {
    [
        (ts.month0() as f64) / 11.0 - 0.5,
        (ts.day0() as f64) / 30.0 - 0.5,
        (ts.weekday().num_days_from_monday() as f64) / 6.0 - 0.5,
        (ts.hour() as f64) / 23.0 - 0.5,
        (ts.minute() as f64) / 59.0 - 0.5,
    ]
}

/// How to cut a table into train, validation and test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    /// Explicit step counts.
    Counts(usize, usize, usize),
    /// Fractions for train and test; validation takes the remainder.
    Ratios(f64, f64, f64),
}

impl SplitSpec {
    /// `(train, val, test)` step counts for a table of `total` steps.
    pub fn sizes(&self, total: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitSpec::Counts(a, b, c) => {
                if a + b + c > total {
                    return Err(Error::Data(format!(
                        "split ({a}, {b}, {c}) needs {} steps, table has {total}",
                        a + b + c
                    )));
                }
                Ok((a, b, c))
            }
            SplitSpec::Ratios(a, b, c) => {
                if a <= 0.0 || b < 0.0 || c < 0.0 || a + b + c > 1.0 + 1e-9 {
                    return Err(Error::Config(format!("bad split ratios ({a}, {b}, {c})")));
                }
                let train = floor_frac(a, total);
                let test = floor_frac(c, total);
                let val = if (a + b + c - 1.0).abs() < 1e-9 {
                    total - train - test
                } else {
                    floor_frac(b, total)
                };
                Ok((train, val, test))
            }
        }
    }
}

fn floor_frac(f: f64, n: usize) -> usize {
    // the epsilon keeps products like 0.29 * 100 from landing just below an integer
    ((f * n as f64) + 1e-9).floor() as usize
}

/// Three chronological segments. Validation and test carry up to
/// `context` preceding steps so their first window can start at the
/// segment boundary.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SeriesTable,
    pub val: SeriesTable,
    pub test: SeriesTable,
    pub val_context: usize,
    pub test_context: usize,
}

impl Splits {
    /// Step counts without the shared context.
    pub fn sizes(&self) -> (usize, usize, usize) {
        (
            self.train.len(),
            self.val.len() - self.val_context,
            self.test.len() - self.test_context,
        )
    }
}

pub fn split(table: &SeriesTable, spec: SplitSpec, context: usize) -> Result<Splits> {
    let (a, b, c) = spec.sizes(table.len())?;
    let val_context = context.min(a);
    let test_context = context.min(a + b);
    Ok(Splits {
        train: table.slice(0, a),
        val: table.slice(a - val_context, a + b),
        test: table.slice(a + b - test_context, a + b + c),
        val_context,
        test_context,
    })
}

/// `⌊fraction · T_train⌋`.
pub fn few_shot_steps(train_len: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("few-shot fraction {fraction} outside (0, 1]")));
    }
    Ok(floor_frac(fraction, train_len))
}

/// The leading `⌊fraction · T⌋` steps of a training split.
pub fn few_shot_subset(train: &SeriesTable, fraction: f64, seq_len: usize, pred_len: usize) -> Result<SeriesTable> {
    let steps = few_shot_steps(train.len(), fraction)?;
    if steps < seq_len + pred_len {
        return Err(Error::InsufficientData(format!(
            "{fraction} of {} training steps is {steps}, fewer than L + L_p = {}",
            train.len(),
            seq_len + pred_len
        )));
    }
    Ok(train.slice(0, steps))
}

/// Per-variable mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// z-scores each row of `x: [N, L]` over its lookback; constant rows get
/// std 1.
pub fn normalize_window(x: &Tensor<f64>) -> Result<(Tensor<f64>, NormStats)> {
    let &[n, l] = x.shape() else {
        return Err(Error::shape("normalize_window", x.shape(), &[]));
    };
    if l == 0 {
        return Err(Error::shape("normalize_window", x.shape(), &[]));
    }
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n * l);
    for row in x.data().chunks(l) {
        let (m, s) = mean_std(row.iter().copied(), l);
        out.extend(row.iter().map(|v| (v - m) / s));
        mean.push(m);
        std.push(s);
    }
    Ok((Tensor::new(vec![n, l], out)?, NormStats { mean, std }))
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let m = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    let s = var.sqrt();
    (m, if s < STD_FLOOR { 1.0 } else { s })
}

/// `y · std + mean` per (sample, variable) for `y: [B, L_p, N]`; `stats`
/// holds one entry per sample.
pub fn denormalize_forecast(y: &Tensor<f64>, stats: &[NormStats]) -> Result<Tensor<f64>> {
    let &[b, lp, n] = y.shape() else {
        return Err(Error::shape("denormalize_forecast", y.shape(), &[]));
    };
    if stats.len() != b || stats.iter().any(|s| s.mean.len() != n || s.std.len() != n) {
        return Err(Error::shape("denormalize_forecast", y.shape(), &[stats.len()]));
    }
    let mut out = y.data().to_vec();
    for (bi, s) in stats.iter().enumerate() {
        for t in 0..lp {
            let row = &mut out[(bi * lp + t) * n..(bi * lp + t + 1) * n];
            for (v, (m, sd)) in row.iter_mut().zip(s.mean.iter().zip(&s.std)) {
                *v = *v * sd + m;
            }
        }
    }
    Tensor::new(vec![b, lp, n], out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Normalization {
    /// Per-window, per-variable z-score over the lookback.
    Instance,
    /// Fixed per-variable statistics, usually fitted on the training split.
    Global(NormStats),
}

impl Normalization {
    pub fn fit_global(train: &SeriesTable) -> Result<Self> {
        let n = train.num_vars();
        let t = train.len();
        if t == 0 {
            return Err(Error::InsufficientData("empty training split".into()));
        }
        let (mean, std) = (0..n)
            .map(|j| mean_std((0..t).map(move |i| train.values[i * n + j]), t))
            .unzip();
        Ok(Normalization::Global(NormStats { mean, std }))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Normalization::Instance => "instance",
            Normalization::Global(_) => "global",
        }
    }
}

/// Normalized model inputs and targets for a set of windows.
#[derive(Clone, Debug)]
pub struct WindowBatch<T> {
    /// `[B, N, L]`
    pub x: Tensor<T>,
    /// `[B, L_p, N]`, scaled with the same statistics as `x`
    pub y: Tensor<T>,
    pub stats: Vec<NormStats>,
    /// window ids within the segment, in store keying order
    pub indices: Vec<usize>,
}

impl<T: Float> WindowBatch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn denormalize(&self, y: &Tensor<T>) -> Result<Tensor<f64>> {
        denormalize_forecast(&y.cast(), &self.stats)
    }
}

/// Stride-1 sliding windows over one segment. Window `i` reads inputs
/// from steps `i..i+L` and targets from `i+L..i+L+L_p`.
#[derive(Clone, Copy, Debug)]
pub struct Windows<'a> {
    pub table: &'a SeriesTable,
    pub seq_len: usize,
    pub pred_len: usize,
}

impl<'a> Windows<'a> {
    pub fn new(table: &'a SeriesTable, seq_len: usize, pred_len: usize) -> Self {
        Self {
            table,
            seq_len,
            pred_len,
        }
    }

    pub fn len(&self) -> usize {
        (self.table.len() + 1).saturating_sub(self.seq_len + self.pred_len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Message for segments too short to hold one window.
    pub fn warning(&self) -> Option<String> {
        self.is_empty().then(|| {
            format!(
                "segment of {} steps holds no window of {} + {} steps",
                self.table.len(),
                self.seq_len,
                self.pred_len
            )
        })
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::OutOfRange(format!("window {i} of {}", self.len())));
        }
        Ok(())
    }

    /// Raw lookback `[N, L]`.
    pub fn input(&self, i: usize) -> Result<Tensor<f64>> {
        self.check(i)?;
        let n = self.table.num_vars();
        let l = self.seq_len;
        let mut out = vec![0.0; n * l];
        for t in 0..l {
            for (j, &v) in self.table.row(i + t).iter().enumerate() {
                out[j * l + t] = v;
            }
        }
        Tensor::new(vec![n, l], out)
    }

    /// Raw targets `[L_p, N]`.
    pub fn target(&self, i: usize) -> Result<Tensor<f64>> {
        self.check(i)?;
        let n = self.table.num_vars();
        let start = i + self.seq_len;
        let data = self.table.values[start * n..(start + self.pred_len) * n].to_vec();
        Tensor::new(vec![self.pred_len, n], data)
    }

    /// Calendar features of the lookback `[L, 5]`.
    pub fn markers(&self, i: usize) -> Result<Tensor<f64>> {
        self.check(i)?;
        let mut out = Vec::with_capacity(self.seq_len * MARKER_DIM);
        for ts in &self.table.timestamps[i..i + self.seq_len] {
            out.extend(calendar_features(ts));
        }
        Tensor::new(vec![self.seq_len, MARKER_DIM], out)
    }

    pub fn batch<T: Float>(&self, indices: &[usize], norm: &Normalization) -> Result<WindowBatch<T>> {
        let n = self.table.num_vars();
        let (l, lp) = (self.seq_len, self.pred_len);
        let mut x = Vec::with_capacity(indices.len() * n * l);
        let mut y = Vec::with_capacity(indices.len() * n * lp);
        let mut stats = Vec::with_capacity(indices.len());
        for &i in indices {
            let raw = self.input(i)?;
            let (xn, s) = match norm {
                Normalization::Instance => normalize_window(&raw)?,
                Normalization::Global(g) => {
                    let mut d = raw.into_data();
                    for (j, row) in d.chunks_mut(l).enumerate() {
                        row.iter_mut().for_each(|v| *v = (*v - g.mean[j]) / g.std[j]);
                    }
                    (Tensor::new(vec![n, l], d)?, g.clone())
                }
            };
            x.extend(xn.data().iter().map(|&v| T::lit(v)));
            let target = self.target(i)?;
            for row in target.data().chunks(n) {
                y.extend(row.iter().enumerate().map(|(j, &v)| T::lit((v - s.mean[j]) / s.std[j])));
            }
            stats.push(s);
        }
        Ok(WindowBatch {
            x: Tensor::new(vec![indices.len(), n, l], x)?,
            y: Tensor::new(vec![indices.len(), lp, n], y)?,
            stats,
            indices: indices.to_vec(),
        })
    }
}

/// Registry entry for a benchmark dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetInfo {
    pub name: &'static str,
    pub num_vars: usize,
    pub split: SplitSpec,
    pub input_len: usize,
    pub horizons: [usize; 4],
}

const LONG: [usize; 4] = [96, 192, 336, 720];

pub const DATASETS: [DatasetInfo; 8] = [
    DatasetInfo {
        name: "ETTm1",
        num_vars: 7,
        split: SplitSpec::Counts(34465, 11521, 11521),
        input_len: 96,
        horizons: LONG,
    },
    DatasetInfo {
        name: "ETTm2",
        num_vars: 7,
        split: SplitSpec::Counts(34465, 11521, 11521),
        input_len: 96,
        horizons: LONG,
    },
    DatasetInfo {
        name: "ETTh1",
        num_vars: 7,
        split: SplitSpec::Counts(8545, 2881, 2881),
        input_len: 96,
        horizons: LONG,
    },
    DatasetInfo {
        name: "ETTh2",
        num_vars: 7,
        split: SplitSpec::Counts(8545, 2881, 2881),
        input_len: 96,
        horizons: LONG,
    },
    DatasetInfo {
        name: "ECL",
        num_vars: 321,
        split: SplitSpec::Counts(18317, 2633, 5261),
        input_len: 96,
        horizons: LONG,
    },
    DatasetInfo {
        name: "Weather",
        num_vars: 21,
        split: SplitSpec::Counts(36792, 5271, 10540),
        input_len: 96,
        horizons: LONG,
    },
    DatasetInfo {
        name: "Exchange",
        num_vars: 8,
        split: SplitSpec::Counts(5120, 665, 1422),
        input_len: 96,
        horizons: LONG,
    },
    DatasetInfo {
        name: "ILI",
        num_vars: 7,
        split: SplitSpec::Counts(617, 74, 170),
        input_len: 36,
        horizons: [24, 36, 48, 60],
    },
];

pub fn dataset_info(name: &str) -> Option<&'static DatasetInfo> {
    DATASETS.iter().find(|d| d.name.eq_ignore_ascii_case(name))
}

/// Noise-free sum of sinusoids per variable, hourly timestamps. Periods
/// divide 96 so a 96-step lookback always spans whole cycles.
pub fn synthetic_sinusoids(num_vars: usize, len: usize, seed: u64) -> SeriesTable {
    const PERIODS: [f64; 5] = [24.0, 48.0, 96.0, 32.0, 12.0];
    let mut rng = SeedTree::new(seed).stream("synthetic");
    let comps: Vec<Vec<(f64, f64, f64)>> = (0..num_vars)
        .map(|j| {
            (0..2)
                .map(|k| {
                    let period = PERIODS[(j + 2 * k) % PERIODS.len()];
                    (period, rng.gen_range(0.5..2.0), rng.gen_range(0.0..2.0 * PI))
                })
                .collect()
        })
        .collect();
    let offsets: Vec<f64> = (0..num_vars).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let timestamps = (0..len).map(|t| start + Duration::hours(t as i64)).collect();
    let mut values = Vec::with_capacity(len * num_vars);
    for t in 0..len {
        for j in 0..num_vars {
            let v: f64 = comps[j]
                .iter()
                .map(|&(p, a, ph)| a * (2.0 * PI * t as f64 / p + ph).sin())
                .sum();
            values.push(v + offsets[j]);
        }
    }
    let names = (0..num_vars).map(|j| format!("v{j}")).collect();
    SeriesTable::new(timestamps, names, values).expect("synthetic table")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(t: usize, n: usize) -> SeriesTable {
        let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        SeriesTable::new(
            (0..t).map(|i| start + Duration::hours(i as i64)).collect(),
            (0..n).map(|j| format!("c{j}")).collect(),
            (0..t * n).map(|v| v as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn toy_ratio_split() {
        let s = split(&toy(10, 1), SplitSpec::Ratios(0.6, 0.2, 0.2), 0).unwrap();
        assert_eq!(s.sizes(), (6, 2, 2));
        let s = split(&toy(10, 1), SplitSpec::Ratios(0.6, 0.2, 0.2), 3).unwrap();
        assert_eq!(s.sizes(), (6, 2, 2));
        assert_eq!(s.val.len(), 5);
        assert_eq!(s.val.row(0), s.train.row(3));
    }

    #[test]
    fn counts_exceeding_data_fail() {
        assert!(split(&toy(10, 1), SplitSpec::Counts(6, 3, 3), 0).is_err());
    }

    #[test]
    fn window_count_and_contents() {
        let t = toy(10, 2);
        let w = Windows::new(&t, 4, 2);
        assert_eq!(w.len(), 5);
        let x = w.input(1).unwrap();
        assert_eq!(x.shape(), &[2, 4]);
        // variable 0 at steps 1..5 holds 2, 4, 6, 8
        assert_eq!(&x.data()[..4], &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(w.target(4).unwrap().data(), &[16.0, 17.0, 18.0, 19.0]);
        assert!(w.input(5).is_err());
        assert!(Windows::new(&t, 8, 4).warning().is_some());
    }

    #[test]
    fn normalize_hand_cases() {
        let (x, s) = normalize_window(&Tensor::from_f64(vec![1, 2], &[1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(x.data(), &[-1.0, 1.0]);
        assert_eq!((s.mean[0], s.std[0]), (2.0, 1.0));
        let (x, s) = normalize_window(&Tensor::full(vec![1, 4], 5.0)).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
        assert_eq!(s.std[0], 1.0);
    }

    #[test]
    fn denormalize_zero_gives_means() {
        let stats = vec![NormStats {
            mean: vec![3.0, -1.0],
            std: vec![2.0, 0.5],
        }];
        let y = denormalize_forecast(&Tensor::zeros(vec![1, 3, 2]), &stats).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0, 3.0, -1.0, 3.0, -1.0]);
        assert!(denormalize_forecast(&Tensor::zeros(vec![2, 3, 2]), &stats).is_err());
    }

    #[test]
    fn few_shot_arithmetic() {
        assert_eq!(few_shot_steps(8545, 0.1).unwrap(), 854);
        assert_eq!(few_shot_steps(8545, 1.0).unwrap(), 8545);
        assert_eq!(few_shot_steps(100, 0.29).unwrap(), 29);
        let t = toy(100, 1);
        assert_eq!(few_shot_subset(&t, 1.0, 4, 2).unwrap(), t);
        assert!(matches!(few_shot_subset(&t, 0.05, 4, 2), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn markers_are_bounded() {
        let m = toy(50, 1).time_markers();
        assert_eq!(m.shape(), &[50, MARKER_DIM]);
        assert!(m.data().iter().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.csv");
        let t = SeriesTable::new(
            vec![
                parse_timestamp("2016-07-01 00:00:00").unwrap(),
                parse_timestamp("2016-07-01 01:00:00").unwrap(),
            ],
            vec!["a".into(), "b".into()],
            vec![1.25, -3.5, 0.1, 7e10],
        )
        .unwrap();
        t.write_csv(&p).unwrap();
        assert_eq!(SeriesTable::load_csv(&p).unwrap(), t);
    }

    #[test]
    fn csv_errors_locate_the_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "date,a,b\n2020-01-01 00:00,1,2\n2020-01-01 01:00,3,x\n").unwrap();
        let err = SeriesTable::load_csv(&p).unwrap_err().to_string();
        assert!(err.contains("row 3, column 3"), "{err}");
        std::fs::write(&p, "date,a\n2020-01-02,1\n2020-01-01,2\n").unwrap();
        let err = SeriesTable::load_csv(&p).unwrap_err().to_string();
        assert!(err.contains("not strictly increasing"), "{err}");
    }
}
