//! Series ingestion, Z-score normalization, chronological splits, supervised
//! windows and reversible instance normalization (RevIN).
//!
//! All standard deviations are population (divide by `n`) deviations.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header names recognised as a leading timestamp column.
const DATE_HEADERS: &[&str] = &["date", "time", "datetime", "timestamp", "date_time"];

pub const REVIN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    /// 6:2:2, used for the ETT family.
    pub const ETT: SplitRatios = SplitRatios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    /// 7:1:2, used for every other dataset.
    pub const STANDARD: SplitRatios = SplitRatios {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        r.validate()?;
        Ok(r)
    }

    /// Protocol default for a dataset name.
    pub fn for_dataset(name: &str) -> Self {
        if name.to_ascii_uppercase().starts_with("ETT") {
            Self::ETT
        } else {
            Self::STANDARD
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::config(format!("split ratios must be positive, got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Contiguous, ordered, disjoint index ranges covering every timestep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// Floor-allocates train and val; the remainder goes to test. Every split
/// must hold at least `min_len` steps.
pub fn chronological_split(len: usize, ratios: SplitRatios, min_len: usize) -> Result<SplitRanges> {
    ratios.validate()?;
    // The nudge keeps exact products such as 0.6 * 17420 from flooring one short.
    let train_end = (len as f64 * ratios.train + 1e-9).floor() as usize;
    let val_end = train_end + (len as f64 * ratios.val + 1e-9).floor() as usize;
    let val_end = val_end.min(len);
    let ranges = SplitRanges {
        train: 0..train_end,
        val: train_end..val_end,
        test: val_end..len,
    };
    for (name, r) in [("train", &ranges.train), ("val", &ranges.val), ("test", &ranges.test)] {
        if r.len() < min_len.max(1) {
            return Err(Error::InsufficientData(format!(
                "{name} split has {} steps, need at least {}",
                r.len(),
                min_len.max(1)
            )));
        }
    }
    Ok(ranges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        ChannelStats { mean, std: var.sqrt() }
    }
}

/// A multivariate series stored channel-major.
#[derive(Debug, Clone)]
pub struct SeriesDataset {
    channel_names: Vec<String>,
    columns: Vec<Vec<f64>>,
    split_ratios: SplitRatios,
    train_stats: Option<Vec<ChannelStats>>,
}

impl SeriesDataset {
    pub fn from_columns(channel_names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if channel_names.len() != columns.len() {
            return Err(Error::Format(format!(
                "{} channel names for {} columns",
                channel_names.len(),
                columns.len()
            )));
        }
        if columns.is_empty() || columns[0].is_empty() {
            return Err(Error::Format("dataset has no values".into()));
        }
        let len = columns[0].len();
        if columns.iter().any(|c| c.len() != len) {
            return Err(Error::Format("channels have different lengths".into()));
        }
        Ok(SeriesDataset {
            channel_names,
            columns,
            split_ratios: SplitRatios::STANDARD,
            train_stats: None,
        })
    }

    pub fn with_split_ratios(mut self, ratios: SplitRatios) -> Result<Self> {
        ratios.validate()?;
        self.split_ratios = ratios;
        Ok(self)
    }

    /// Number of timesteps.
    pub fn len(&self) -> usize {
        self.columns[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.columns.len()
    }

    /// (timesteps, channels)
    pub fn shape(&self) -> (usize, usize) {
        (self.len(), self.n_channels())
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.columns[c]
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.columns[c][t]
    }

    pub fn split_ratios(&self) -> SplitRatios {
        self.split_ratios
    }

    /// Per-channel train-split statistics; present after [`zscore_fit_apply`].
    pub fn train_stats(&self) -> Option<&[ChannelStats]> {
        self.train_stats.as_deref()
    }

    pub fn split(&self, min_len: usize) -> Result<SplitRanges> {
        chronological_split(self.len(), self.split_ratios, min_len)
    }

    /// Maps Z-scored values of channel `c` back to original units.
    pub fn denormalize(&self, c: usize, values: &[f64]) -> Vec<f64> {
        match &self.train_stats {
            Some(stats) => values.iter().map(|v| v * stats[c].std + stats[c].mean).collect(),
            None => values.to_vec(),
        }
    }
}

/// Reads a comma-separated file with one header row. When
/// `date_column_present`, the first column is dropped.
pub fn load_csv(path: impl AsRef<Path>, date_column_present: bool) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, Some(date_column_present))
}

/// Like [`load_csv`], detecting a leading date column from its header name.
pub fn load_csv_auto(path: impl AsRef<Path>) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, None)
}

pub fn is_date_header(name: &str) -> bool {
    DATE_HEADERS.contains(&name.trim().to_ascii_lowercase().as_str())
}

fn parse_csv(text: &str, date_column: Option<bool>) -> Result<SeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Format("empty file".into()));
    }
    let skip = usize::from(date_column.unwrap_or_else(|| is_date_header(&headers[0])));
    if headers.len() <= skip {
        return Err(Error::Format("no value columns".into()));
    }
    let names: Vec<String> = headers.iter().skip(skip).map(|h| h.trim().to_string()).collect();
    let mut columns = vec![Vec::new(); names.len()];
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based line number in the file, header included
        let row = i + 2;
        if record.len() != headers.len() {
            return Err(Error::Format(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        for (c, field) in record.iter().skip(skip).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                column: c + skip + 1,
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + skip + 1,
                    message: format!("`{field}` is not finite"),
                });
            }
            columns[c].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::Format("file has a header but no rows".into()));
    }
    SeriesDataset::from_columns(names, columns)
}

/// Standardizes every channel with statistics of its training split.
pub fn zscore_fit_apply(ds: &SeriesDataset) -> Result<SeriesDataset> {
    let ranges = ds.split(1)?;
    let mut stats = Vec::with_capacity(ds.n_channels());
    for (c, name) in ds.channel_names.iter().enumerate() {
        let s = ChannelStats::of(&ds.columns[c][ranges.train.clone()]);
        if !(s.std > 0.0) {
            return Err(Error::ConstantChannel(name.clone()));
        }
        stats.push(s);
    }
    let columns = ds
        .columns
        .iter()
        .zip(&stats)
        .map(|(col, s)| col.iter().map(|v| (v - s.mean) / s.std).collect())
        .collect();
    Ok(SeriesDataset {
        channel_names: ds.channel_names.clone(),
        columns,
        split_ratios: ds.split_ratios,
        train_stats: Some(stats),
    })
}

/// One univariate supervised example: `history` is immediately followed by
/// `target` in the same channel and split.
#[derive(Debug, Clone, Copy)]
pub struct SeriesWindow<'a> {
    pub history: &'a [f64],
    pub target: &'a [f64],
    pub channel_index: usize,
    /// Absolute timestep of `history[0]`.
    pub origin_timestep: usize,
}

/// Number of window origins at `stride` in a split of length `split_len`.
pub fn window_count(split_len: usize, lookback: usize, horizon: usize, stride: usize) -> usize {
    let span = lookback + horizon;
    if split_len < span || stride == 0 {
        0
    } else {
        (split_len - span) / stride + 1
    }
}

/// Enumerates windows for every channel (channel-major) inside one split.
pub fn make_windows<'a>(
    ds: &'a SeriesDataset,
    ranges: &SplitRanges,
    split: Split,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<SeriesWindow<'a>>> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::config("lookback, horizon and stride must be positive"));
    }
    let range = ranges.get(split);
    let span = lookback + horizon;
    if range.len() < span {
        return Err(Error::InsufficientData(format!(
            "{split:?} split has {} steps, windows need {span}",
            range.len()
        )));
    }
    let origins = window_count(range.len(), lookback, horizon, stride);
    let mut out = Vec::with_capacity(origins * ds.n_channels());
    for (c, col) in ds.columns.iter().enumerate() {
        for k in 0..origins {
            let start = range.start + k * stride;
            out.push(SeriesWindow {
                history: &col[start..start + lookback],
                target: &col[start + lookback..start + span],
                channel_index: c,
                origin_timestep: start,
            });
        }
    }
    Ok(out)
}

/// Instance statistics removed before the model and restored after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevinStats {
    pub mean: f64,
    /// Population standard deviation of the history.
    pub std: f64,
    pub eps: f64,
}

impl RevinStats {
    /// Divisor applied during normalization, `sqrt(std² + eps)`.
    pub fn scale(&self) -> f64 {
        (self.std * self.std + self.eps).sqrt()
    }
}

pub fn revin_normalize(history: &[f64]) -> (Vec<f64>, RevinStats) {
    let s = ChannelStats::of(history);
    let stats = RevinStats {
        mean: s.mean,
        std: s.std,
        eps: REVIN_EPS,
    };
    let scale = stats.scale();
    (history.iter().map(|v| (v - stats.mean) / scale).collect(), stats)
}

pub fn revin_denormalize(pred: &[f64], stats: &RevinStats) -> Vec<f64> {
    let scale = stats.scale();
    pred.iter().map(|v| v * scale + stats.mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(cols: Vec<Vec<f64>>) -> SeriesDataset {
        let names = (0..cols.len()).map(|i| format!("c{i}")).collect();
        SeriesDataset::from_columns(names, cols).unwrap()
    }

    #[test]
    fn split_examples() {
        let r = chronological_split(100, SplitRatios::STANDARD, 1).unwrap();
        assert_eq!((r.train, r.val, r.test), (0..70, 70..80, 80..100));
        let r = chronological_split(17420, SplitRatios::ETT, 1).unwrap();
        assert_eq!((r.train, r.val, r.test), (0..10452, 10452..13936, 13936..17420));
        assert!(SplitRatios::new(1.0, 0.0, 0.0).is_err());
        assert!(matches!(
            chronological_split(100, SplitRatios::STANDARD, 11),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn zscore_uses_train_population_std() {
        // 5 steps at 6:2:2 → train = first 3
        let d = ds(vec![vec![1.0, 2.0, 3.0, 10.0, 20.0]])
            .with_split_ratios(SplitRatios::ETT)
            .unwrap();
        let z = zscore_fit_apply(&d).unwrap();
        let c = z.channel(0);
        assert!((c[0] + 1.224744871391589).abs() < 1e-4);
        assert!(c[1].abs() < 1e-12);
        assert!((c[2] - 1.224744871391589).abs() < 1e-4);
        // val/test use train stats, so they are not centred
        assert!(c[3] > 5.0);
        let stats = z.train_stats().unwrap()[0];
        assert!((stats.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zscore_is_idempotent_on_standardized_data() {
        let d = ds(vec![vec![3.0, -1.0, 4.0, 1.0, -5.0, 9.0, 2.0, 6.0, -5.0, 3.0]]);
        let once = zscore_fit_apply(&d).unwrap();
        let twice = zscore_fit_apply(&once).unwrap();
        for (a, b) in once.channel(0).iter().zip(twice.channel(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_is_named() {
        let d = SeriesDataset::from_columns(
            vec!["ok".into(), "flat".into()],
            vec![(0..10).map(f64::from).collect(), vec![2.0; 10]],
        )
        .unwrap();
        match zscore_fit_apply(&d).unwrap_err() {
            Error::ConstantChannel(name) => assert_eq!(name, "flat"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn window_examples() {
        let d = ds(vec![(0..200).map(f64::from).collect(); 7]);
        let ranges = SplitRanges {
            train: 0..200,
            val: 0..0,
            test: 0..0,
        };
        let w = make_windows(&d, &ranges, Split::Train, 104, 96, 1).unwrap();
        assert_eq!(w.len(), 7);
        assert_eq!(w[0].history.len(), 104);
        assert_eq!(w[0].target[0], 104.0);
        let short = SplitRanges {
            train: 0..199,
            ..ranges
        };
        assert!(matches!(
            make_windows(&d, &short, Split::Train, 104, 96, 1),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn revin_examples() {
        let (n, s) = revin_normalize(&[5.0, 5.0, 5.0]);
        assert!(n.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(s.std, 0.0);
        let (n, s) = revin_normalize(&[1.0, 3.0]);
        assert!((n[0] + 1.0).abs() < 1e-5 && (n[1] - 1.0).abs() < 1e-5);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        let st = RevinStats {
            mean: 2.0,
            std: 1.0,
            eps: REVIN_EPS,
        };
        let out = revin_denormalize(&[0.0, 0.0], &st);
        assert_eq!(out, vec![2.0, 2.0]);
        let st = RevinStats {
            mean: 0.0,
            std: 3.0,
            eps: REVIN_EPS,
        };
        assert!((revin_denormalize(&[1.0], &st)[0] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn csv_parsing() {
        let text = "date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n";
        let d = parse_csv(text, None).unwrap();
        assert_eq!(d.shape(), (2, 2));
        assert_eq!(d.channel_names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(d.channel(1), &[2.0, 4.0]);

        let d = parse_csv("x,y\n1,2\n", Some(false)).unwrap();
        assert_eq!(d.shape(), (1, 2));

        assert!(matches!(parse_csv("", None), Err(Error::Format(_))));
        assert!(matches!(parse_csv("a,b\n1,2\n3\n", None), Err(Error::Format(_))));
        match parse_csv("a,b\n1,2\n3,zz\n", None).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column), (3, 2)),
            e => panic!("unexpected {e:?}"),
        }
    }
}
