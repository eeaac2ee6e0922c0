//! Request traces: Poisson synthesis and CSV files.
//!
//! File format: header `request_id,arrival_slot,prompt_tokens,response_tokens`, one
//! row per request. Lines starting with `#` are comments; the generator records its
//! parameters there.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub request_id: u64,
    pub arrival_slot: u64,
    pub prompt_tokens: u64,
    pub response_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// Free-form provenance, e.g. generator parameters and seed.
    pub metadata: Vec<String>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks ordering, id uniqueness and token counts.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.prompt_tokens == 0 || r.response_tokens == 0 {
                return Err(Error::Precondition(format!("request {} has zero tokens", r.request_id)));
            }
            if !ids.insert(r.request_id) {
                return Err(Error::Precondition(format!("duplicate request id {}", r.request_id)));
            }
            if i > 0 && self.records[i - 1].arrival_slot > r.arrival_slot {
                return Err(Error::Precondition("arrival slots must be non-decreasing".into()));
            }
        }
        Ok(())
    }
}

/// Token-length model for one side (prompt or response) of a request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthModel {
    LogNormal { median: f64, sigma: f64 },
    /// Bins `(lo, hi, weight)`; a sample is uniform within a bin picked by weight.
    Histogram { bins: Vec<(u64, u64, f64)> },
}

impl LengthModel {
    fn validate(&self) -> Result<()> {
        match self {
            LengthModel::LogNormal { median, sigma } => {
                if !(median.is_finite() && *median >= 1.0 && sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::Config("lognormal needs median >= 1 and sigma >= 0".into()));
                }
            }
            LengthModel::Histogram { bins } => {
                if bins.is_empty()
                    || bins.iter().any(|&(lo, hi, w)| lo == 0 || hi < lo || !(w >= 0.0 && w.is_finite()))
                    || bins.iter().all(|b| b.2 == 0.0)
                {
                    return Err(Error::Config(
                        "histogram bins need 1 <= lo <= hi and non-negative weights, not all zero".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            LengthModel::LogNormal { median, sigma } => LogNormal::new(median.ln(), *sigma)
                .expect("validated parameters")
                .sample(rng),
            LengthModel::Histogram { bins } => {
                let total: f64 = bins.iter().map(|b| b.2).sum();
                let mut x = rng.random::<f64>() * total;
                let mut pick = bins[bins.len() - 1];
                for &b in bins {
                    if x < b.2 {
                        pick = b;
                        break;
                    }
                    x -= b.2;
                }
                rng.random_range(pick.0..=pick.1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthDistribution {
    pub prompt: LengthModel,
    pub response: LengthModel,
    /// Samples are clamped to `[1, max_tokens]` before scaling.
    pub max_tokens: u64,
    pub scale: u64,
}

impl Default for LengthDistribution {
    fn default() -> Self {
        Self {
            prompt: LengthModel::LogNormal {
                median: 120.0,
                sigma: 0.9,
            },
            response: LengthModel::LogNormal {
                median: 200.0,
                sigma: 1.0,
            },
            max_tokens: 1200,
            scale: 1,
        }
    }
}

impl LengthDistribution {
    pub fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        self.response.validate()?;
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if self.scale == 0 {
            return Err(Error::Config("length scale must be at least 1".into()));
        }
        Ok(())
    }

    fn draw(&self, model: &LengthModel, rng: &mut ChaCha8Rng) -> u64 {
        let x = model.sample(rng).round().clamp(1.0, self.max_tokens as f64) as u64;
        x * self.scale
    }
}

/// Poisson arrivals over `duration_slots` with exponential gaps of the given mean,
/// each arrival landing in the slot its continuous time falls into.
pub fn gen_poisson(
    mean_interarrival_slots: f64,
    duration_slots: u64,
    dist: &LengthDistribution,
    seed: u64,
) -> Result<Trace> {
    if !(mean_interarrival_slots.is_finite() && mean_interarrival_slots > 0.0) {
        return Err(Error::Config("mean inter-arrival must be positive".into()));
    }
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(1.0 / mean_interarrival_slots).expect("positive rate");
    let mut t = 0.0f64;
    let mut records = Vec::new();
    loop {
        t += gap.sample(&mut rng);
        if t >= duration_slots as f64 {
            break;
        }
        let prompt_tokens = dist.draw(&dist.prompt, &mut rng);
        let response_tokens = dist.draw(&dist.response, &mut rng);
        records.push(TraceRecord {
            request_id: records.len() as u64,
            arrival_slot: t as u64,
            prompt_tokens,
            response_tokens,
        });
    }
    Ok(Trace {
        records,
        metadata: vec![format!(
            "poisson mean_interarrival_slots={mean_interarrival_slots} duration_slots={duration_slots} seed={seed} scale={}",
            dist.scale
        )],
    })
}

/// Multiplies every token count by `factor`.
pub fn scale_trace(trace: &Trace, factor: u64) -> Result<Trace> {
    if factor == 0 {
        return Err(Error::Config("scale factor must be at least 1".into()));
    }
    let mut out = trace.clone();
    for r in &mut out.records {
        r.prompt_tokens *= factor;
        r.response_tokens *= factor;
    }
    if factor != 1 {
        out.metadata.push(format!("scaled x{factor}"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceWarning {
    /// Row at this line arrived earlier than the row before it; the trace was sorted.
    Unsorted { line: usize },
}

/// Parses a trace, sorting out-of-order rows (stable by arrival) and reporting them.
pub fn read_trace<R: Read>(reader: R) -> Result<(Trace, Vec<TraceWarning>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut warnings = Vec::new();
    let mut ids = BTreeSet::new();
    for row in rdr.deserialize::<TraceRecord>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = records.len() + 2;
        if row.prompt_tokens == 0 || row.response_tokens == 0 {
            return Err(Error::Parse {
                line,
                message: "prompt_tokens and response_tokens must be at least 1".into(),
            });
        }
        if !ids.insert(row.request_id) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate request_id {}", row.request_id),
            });
        }
        if records.last().is_some_and(|p| p.arrival_slot > row.arrival_slot) {
            warnings.push(TraceWarning::Unsorted { line });
        }
        records.push(row);
    }
    if !warnings.is_empty() {
        warn!("trace rows out of arrival order ({} rows); sorted", warnings.len());
        records.sort_by_key(|r| r.arrival_slot);
    }
    Ok((
        Trace {
            records,
            metadata: Vec::new(),
        },
        warnings,
    ))
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    let f = std::fs::File::open(path)?;
    Ok(read_trace(std::io::BufReader::new(f))?.0)
}

pub fn write_trace<W: Write>(trace: &Trace, mut writer: W) -> Result<()> {
    for m in &trace.metadata {
        writeln!(writer, "# {m}")?;
    }
    let mut w = csv::Writer::from_writer(writer);
    if trace.records.is_empty() {
        w.write_record(["request_id", "arrival_slot", "prompt_tokens", "response_tokens"])?;
    }
    for r in &trace.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_trace(trace, std::io::BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn arrival_rate_matches_mean() {
        let dist = LengthDistribution::default();
        let total: usize = (0..20).map(|s| gen_poisson(0.5, 1000, &dist, s).unwrap().len()).sum();
        let mean = total as f64 / 20.0;
        assert!((mean - 2000.0).abs() < 200.0, "mean arrivals {mean}");
    }

    #[test]
    fn empirical_gap_converges() {
        let dist = LengthDistribution::default();
        let t = gen_poisson(2.0, 200_000, &dist, 7).unwrap();
        let mean = 200_000.0 / t.len() as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.05, "{mean}");
    }

    #[test]
    fn empty_and_deterministic() {
        let dist = LengthDistribution::default();
        assert!(gen_poisson(0.5, 0, &dist, 1).unwrap().is_empty());
        assert_eq!(gen_poisson(0.5, 300, &dist, 3).unwrap(), gen_poisson(0.5, 300, &dist, 3).unwrap());
        assert_ne!(gen_poisson(0.5, 300, &dist, 3).unwrap(), gen_poisson(0.5, 300, &dist, 4).unwrap());
        assert!(gen_poisson(0.0, 300, &dist, 3).is_err());
    }

    #[test]
    fn generated_traces_are_valid() {
        let dist = LengthDistribution {
            response: LengthModel::Histogram {
                bins: vec![(1, 10, 1.0), (100, 200, 3.0)],
            },
            ..LengthDistribution::default()
        };
        let t = gen_poisson(0.8, 500, &dist, 11).unwrap();
        t.validate().unwrap();
        assert!(t.records.iter().all(|r| (1..=10).contains(&r.response_tokens) || (100..=200).contains(&r.response_tokens)));
    }

    #[test]
    fn read_three_rows() {
        let csv = "request_id,arrival_slot,prompt_tokens,response_tokens\n0,0,10,5\n1,2,20,6\n2,2,30,7\n";
        let (t, w) = read_trace(csv.as_bytes()).unwrap();
        assert_eq!(t.len(), 3);
        assert!(w.is_empty());
    }

    #[test]
    fn zero_response_is_parse_error() {
        let csv = "request_id,arrival_slot,prompt_tokens,response_tokens\n0,0,10,5\n1,2,20,0\n";
        match read_trace(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "request_id,arrival_slot,prompt_tokens,response_tokens\n0,0,10,5\n1,x,20,3\n";
        assert!(matches!(read_trace(csv.as_bytes()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn header_only_is_empty() {
        let (t, _) = read_trace("request_id,arrival_slot,prompt_tokens,response_tokens\n".as_bytes()).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn unsorted_rows_are_sorted_with_warning() {
        let csv = "request_id,arrival_slot,prompt_tokens,response_tokens\n0,5,10,5\n1,2,20,6\n";
        let (t, w) = read_trace(csv.as_bytes()).unwrap();
        assert_eq!(w, vec![TraceWarning::Unsorted { line: 3 }]);
        assert_eq!(t.records[0].request_id, 1);
    }

    #[test]
    fn scaling() {
        let t = gen_poisson(1.0, 50, &LengthDistribution::default(), 2).unwrap();
        assert_eq!(scale_trace(&t, 1).unwrap(), t);
        let ten = scale_trace(&t, 10).unwrap();
        assert_eq!(ten.records[0].prompt_tokens, 10 * t.records[0].prompt_tokens);
        assert_eq!(
            scale_trace(&ten, 10).unwrap().records,
            scale_trace(&t, 100).unwrap().records
        );
        let one = Trace {
            records: vec![TraceRecord {
                request_id: 0,
                arrival_slot: 0,
                prompt_tokens: 120,
                response_tokens: 1,
            }],
            metadata: vec![],
        };
        assert_eq!(scale_trace(&one, 10).unwrap().records[0].prompt_tokens, 1200);
    }

    proptest! {
        #[test]
        fn write_read_round_trip(seed in 0u64..1000, mean in 0.2f64..3.0) {
            let t = gen_poisson(mean, 100, &LengthDistribution::default(), seed).unwrap();
            let mut buf = Vec::new();
            write_trace(&t, &mut buf).unwrap();
            let (back, w) = read_trace(buf.as_slice()).unwrap();
            prop_assert!(w.is_empty());
            prop_assert_eq!(back.records, t.records);
        }
    }
}
