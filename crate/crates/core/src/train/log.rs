use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "iteration\tphase\tloss\tlr\td_on_gt_mean\td_on_pred_mean\twall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Pretrain,
    AdvD,
    AdvG,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::AdvD => "adv_d",
            Phase::AdvG => "adv_g",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "adv_d" => Ok(Phase::AdvD),
            "adv_g" => Ok(Phase::AdvG),
            other => Err(Error::Format(format!("unknown phase `{other}`"))),
        }
    }
}

/// One optimizer step. Discriminator means are absent where no
/// discriminator ran.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    /// 0-based step index within the phase.
    pub iteration: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    pub d_on_gt_mean: Option<f64>,
    pub d_on_pred_mean: Option<f64>,
    pub wall_ms: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Format(format!("bad number `{s}` in log")))
}

impl TrainLogRecord {
    /// Tab-separated line; floats use the shortest exact representation.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.3}",
            self.iteration,
            self.phase,
            self.loss,
            self.lr,
            opt(self.d_on_gt_mean),
            opt(self.d_on_pred_mean),
            self.wall_ms
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::Format(format!("log line has {} fields: {line:?}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}` in log")));
        Ok(Self {
            iteration: f[0].parse().map_err(|_| Error::Format(format!("bad iteration `{}`", f[0])))?,
            phase: f[1].parse()?,
            loss: num(f[2])?,
            lr: num(f[3])?,
            d_on_gt_mean: parse_opt(f[4])?,
            d_on_pred_mean: parse_opt(f[5])?,
            wall_ms: num(f[6])?,
        })
    }
}

/// Parses a whole log file body (header included).
pub fn parse_log(text: &str) -> Result<Vec<TrainLogRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format("training log does not start with the expected header".into()));
    }
    lines.filter(|l| !l.is_empty()).map(TrainLogRecord::parse_line).collect()
}

/// In-memory record list, optionally mirrored line by line to a file.
#[derive(Default)]
pub struct TrainLog {
    pub records: Vec<TrainLogRecord>,
    pub warnings: Vec<String>,
    sink: Option<BufWriter<File>>,
    echo: bool,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `path` and writes the header.
    pub fn to_file(path: &Path) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{LOG_HEADER}")?;
        w.flush()?;
        Ok(Self { sink: Some(w), ..Self::default() })
    }

    /// Also print warnings to stderr as they occur.
    pub fn echo_warnings(mut self, on: bool) -> Self {
        self.echo = on;
        self
    }

    pub fn push(&mut self, record: TrainLogRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            writeln!(w, "{}", record.to_line())?;
            w.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn warn(&mut self, message: String) {
        if self.echo {
            eprintln!("warning: {message}");
        }
        self.warnings.push(message);
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &TrainLogRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }
}
