//! Sample sets (binary, magic `QFVS`) and line-oriented metric records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::tape::Mat;

pub const SAMPLE_SET_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;
const SAMPLE_MAGIC: &[u8; 4] = b"QFVS";
const METRICS_TAG: &str = "#qfvae-metrics";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetKind {
    /// Free-running samples drawn from a prior.
    Samples,
    /// Posterior-mean reconstructions of reference utterances.
    CopySynthesis,
}

impl SetKind {
    pub fn name(self) -> &'static str {
        match self {
            SetKind::Samples => "samples",
            SetKind::CopySynthesis => "copy-synth",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub utterance: String,
    pub sample: u32,
    pub frames: Mat,
    pub attention: Mat,
    pub latents: Mat,
    pub indices: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub kind: SetKind,
    pub model: String,
    pub codebook_size: u64,
    pub prior: String,
    pub scale: f64,
    pub temperature: f64,
    pub config_digest: String,
    pub records: Vec<SampleRecord>,
}

impl SampleSet {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(SAMPLE_MAGIC);
        w.u32(SAMPLE_SET_VERSION);
        w.u8(match self.kind {
            SetKind::Samples => 1,
            SetKind::CopySynthesis => 2,
        });
        w.string(&self.model);
        w.u64(self.codebook_size);
        w.string(&self.prior);
        w.f64(self.scale);
        w.f64(self.temperature);
        w.string(&self.config_digest);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            let mut rec = Writer::new();
            rec.string(&r.utterance);
            rec.u32(r.sample);
            rec.mat(&r.frames);
            rec.mat(&r.attention);
            rec.mat(&r.latents);
            match &r.indices {
                Some(ix) => {
                    rec.u8(1);
                    rec.u32(ix.len() as u32);
                    for k in ix {
                        rec.u32(*k as u32);
                    }
                }
                None => rec.u8(0),
            }
            w.record(rec);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "sample set header");
        r.magic(SAMPLE_MAGIC)?;
        let version = r.u32()?;
        if version != SAMPLE_SET_VERSION {
            return Err(Error::Format(format!(
                "sample set version {version} is not supported (expected {SAMPLE_SET_VERSION})"
            )));
        }
        let kind = match r.u8()? {
            1 => SetKind::Samples,
            2 => SetKind::CopySynthesis,
            k => return Err(Error::Format(format!("unknown sample set kind {k}"))),
        };
        let model = r.string()?;
        let codebook_size = r.u64()?;
        let prior = r.string()?;
        let scale = r.f64()?;
        let temperature = r.f64()?;
        let config_digest = r.string()?;
        let count = r.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let mut rec = r.record(&format!("sample record {i}"))?;
            let utterance = rec.string()?;
            rec.rename(format!("sample record {i} ({utterance})"));
            let sample = rec.u32()?;
            let frames = rec.mat()?;
            let attention = rec.mat()?;
            let latents = rec.mat()?;
            let indices = match rec.u8()? {
                0 => None,
                _ => {
                    let n = rec.u32()? as usize;
                    Some((0..n).map(|_| rec.u32().map(|k| k as usize)).collect::<Result<_>>()?)
                }
            };
            rec.expect_end()?;
            records.push(SampleRecord {
                utterance,
                sample,
                frames,
                attention,
                latents,
                indices,
            });
        }
        r.rename("sample set".into());
        r.expect_end()?;
        Ok(SampleSet {
            kind,
            model,
            codebook_size,
            prior,
            scale,
            temperature,
            config_digest,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// One file of metric records: a header of `key=value` fields followed by one
/// `key=value` line per utterance and a final `mean` line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSet {
    pub version: u32,
    pub header: BTreeMap<String, String>,
    pub rows: Vec<Vec<(String, String)>>,
}

impl MetricSet {
    pub fn new(header: &[(&str, String)]) -> Self {
        MetricSet {
            version: METRICS_VERSION,
            header: header.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            rows: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        self.header.get("kind").map(String::as_str).unwrap_or("")
    }

    pub fn get(&self, key: &str) -> &str {
        self.header.get(key).map(String::as_str).unwrap_or("-")
    }

    pub fn push(&mut self, row: Vec<(String, String)>) {
        self.rows.push(row);
    }

    /// The row whose first field is `mean`.
    pub fn mean_row(&self) -> Option<&[(String, String)]> {
        self.rows
            .iter()
            .find(|r| r.first().is_some_and(|(k, _)| k == "mean"))
            .map(|r| &r[..])
    }

    pub fn mean_value(&self, key: &str) -> Result<f64> {
        let row = self
            .mean_row()
            .ok_or_else(|| Error::Format("metric records have no mean line".into()))?;
        let (_, v) = row
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::Format(format!("mean line lacks {key:?}")))?;
        v.parse()
            .map_err(|_| Error::Format(format!("mean {key} is not a number: {v:?}")))
    }

    pub fn render(&self) -> String {
        let mut s = format!("{METRICS_TAG} version={}", self.version);
        for (k, v) in &self.header {
            let _ = write!(s, " {k}={v}");
        }
        s.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row
                .iter()
                .map(|(k, v)| if v.is_empty() { k.clone() } else { format!("{k}={v}") })
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Format("empty metric record file".into()))?;
        let mut fields = head.split_whitespace();
        if fields.next() != Some(METRICS_TAG) {
            return Err(Error::Format(format!("metric records must start with {METRICS_TAG}")));
        }
        let mut header = BTreeMap::new();
        let mut version = None;
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {f:?}")))?;
            if k == "version" {
                version = Some(v.parse().map_err(|_| Error::Format(format!("bad version {v:?}")))?);
            } else {
                header.insert(k.to_string(), v.to_string());
            }
        }
        let version = version.ok_or_else(|| Error::Format("metric header has no version".into()))?;
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|f| match f.split_once('=') {
                        Some((k, v)) => (k.to_string(), v.to_string()),
                        None => (f.to_string(), String::new()),
                    })
                    .collect()
            })
            .collect();
        Ok(MetricSet { version, header, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

/// Reconstruction and sampling tables over any number of metric sets.
pub fn render_report(sets: &[MetricSet]) -> Result<String> {
    if sets.is_empty() {
        return Err(Error::Data("no metric records to report".into()));
    }
    if let Some(bad) = sets.iter().find(|s| s.version != METRICS_VERSION) {
        return Err(Error::Version(format!(
            "metric records of version {} mixed with version {METRICS_VERSION}",
            bad.version
        )));
    }
    let mut recon: Vec<&MetricSet> = sets.iter().filter(|s| s.kind() == "reconstruction").collect();
    let mut div: Vec<&MetricSet> = sets.iter().filter(|s| s.kind() == "diversity").collect();
    if let Some(other) = sets
        .iter()
        .find(|s| s.kind() != "reconstruction" && s.kind() != "diversity")
    {
        return Err(Error::Format(format!("unknown metric record kind {:?}", other.kind())));
    }
    let k_of = |s: &MetricSet| s.get("codebook_size").parse::<u64>().unwrap_or(0);
    recon.sort_by(|a, b| {
        (a.get("model") == "global", k_of(a), a.get("model"), a.get("digest")).cmp(&(
            b.get("model") == "global",
            k_of(b),
            b.get("model"),
            b.get("digest"),
        ))
    });
    div.sort_by(|a, b| {
        let key = |s: &MetricSet| (k_of(s), s.get("model").to_string(), s.get("prior").to_string());
        key(a)
            .cmp(&key(b))
            .then(num(a.get("scale")).total_cmp(&num(b.get("scale"))))
            .then(num(a.get("temperature")).total_cmp(&num(b.get("temperature"))))
            .then(a.get("digest").cmp(b.get("digest")))
    });

    let mut out = String::new();
    if !recon.is_empty() {
        out.push_str("Reconstruction (copy synthesis, test set means)\n");
        let mut rows = vec![vec![
            "model".into(),
            "K".into(),
            "FFE".into(),
            "MCD (dB)".into(),
            "digest".into(),
        ]];
        for s in &recon {
            rows.push(vec![
                s.get("model").into(),
                s.get("codebook_size").into(),
                fmt_f64(s.mean_value("ffe")?),
                fmt_f64(s.mean_value("mcd")?),
                s.get("digest").into(),
            ]);
        }
        out.push_str(&table(&rows));
    }
    if !div.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str("Sampling diversity (mean per-token stddev; F0 over voiced frames)\n");
        let mut rows = vec![vec![
            "model".into(),
            "prior".into(),
            "scale".into(),
            "temp".into(),
            "E".into(),
            "F0 (Hz)".into(),
            "Dur (ms)".into(),
            "digest".into(),
        ]];
        for s in &div {
            rows.push(vec![
                s.get("model").into(),
                s.get("prior").into(),
                s.get("scale").into(),
                s.get("temperature").into(),
                fmt_f64(s.mean_value("energy")?),
                fmt_f64(s.mean_value("f0")?),
                fmt_f64(s.mean_value("duration")?),
                s.get("digest").into(),
            ]);
        }
        out.push_str(&table(&rows));
    }
    Ok(out)
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
        if i == 0 {
            s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recon(model: &str, k: u64, ffe: f64) -> MetricSet {
        let mut m = MetricSet::new(&[
            ("kind", "reconstruction".into()),
            ("model", model.into()),
            ("codebook_size", k.to_string()),
            ("digest", "00".into()),
        ]);
        m.push(vec![
            ("utt".into(), "a".into()),
            ("ffe".into(), fmt_f64(ffe)),
            ("mcd".into(), fmt_f64(1.0)),
        ]);
        m.push(vec![
            ("mean".into(), String::new()),
            ("ffe".into(), fmt_f64(ffe)),
            ("mcd".into(), fmt_f64(1.0)),
        ]);
        m
    }

    #[test]
    fn sample_set_round_trip() {
        let set = SampleSet {
            kind: SetKind::Samples,
            model: "qfvae-k8".into(),
            codebook_size: 8,
            prior: "independent".into(),
            scale: 0.2,
            temperature: 1.0,
            config_digest: "ab".into(),
            records: vec![SampleRecord {
                utterance: "u".into(),
                sample: 3,
                frames: Mat::from_vec(1, 2, vec![0.5, -1.0]),
                attention: Mat::from_vec(1, 1, vec![1.0]),
                latents: Mat::from_vec(1, 3, vec![0.0, 1.0, 2.0]),
                indices: Some(vec![7]),
            }],
        };
        let bytes = set.encode();
        assert_eq!(SampleSet::decode(&bytes).unwrap(), set);
        assert!(SampleSet::decode(&bytes[..bytes.len() - 1])
            .unwrap_err()
            .to_string()
            .contains("record 0"));
    }

    #[test]
    fn metrics_round_trip() {
        let m = recon("baseline", 0, 0.25);
        let back = MetricSet::parse(&m.render()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.mean_value("ffe").unwrap(), 0.25);
    }

    #[test]
    fn report_orders_by_codebook_size() {
        let sets = vec![
            recon("qfvae-k128", 128, 0.1),
            recon("qfvae-k8", 8, 0.3),
            recon("qfvae-k32", 32, 0.2),
        ];
        let r = render_report(&sets).unwrap();
        let (p8, p32, p128) = (r.find("k8 ").unwrap(), r.find("k32").unwrap(), r.find("k128").unwrap());
        assert!(p8 < p32 && p32 < p128, "{r}");
        assert_eq!(r, render_report(&sets).unwrap());
    }

    #[test]
    fn mixed_versions_rejected() {
        let mut old = recon("baseline", 0, 0.1);
        old.version = 0;
        let sets = vec![recon("qfvae-k8", 8, 0.3), MetricSet::parse(&old.render()).unwrap()];
        assert!(matches!(render_report(&sets), Err(Error::Version(_))));
    }
}
