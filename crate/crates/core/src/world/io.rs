//! Session files: one JSON object per line.
//!
//! Fields: `t, px, py, pz, gdop, hdop, vdop, pdop, nsat, ex, ey, ez`, plus the
//! optional true covariance `rtxx, rtxy, rtxz, rtyy, rtyz, rtzz` (all or none).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{GnssQuality, SessionRecord};
use crate::spd::SpdMatrix;

#[derive(Serialize, Deserialize)]
struct Row {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    gdop: f64,
    hdop: f64,
    vdop: f64,
    pdop: f64,
    nsat: u32,
    ex: f64,
    ey: f64,
    ez: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rtxx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rtxy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rtxz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rtyy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rtyz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rtzz: Option<f64>,
}

const TRUTH_FIELDS: [&str; 6] = ["rtxx", "rtxy", "rtxz", "rtyy", "rtyz", "rtzz"];

impl Row {
    fn from_record(r: &SessionRecord) -> Self {
        let rt = |i: usize, j: usize| r.truth_cov.as_ref().map(|m| m.get(i, j));
        Row {
            t: r.t,
            px: r.position[0],
            py: r.position[1],
            pz: r.position[2],
            gdop: r.quality.gdop,
            hdop: r.quality.hdop,
            vdop: r.quality.vdop,
            pdop: r.quality.pdop,
            nsat: r.quality.sat_count,
            ex: r.residual[0],
            ey: r.residual[1],
            ez: r.residual[2],
            rtxx: rt(0, 0),
            rtxy: rt(0, 1),
            rtxz: rt(0, 2),
            rtyy: rt(1, 1),
            rtyz: rt(1, 2),
            rtzz: rt(2, 2),
        }
    }

    fn into_record(self, line: usize) -> Result<SessionRecord> {
        let rt = [self.rtxx, self.rtxy, self.rtxz, self.rtyy, self.rtyz, self.rtzz];
        let truth_cov = if rt.iter().all(Option::is_none) {
            None
        } else {
            if let Some(k) = rt.iter().position(Option::is_none) {
                return Err(Error::Parse {
                    line,
                    message: format!("missing field `{}` (true covariance is all or none)", TRUTH_FIELDS[k]),
                });
            }
            let v: Vec<f64> = rt.iter().map(|x| x.unwrap_or_default()).collect();
            let m = vec![v[0], v[1], v[2], v[1], v[3], v[4], v[2], v[4], v[5]];
            Some(SpdMatrix::new(3, m).map_err(|e| Error::Parse {
                line,
                message: format!("true covariance: {e}"),
            })?)
        };
        Ok(SessionRecord {
            t: self.t,
            position: [self.px, self.py, self.pz],
            quality: GnssQuality {
                gdop: self.gdop,
                hdop: self.hdop,
                vdop: self.vdop,
                pdop: self.pdop,
                sat_count: self.nsat,
            },
            residual: [self.ex, self.ey, self.ez],
            truth_cov,
        })
    }
}

/// Writes one line per record. Floats use the shortest form that parses
/// back to the same value.
pub fn write_jsonl<W: Write>(records: &[SessionRecord], mut out: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(&Row::from_record(r)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_jsonl_string(records: &[SessionRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_jsonl(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("JSON is UTF-8"))
}

/// Reads records; blank lines are skipped, line numbers are 1-based.
pub fn read_jsonl_str(text: &str) -> Result<Vec<SessionRecord>> {
    read_lines(text.lines().map(|l| Ok(l.to_string())))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SessionRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", path.display())))?;
    read_lines(BufReader::new(file).lines())
}

fn read_lines<I: Iterator<Item = std::io::Result<String>>>(lines: I) -> Result<Vec<SessionRecord>> {
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(row.into_record(idx + 1)?);
    }
    Ok(out)
}
