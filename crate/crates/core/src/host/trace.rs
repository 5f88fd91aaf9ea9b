//! IO trace files: one command per line, `R|W <lba> <count> [payload-file]`,
//! `#` starts a comment.

use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use super::driver::{Driver, IoError};
use super::Host;
use crate::event::Actor;
use crate::nvme::Controller;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceOp {
    pub dir: Dir,
    pub lba: u64,
    pub count: u64,
    pub payload: Option<PathBuf>,
    pub line: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: cannot read payload {path}: {msg}")]
    Payload {
        line: usize,
        path: String,
        msg: String,
    },
}

pub fn parse(text: &str) -> Result<Vec<TraceOp>, TraceError> {
    let mut ops = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: &str| TraceError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut parts = body.split_whitespace();
        let dir = match parts.next() {
            Some("R") | Some("r") => Dir::Read,
            Some("W") | Some("w") => Dir::Write,
            Some(other) => return Err(err(&format!("unknown direction {other:?}"))),
            None => unreachable!(),
        };
        let lba = parts
            .next()
            .ok_or_else(|| err("missing lba"))?
            .parse::<u64>()
            .map_err(|e| err(&format!("bad lba: {e}")))?;
        let count = parts
            .next()
            .ok_or_else(|| err("missing count"))?
            .parse::<u64>()
            .map_err(|e| err(&format!("bad count: {e}")))?;
        if count == 0 {
            return Err(err("count must be at least 1"));
        }
        let payload = parts.next().map(PathBuf::from);
        if parts.next().is_some() {
            return Err(err("trailing fields"));
        }
        ops.push(TraceOp {
            dir,
            lba,
            count,
            payload,
            line,
        });
    }
    Ok(ops)
}

pub fn render(ops: &[TraceOp]) -> String {
    let mut s = String::new();
    for op in ops {
        let d = match op.dir {
            Dir::Read => 'R',
            Dir::Write => 'W',
        };
        s.push_str(&format!("{d} {} {}", op.lba, op.count));
        if let Some(p) = &op.payload {
            s.push_str(&format!(" {}", p.display()));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub completed: usize,
    pub errors: usize,
    pub aborted_at_line: Option<usize>,
    /// `(lba, data)` of every successful read, in order.
    pub reads: Vec<(u64, Vec<u8>)>,
}

/// Issues every op in order. Writes without a payload file write a pattern
/// derived from the LBA. Stops at the first device-dead condition.
pub fn replay(
    host: &mut Host,
    ctrl: &mut Controller,
    driver: &mut Driver,
    ops: &[TraceOp],
    base_dir: &Path,
) -> Result<ReplayOutcome, TraceError> {
    let mut out = ReplayOutcome::default();
    let bs = driver.block_size().max(1) as u64;
    for op in ops {
        let r = match op.dir {
            Dir::Read => driver.read(host, ctrl, op.lba, op.count).map(|d| out.reads.push((op.lba, d))),
            Dir::Write => {
                let len = (op.count * bs) as usize;
                let mut data = match &op.payload {
                    Some(p) => {
                        let path = base_dir.join(p);
                        std::fs::read(&path).map_err(|e| TraceError::Payload {
                            line: op.line,
                            path: path.display().to_string(),
                            msg: e.to_string(),
                        })?
                    }
                    None => (0..len).map(|i| (op.lba as usize + i / bs as usize) as u8).collect(),
                };
                data.resize(len, 0);
                driver.write(host, ctrl, op.lba, &data)
            }
        };
        match r {
            Ok(()) => out.completed += 1,
            Err(IoError::DeviceDead) | Err(IoError::NotReady(_)) => {
                host.log.push(Actor::Host, "trace-aborted", json!({ "line": op.line }));
                out.aborted_at_line = Some(op.line);
                return Ok(out);
            }
            Err(e) => {
                out.errors += 1;
                host.log.push(
                    Actor::Host,
                    "trace-io-error",
                    json!({ "line": op.line, "error": e.to_string() }),
                );
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_payloads() {
        let t = "# boot\nR 0 1\nW 2048 8 blob.bin # cookie\n\n  r 34 2\n";
        let ops = parse(t).unwrap();
        assert_eq!(ops.len(), 3);
        assert_eq!(ops[1].dir, Dir::Write);
        assert_eq!(ops[1].payload.as_deref(), Some(Path::new("blob.bin")));
        assert_eq!(ops[2].line, 5);
        assert_eq!(parse(&render(&ops)).unwrap().len(), 3);
    }

    #[test]
    fn reports_line_numbers() {
        let e = parse("R 0 1\nX 1 1\n").unwrap_err();
        assert_eq!(
            e,
            TraceError::Parse {
                line: 2,
                msg: "unknown direction \"X\"".into()
            }
        );
        assert!(matches!(parse("R 0 0").unwrap_err(), TraceError::Parse { line: 1, .. }));
        assert!(parse("").unwrap().is_empty());
    }
}
