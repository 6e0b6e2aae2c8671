//! JSON-lines dataset files: a header object followed by one record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, RawRecord, SamplingMeta};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    id: usize,
    n: usize,
    p: usize,
    normalized: bool,
    meta: SamplingMeta,
}

pub(super) fn write_to<W: Write>(ds: &Dataset, out: &mut W) -> Result<()> {
    let header = Header {
        id: ds.id,
        n: ds.n,
        p: ds.p,
        normalized: ds.normalized,
        meta: ds.meta.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for r in ds.records() {
        serde_json::to_writer(&mut *out, &r.to_owned())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_to(ds, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
            line: 1,
            reason: format!("header: {e}"),
        })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                reason: "missing header".into(),
            })
        }
    };
    let mut ds = Dataset::new(header.id, header.n, header.p, header.meta);
    for (k, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = k + 1;
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        ds.push(&rec).map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
    }
    ds.normalized = header.normalized;
    ds.validate()?;
    Ok(ds)
}
